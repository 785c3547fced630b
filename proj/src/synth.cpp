#include "sstm/synth.hpp"

#include <cmath>
#include <stdexcept>

namespace sstm {

namespace {

uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

float lattice_value(uint64_t seed, int ch, int xi, int yi) {
  const uint64_t k = mix64(seed ^ mix64(uint64_t(ch) * 0x100000001b3ull ^
                                        (uint64_t(uint32_t(xi)) << 32) ^ uint32_t(yi)));
  return float(k >> 40) / float(1 << 24);
}

float smoothstep(float t) { return t * t * (3.0f - 2.0f * t); }

float noise_octave(uint64_t seed, int ch, float x, float y, float cell) {
  const float gx = x / cell, gy = y / cell;
  const int x0 = int(std::floor(gx)), y0 = int(std::floor(gy));
  const float fx = smoothstep(gx - float(x0)), fy = smoothstep(gy - float(y0));
  const float v00 = lattice_value(seed, ch, x0, y0);
  const float v01 = lattice_value(seed, ch, x0 + 1, y0);
  const float v10 = lattice_value(seed, ch, x0, y0 + 1);
  const float v11 = lattice_value(seed, ch, x0 + 1, y0 + 1);
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

// Smooth value-noise texture in [0,1]; low curvature keeps brightness
// constancy within bilinear resampling error under sub-pixel motion.
float texture(uint64_t seed, int ch, float x, float y) {
  const float v = 0.5f + 0.4f * (noise_octave(seed, ch, x, y, 12.0f) - 0.5f) +
                  0.08f * (noise_octave(seed, ch + 16, x, y, 7.0f) - 0.5f);
  return std::min(std::max(v, 0.0f), 1.0f);
}

struct Affine {
  // p -> A p + b
  float a11 = 1, a12 = 0, a21 = 0, a22 = 1, bx = 0, by = 0;

  static Affine from_step(const StepMotion& m) {
    Affine t;
    if (m.affine) {
      t.a11 = m.a11;
      t.a12 = m.a12;
      t.a21 = m.a21;
      t.a22 = m.a22;
    }
    t.bx = m.tx;
    t.by = m.ty;
    return t;
  }
  Affine compose(const Affine& o) const {  // this after o
    Affine r;
    r.a11 = a11 * o.a11 + a12 * o.a21;
    r.a12 = a11 * o.a12 + a12 * o.a22;
    r.a21 = a21 * o.a11 + a22 * o.a21;
    r.a22 = a21 * o.a12 + a22 * o.a22;
    r.bx = a11 * o.bx + a12 * o.by + bx;
    r.by = a21 * o.bx + a22 * o.by + by;
    return r;
  }
  Affine inverse() const {
    const float det = a11 * a22 - a12 * a21;
    if (std::fabs(det) < 1e-8f) throw std::invalid_argument("synth: singular foreground motion");
    Affine r;
    r.a11 = a22 / det;
    r.a12 = -a12 / det;
    r.a21 = -a21 / det;
    r.a22 = a11 / det;
    r.bx = -(r.a11 * bx + r.a12 * by);
    r.by = -(r.a21 * bx + r.a22 * by);
    return r;
  }
  void apply(float x, float y, float& ox, float& oy) const {
    ox = a11 * x + a12 * y + bx;
    oy = a21 * x + a22 * y + by;
  }
};

bool in_canonical_fg(const SceneSpec& s, float x, float y) {
  const float dx = x - s.fg_cx, dy = y - s.fg_cy;
  if (s.shape == FgShape::Rect)
    return std::fabs(dx) <= s.fg_half_w && std::fabs(dy) <= s.fg_half_h;
  return dx * dx + dy * dy <= s.fg_half_w * s.fg_half_w;
}

}  // namespace

SynthSample generate(const SceneSpec& spec) {
  if (spec.fg_half_w <= 0.0f || spec.fg_half_h <= 0.0f)
    throw std::invalid_argument("synth: degenerate foreground extents");
  if (spec.fg_cx - spec.fg_half_w < 0 || spec.fg_cx + spec.fg_half_w > float(spec.w - 1) ||
      spec.fg_cy - spec.fg_half_h < 0 || spec.fg_cy + spec.fg_half_h > float(spec.h - 1))
    throw std::invalid_argument("synth: foreground does not fit in frame at t=1");

  const int h = spec.h, w = spec.w;
  const Affine step = Affine::from_step(spec.fg_motion);
  // frame t (1-based): fg placed by step^(t-1); inverse maps back to t=1
  std::array<Affine, 3> inv_to_first;
  {
    Affine acc;  // identity
    for (int t = 0; t < 3; ++t) {
      inv_to_first[size_t(t)] = acc.inverse();
      acc = step.compose(acc);
    }
  }
  auto fg_at = [&](int t, float x, float y, float& cx, float& cy) {
    inv_to_first[size_t(t)].apply(x, y, cx, cy);
    return in_canonical_fg(spec, cx, cy);
  };

  SynthSample out;
  Rng noise(spec.noise_seed);
  for (int t = 0; t < 3; ++t) {
    Tensor frame(Shape{3, h, w});
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        float cx, cy;
        const bool fg = fg_at(t, float(j), float(i), cx, cy);
        for (int c = 0; c < 3; ++c) {
          float v;
          if (fg)
            v = texture(spec.fg_seed, c, cx, cy);
          else
            v = texture(spec.bg_seed, c, float(j) - float(t) * spec.bg_tx,
                        float(i) - float(t) * spec.bg_ty);
          if (spec.noise_sigma > 0.0f) v += spec.noise_sigma * float(noise.normal());
          frame.at(c, i, j) = std::min(std::max(v, 0.0f), 1.0f);
        }
      }
    out.frames[size_t(t)] = frame;
  }

  GtSample gt;
  gt.h = h;
  gt.w = w;
  gt.gt_f1 = Tensor(Shape{2, h, w});
  gt.gt_f2 = Tensor(Shape{2, h, w});
  gt.valid1 = Tensor(Shape{1, h, w}, 1.0f);
  gt.valid2 = Tensor(Shape{1, h, w}, 1.0f);
  gt.occ_mask.assign(size_t(h) * w, 0);
  gt.oob_mask.assign(size_t(h) * w, 0);

  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      float cx, cy;
      // frame 1 -> 2
      if (fg_at(0, float(j), float(i), cx, cy)) {
        float nx, ny;
        step.apply(float(j), float(i), nx, ny);
        gt.gt_f1.at(0, i, j) = nx - float(j);
        gt.gt_f1.at(1, i, j) = ny - float(i);
      } else {
        gt.gt_f1.at(0, i, j) = spec.bg_tx;
        gt.gt_f1.at(1, i, j) = spec.bg_ty;
      }
      // frame 2 -> 3
      float fx, fy;
      const bool fg2 = fg_at(1, float(j), float(i), cx, cy);
      if (fg2) {
        float nx, ny;
        step.apply(float(j), float(i), nx, ny);
        fx = nx - float(j);
        fy = ny - float(i);
      } else {
        fx = spec.bg_tx;
        fy = spec.bg_ty;
      }
      gt.gt_f2.at(0, i, j) = fx;
      gt.gt_f2.at(1, i, j) = fy;

      const float tx = float(j) + fx, ty = float(i) + fy;
      if (tx < 0 || tx > float(w - 1) || ty < 0 || ty > float(h - 1))
        gt.oob_mask[size_t(i) * w + j] = 1;
      // background covered by the foreground in frame 3
      if (!fg2 && fg_at(2, tx, ty, cx, cy)) gt.occ_mask[size_t(i) * w + j] = 1;
    }

  out.gt = std::move(gt);
  return out;
}

SceneSpec draw_spec(const SceneDist& dist, Rng& rng) {
  SceneSpec s;
  s.h = dist.h;
  s.w = dist.w;
  s.bg_seed = rng.next_u32();
  s.fg_seed = rng.next_u32();
  s.shape = (dist.allow_disc && rng.uniform() < 0.5) ? FgShape::Disc : FgShape::Rect;
  s.fg_half_w = float(rng.uniform(dist.fg_min_half, dist.fg_max_half));
  s.fg_half_h = s.shape == FgShape::Disc
                    ? s.fg_half_w
                    : float(rng.uniform(dist.fg_min_half, dist.fg_max_half));
  // keep the foreground inside the frame at t=1 with a small margin
  const float mx = s.fg_half_w + 2.0f, my = s.fg_half_h + 2.0f;
  s.fg_cx = float(rng.uniform(mx, float(dist.w - 1) - mx));
  s.fg_cy = float(rng.uniform(my, float(dist.h - 1) - my));
  s.fg_motion.tx = float(rng.uniform(-dist.max_shift, dist.max_shift));
  s.fg_motion.ty = float(rng.uniform(-dist.max_shift, dist.max_shift));
  s.bg_tx = float(rng.uniform(-dist.max_shift, dist.max_shift));
  s.bg_ty = float(rng.uniform(-dist.max_shift, dist.max_shift));
  s.noise_sigma = dist.noise_sigma;
  s.noise_seed = rng.next_u32();
  return s;
}

SynthSample dataset_sample(const SceneDist& dist, uint64_t seed, int64_t index) {
  if (index < 0) throw std::invalid_argument("dataset_sample: negative index");
  Rng rng(mix64(seed * 0x9e3779b97f4a7c15ull + uint64_t(index) + 1));
  return generate(draw_spec(dist, rng));
}

}  // namespace sstm
