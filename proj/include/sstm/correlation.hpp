#pragma once

// All-pairs correlation volumes and the flow-guided multiscale lookup that
// turns them into per-pixel correlation features.

#include <cmath>
#include <string>
#include <vector>

#include "sstm/flowpair.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

// Multiscale correlation volume. Level l has shape (h*w, h/2^l, w/2^l), one
// row per query pixel; level l+1 is avg_pool2 of level l over the target
// plane, so the first-axis extent is identical across levels.
template <typename S>
struct CorrPyramidT {
  std::vector<TensorT<S>> levels;
  int h = 0, w = 0;
};

using CorrPyramid = CorrPyramidT<float>;

struct LookupSpec {
  int levels = 4;
  int radius = 4;
  bool paper_profile = true;  // demand the 324-channel layout

  int window() const { return 2 * radius + 1; }
  int channels() const { return levels * window() * window(); }

  void validate() const {
    if (levels < 1 || radius < 0) throw std::invalid_argument("LookupSpec: bad levels/radius");
    if (paper_profile && channels() != 324)
      throw std::invalid_argument("LookupSpec: profile demands 324 channels, got " +
                                  std::to_string(channels()) + " from (levels=" +
                                  std::to_string(levels) + ", radius=" + std::to_string(radius) + ")");
  }
};

// corr[(i,j),(k,l)] = <fmapA[:,i,j], fmapB[:,k,l]> / sqrt(D). Composed from
// primitives, so it is differentiable in both feature maps for free.
template <typename S>
TensorT<S> corr_all_pairs(const TensorT<S>& fmap_a, const TensorT<S>& fmap_b) {
  if (fmap_a.rank() != 3 || fmap_a.shape() != fmap_b.shape())
    throw std::invalid_argument("corr_all_pairs: feature maps must be equal (C,h,w)");
  const int d = fmap_a.dim(0), h = fmap_a.dim(1), w = fmap_a.dim(2);
  auto rows_a = reshape(permute(fmap_a, {1, 2, 0}), Shape{h * w, d});
  auto cols_b = reshape(fmap_b, Shape{d, h * w});
  auto vol = matmul(rows_a, cols_b);
  vol = mul(vol, S(1) / std::sqrt(S(d)));
  return reshape(vol, Shape{h * w, h, w});
}

template <typename S>
CorrPyramidT<S> build_pyramid(const TensorT<S>& volume, int levels = 4) {
  if (volume.rank() != 3) throw std::invalid_argument("build_pyramid: volume must be (hw,h,w)");
  CorrPyramidT<S> pyr;
  pyr.h = volume.dim(1);
  pyr.w = volume.dim(2);
  if (pyr.h < (1 << (levels - 1)) || pyr.w < (1 << (levels - 1)))
    throw std::invalid_argument("build_pyramid: spatial extent too small for " +
                                std::to_string(levels) + " levels");
  pyr.levels.push_back(volume);
  for (int l = 1; l < levels; ++l) pyr.levels.push_back(avg_pool2(pyr.levels.back()));
  return pyr;
}

// For every query pixel p and pyramid level l, samples the (2r+1)^2 window
// centred at (p + flow)/2^l from that pixel's own target plane. Channels are
// level-major, window row-major. Differentiable w.r.t. flow and the volume.
template <typename S>
TensorT<S> lookup(const CorrPyramidT<S>& pyr, const TensorT<S>& flow,
                  const LookupSpec& spec = {}) {
  spec.validate();
  if (static_cast<int>(pyr.levels.size()) != spec.levels)
    throw std::invalid_argument("lookup: pyramid level count does not match spec");
  const int h = pyr.h, w = pyr.w;
  if (flow.rank() != 3 || flow.dim(0) != 2 || flow.dim(1) != h || flow.dim(2) != w)
    throw std::invalid_argument("lookup: flow must be (2,h,w) matching the pyramid");
  const int r = spec.radius, win = spec.window();
  const int64_t npix = static_cast<int64_t>(h) * w;
  TensorT<S> out(Shape{spec.channels(), h, w});
  S* op = out.data();
  const S* fp = flow.data();

  for (int l = 0; l < spec.levels; ++l) {
    const auto& lev = pyr.levels[static_cast<size_t>(l)];
    const int lh = lev.dim(1), lw = lev.dim(2);
    const S* lp = lev.data();
    const S inv = S(1) / S(1 << l);
    for (int64_t p = 0; p < npix; ++p) {
      const int j = static_cast<int>(p % w), i = static_cast<int>(p / w);
      const S cx = (S(j) + fp[p]) * inv;
      const S cy = (S(i) + fp[npix + p]) * inv;
      const S* plane = lp + p * lh * lw;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          S sx = std::min(std::max(cx + S(dx), S(0)), S(lw - 1));
          S sy = std::min(std::max(cy + S(dy), S(0)), S(lh - 1));
          const int x0 = std::min(static_cast<int>(std::floor(sx)), lw - 1);
          const int y0 = std::min(static_cast<int>(std::floor(sy)), lh - 1);
          const int x1 = std::min(x0 + 1, lw - 1), y1 = std::min(y0 + 1, lh - 1);
          const S fx = sx - S(x0), fy = sy - S(y0);
          const S v = (S(1) - fy) * ((S(1) - fx) * plane[y0 * lw + x0] + fx * plane[y0 * lw + x1]) +
                      fy * ((S(1) - fx) * plane[y1 * lw + x0] + fx * plane[y1 * lw + x1]);
          const int ch = (l * win + (dy + r)) * win + (dx + r);
          op[ch * npix + p] = v;
        }
    }
  }

  bool vol_grad = false;
  for (const auto& lev : pyr.levels) vol_grad = vol_grad || lev.requires_grad();
  const auto levels_copy = pyr.levels;
  detail::maybe_record<S>(
      out, {flow.requires_grad(), vol_grad}, [levels_copy, flow, out, h, w, r, win, npix]() {
        const auto* go = detail::out_grad(out);
        if (!go) return;
        const S* fp2 = flow.data();
        const bool gf_needed = flow.requires_grad();
        std::vector<S>* gf = gf_needed ? &detail::gbuf(flow) : nullptr;
        for (int l = 0; l < static_cast<int>(levels_copy.size()); ++l) {
          const auto& lev = levels_copy[static_cast<size_t>(l)];
          const int lh = lev.dim(1), lw = lev.dim(2);
          const S* lp = lev.data();
          const bool gl_needed = lev.requires_grad();
          std::vector<S>* gl = gl_needed ? &detail::gbuf(lev) : nullptr;
          const S inv = S(1) / S(1 << l);
          for (int64_t p = 0; p < npix; ++p) {
            const int j = static_cast<int>(p % w), i = static_cast<int>(p / w);
            const S cx = (S(j) + fp2[p]) * inv;
            const S cy = (S(i) + fp2[npix + p]) * inv;
            const S* plane = lp + p * lh * lw;
            S gx_acc = S(0), gy_acc = S(0);
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const int ch = (l * win + (dy + r)) * win + (dx + r);
                const S g = (*go)[ch * npix + p];
                if (g == S(0)) continue;
                const S rx = cx + S(dx), ry = cy + S(dy);
                const bool in_x = rx >= S(0) && rx <= S(lw - 1);
                const bool in_y = ry >= S(0) && ry <= S(lh - 1);
                const S sx = std::min(std::max(rx, S(0)), S(lw - 1));
                const S sy = std::min(std::max(ry, S(0)), S(lh - 1));
                const int x0 = std::min(static_cast<int>(std::floor(sx)), lw - 1);
                const int y0 = std::min(static_cast<int>(std::floor(sy)), lh - 1);
                const int x1 = std::min(x0 + 1, lw - 1), y1 = std::min(y0 + 1, lh - 1);
                const S fx = sx - S(x0), fy = sy - S(y0);
                const S v00 = plane[y0 * lw + x0], v01 = plane[y0 * lw + x1];
                const S v10 = plane[y1 * lw + x0], v11 = plane[y1 * lw + x1];
                if (gl_needed) {
                  S* gplane = gl->data() + p * lh * lw;
                  gplane[y0 * lw + x0] += g * (S(1) - fy) * (S(1) - fx);
                  gplane[y0 * lw + x1] += g * (S(1) - fy) * fx;
                  gplane[y1 * lw + x0] += g * fy * (S(1) - fx);
                  gplane[y1 * lw + x1] += g * fy * fx;
                }
                if (gf_needed) {
                  if (in_x) gx_acc += g * ((S(1) - fy) * (v01 - v00) + fy * (v11 - v10)) * inv;
                  if (in_y) gy_acc += g * ((S(1) - fx) * (v10 - v00) + fx * (v11 - v01)) * inv;
                }
              }
            if (gf_needed) {
              (*gf)[p] += gx_acc;
              (*gf)[npix + p] += gy_acc;
            }
          }
        }
      });
  return out;
}

// Concatenated correlation features for the two frame pairs: (D, 2, h, w)
// with the temporal axis indexing {frames 1-2, frames 2-3}.
template <typename S>
TensorT<S> corr_features(const TensorT<S>& fmap1, const TensorT<S>& fmap2,
                         const TensorT<S>& fmap3, const FlowPairT<S>& flow,
                         const LookupSpec& spec = {}) {
  require_res(flow, FlowRes::Eighth, "corr_features");
  auto pyr1 = build_pyramid(corr_all_pairs(fmap1, fmap2), spec.levels);
  auto pyr2 = build_pyramid(corr_all_pairs(fmap2, fmap3), spec.levels);
  auto c1 = lookup(pyr1, flow.f1, spec);
  auto c2 = lookup(pyr2, flow.f2, spec);
  const int d = spec.channels(), h = pyr1.h, w = pyr1.w;
  auto c1t = reshape(c1, Shape{d, 1, h, w});
  auto c2t = reshape(c2, Shape{d, 1, h, w});
  return concat<S>({c1t, c2t}, 1);
}

}  // namespace sstm
