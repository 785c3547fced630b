#include "sstm/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>

#include "sstm/attention.hpp"
#include "sstm/correlation.hpp"
#include "sstm/encoders.hpp"
#include "sstm/flow_io.hpp"
#include "sstm/gradcheck.hpp"
#include "sstm/loss.hpp"
#include "sstm/metrics.hpp"
#include "sstm/model.hpp"
#include "sstm/synth.hpp"
#include "sstm/update.hpp"

namespace sstm {

namespace {

using Fail = std::optional<std::string>;

struct Suite {
  std::vector<CheckResult> results;
  void run(const std::string& suite, const std::string& name, const std::function<Fail()>& fn) {
    CheckResult r;
    r.suite = suite;
    r.name = name;
    try {
      Fail f = fn();
      r.pass = !f.has_value();
      r.detail = f.value_or("ok");
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = std::string("exception: ") + e.what();
    }
    results.push_back(std::move(r));
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

Fail expect(bool cond, const std::string& msg) {
  if (cond) return std::nullopt;
  return msg;
}

template <typename S>
double max_diff(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (int64_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

// ---------------------------------------------------------------------------
// Independent oracles (naive loops, double accumulation)

Tensor oracle_conv_axis(const Tensor& x, const Tensor& k, Axis axis, int stride, int pad) {
  const int rank = x.rank();
  const int d = axis_to_dim(rank, axis);
  const int cin = x.dim(0), cout = k.dim(0), ks = k.dim(2);
  Shape oshape = x.shape();
  oshape[0] = cout;
  oshape[size_t(d)] = (x.dim(d) + 2 * pad - ks) / stride + 1;
  Tensor out(oshape);
  std::vector<int> idx(size_t(rank), 0);
  for (int64_t o = 0; o < out.size(); ++o) {
    int64_t rem = o;
    for (int i = rank - 1; i >= 0; --i) {
      idx[size_t(i)] = int(rem % oshape[size_t(i)]);
      rem /= oshape[size_t(i)];
    }
    double acc = 0;
    for (int ci = 0; ci < cin; ++ci)
      for (int q = 0; q < ks; ++q) {
        std::vector<int> src = idx;
        src[0] = ci;
        src[size_t(d)] = idx[size_t(d)] * stride + q - pad;
        if (src[size_t(d)] < 0 || src[size_t(d)] >= x.dim(d)) continue;
        int64_t off = 0;
        for (int i = 0; i < rank; ++i) off = off * x.dim(i) + src[size_t(i)];
        acc += double(k.at(idx[0], ci, q)) * x.data()[off];
      }
    out.data()[o] = float(acc);
  }
  return out;
}

float oracle_bilinear_at(const Tensor& map, int c, double x, double y) {
  const int h = map.dim(1), w = map.dim(2);
  x = std::min(std::max(x, 0.0), double(w - 1));
  y = std::min(std::max(y, 0.0), double(h - 1));
  const int x0 = std::min(int(std::floor(x)), w - 1), y0 = std::min(int(std::floor(y)), h - 1);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  return float((1 - fy) * ((1 - fx) * map.at(c, y0, x0) + fx * map.at(c, y0, x1)) +
               fy * ((1 - fx) * map.at(c, y1, x0) + fx * map.at(c, y1, x1)));
}

// ---------------------------------------------------------------------------
// gradcheck suite

void add_gradcheck(Suite& s, double tol_scale) {
  const double t1 = 1e-4 * tol_scale;  // primitives
  const double t2 = 1e-3 * tol_scale;  // composites (> 5 primitives)

  auto gc = [&](const std::string& name, const GradFn& f, std::vector<TensorT<double>> inputs,
                double tol, int64_t cap = 0) {
    s.run("gradcheck", name, [&]() -> Fail {
      auto rep = grad_check(f, std::move(inputs), 1e-5, tol, cap);
      return expect(rep.pass, rep.summary());
    });
  };

  Rng rng(1001);
  auto sq_sum = [](const TensorT<double>& t) { return sum_all(mul(t, t)); };

  for (auto [axis, name] : {std::pair{Axis::X, "conv_axis:x"}, std::pair{Axis::Y, "conv_axis:y"}})
    gc(name,
       [axis = axis, &sq_sum](const std::vector<TensorT<double>>& in) {
         return sq_sum(conv_axis(in[0], in[1], axis, 2, 1));
       },
       {rand_uniform<double>(Shape{2, 5, 6}, rng), rand_uniform<double>(Shape{3, 2, 3}, rng)}, t1);
  gc("conv_axis:t",
     [&sq_sum](const std::vector<TensorT<double>>& in) {
       return sq_sum(conv_axis(in[0], in[1], Axis::T, 1, 1));
     },
     {rand_uniform<double>(Shape{2, 3, 4, 4}, rng), rand_uniform<double>(Shape{2, 2, 3}, rng)}, t1);

  gc("sigmoid", [](const std::vector<TensorT<double>>& in) { return sum_all(sigmoid(in[0])); },
     {rand_uniform<double>(Shape{4, 5}, rng, -2, 2)}, t1);
  gc("tanh", [](const std::vector<TensorT<double>>& in) { return sum_all(tanh(in[0])); },
     {rand_uniform<double>(Shape{4, 5}, rng, -2, 2)}, t1);
  gc("relu", [](const std::vector<TensorT<double>>& in) { return sum_all(relu(in[0])); },
     {rand_uniform<double>(Shape{4, 5}, rng, 0.2, 2)}, t1);
  gc("abs", [](const std::vector<TensorT<double>>& in) { return sum_all(abs(in[0])); },
     {rand_uniform<double>(Shape{4, 5}, rng, 0.3, 2)}, t1);
  gc("sqrt", [](const std::vector<TensorT<double>>& in) { return sum_all(sqrt(in[0])); },
     {rand_uniform<double>(Shape{4, 5}, rng, 0.5, 2)}, t1);
  gc("mul",
     [](const std::vector<TensorT<double>>& in) { return sum_all(mul(in[0], in[1])); },
     {rand_uniform<double>(Shape{3, 4}, rng), rand_uniform<double>(Shape{3, 4}, rng)}, t1);
  gc("add_sub",
     [](const std::vector<TensorT<double>>& in) {
       return sum_all(mul(add(in[0], in[1]), sub(in[0], in[1])));
     },
     {rand_uniform<double>(Shape{3, 4}, rng), rand_uniform<double>(Shape{3, 4}, rng)}, t1);
  gc("matmul",
     [&sq_sum](const std::vector<TensorT<double>>& in) { return sq_sum(matmul(in[0], in[1])); },
     {rand_uniform<double>(Shape{3, 4}, rng), rand_uniform<double>(Shape{4, 2}, rng)}, t1);
  gc("softmax",
     [&sq_sum](const std::vector<TensorT<double>>& in) { return sq_sum(softmax(in[0], 1)); },
     {rand_uniform<double>(Shape{3, 5}, rng, -2, 2)}, t1);
  {
    TensorT<double> coords(Shape{2, 4, 4});
    for (int64_t i = 0; i < coords.size(); ++i) coords.data()[i] = rng.uniform(0.3, 4.5);
    gc("bilinear_sample",
       [&sq_sum](const std::vector<TensorT<double>>& in) {
         return sq_sum(bilinear_sample(in[0], in[1]));
       },
       {rand_uniform<double>(Shape{2, 6, 6}, rng), coords}, t1);
  }
  gc("avg_pool2",
     [&sq_sum](const std::vector<TensorT<double>>& in) { return sq_sum(avg_pool2(in[0])); },
     {rand_uniform<double>(Shape{2, 6, 6}, rng)}, t1);
  gc("bias_add",
     [&sq_sum](const std::vector<TensorT<double>>& in) { return sq_sum(bias_add(in[0], in[1])); },
     {rand_uniform<double>(Shape{3, 4}, rng), rand_uniform<double>(Shape{3}, rng)}, t1);
  gc("instance_norm",
     [&sq_sum](const std::vector<TensorT<double>>& in) { return sq_sum(instance_norm(in[0])); },
     {rand_uniform<double>(Shape{2, 4, 4}, rng)}, t1);
  gc("channel_norm",
     [](const std::vector<TensorT<double>>& in) { return sum_all(channel_norm(in[0])); },
     {rand_uniform<double>(Shape{3, 4, 4}, rng, 0.2, 1.0)}, t1);
  gc("upsample_bilinear",
     [&sq_sum](const std::vector<TensorT<double>>& in) {
       return sq_sum(upsample_bilinear(in[0], 2));
     },
     {rand_uniform<double>(Shape{2, 3, 3}, rng)}, t1);
  gc("shape_ops",
     [&sq_sum](const std::vector<TensorT<double>>& in) {
       auto p = permute(in[0], {1, 0, 2});
       auto r = reshape(p, Shape{4, 6});
       auto sl = slice(r, 0, 1, 2);
       return sq_sum(concat<double>({sl, sl}, 0));
     },
     {rand_uniform<double>(Shape{2, 4, 3}, rng)}, t1);

  gc("corr_all_pairs",
     [&sq_sum](const std::vector<TensorT<double>>& in) {
       return sq_sum(corr_all_pairs(in[0], in[1]));
     },
     {rand_uniform<double>(Shape{4, 3, 3}, rng), rand_uniform<double>(Shape{4, 3, 3}, rng)}, t1);
  {
    LookupSpec tiny{2, 1, false};
    TensorT<double> flow(Shape{2, 4, 4});
    for (int64_t i = 0; i < flow.size(); ++i) flow.data()[i] = rng.uniform(-0.8, 0.8);
    gc("lookup",
       [tiny, &sq_sum](const std::vector<TensorT<double>>& in) {
         return sq_sum(lookup(build_pyramid(in[0], tiny.levels), in[1], tiny));
       },
       {rand_uniform<double>(Shape{16, 4, 4}, rng), flow}, t1);
  }
  {
    ParamRegistryT<double> reg;
    Rng wr(1002);
    auto aw = make_attention(reg, "a", 4, 3, 4, wr);
    aw.alpha.data()[0] = 0.5;
    gc("attend",
       [aw, &sq_sum](const std::vector<TensorT<double>>& in) {
         return sq_sum(attend(in[0], in[1], aw));
       },
       {rand_uniform<double>(Shape{4, 2, 3}, rng), rand_uniform<double>(Shape{3, 2, 3}, rng),
        aw.wq, aw.wk, aw.wv, aw.alpha},
       t2);
  }
  {
    ParamRegistryT<double> reg;
    Rng wr(1003);
    auto gw = make_gru(reg, "g", 3, 4, wr);
    gc("gru_step",
       [gw, &sq_sum](const std::vector<TensorT<double>>& in) {
         auto [hn, tr] = gru_step(in[0], in[1], gw);
         return sq_sum(hn);
       },
       {rand_uniform<double>(Shape{3, 2, 4, 4}, rng, -0.7, 0.7),
        rand_uniform<double>(Shape{4, 2, 4, 4}, rng), gw.z.cx.w, gw.r.cy.w, gw.q.ct.w, gw.q.ct.b},
       t2);
  }
  {
    TensorT<double> f1(Shape{2, 5, 5}), f2(Shape{2, 5, 5});
    for (int64_t i = 0; i < f1.size(); ++i) {
      f1.data()[i] = rng.uniform(-0.9, 0.9);
      f2.data()[i] = rng.uniform(-0.9, 0.9);
    }
    gc("brightness_errors",
       [&sq_sum](const std::vector<TensorT<double>>& in) {
         FlowPairT<double> fp{in[3], in[4], FlowRes::Eighth};
         return sq_sum(brightness_errors(in[0], in[1], in[2], fp));
       },
       {rand_uniform<double>(Shape{2, 5, 5}, rng), rand_uniform<double>(Shape{2, 5, 5}, rng),
        rand_uniform<double>(Shape{2, 5, 5}, rng), f1, f2},
       t2);
  }
  {
    ParamRegistryT<double> reg;
    Rng wr(1004);
    auto sw = make_spt_block(reg, "s", SptKind::SThenT, 2, 3, 2, false, wr);
    gc("spt_block",
       [sw, &sq_sum](const std::vector<TensorT<double>>& in) {
         return sq_sum(spt_block(in[0], sw));
       },
       {rand_uniform<double>(Shape{2, 3, 4, 4}, rng), sw.tconv.w, sw.sconv.cx.w, sw.sconv.cy.w},
       t2);
  }
  {
    // composed update step on a 1x8x8 instance, deterministic stride probing
    ParamRegistryT<double> reg;
    Rng wr(1005);
    const int lm = 4, lc = 3, hidden = 4;
    auto menc = make_motion_encoder(reg, "m", 10, lm, false, wr);
    auto gruw = make_gru(reg, "g", hidden, lc + lm, wr);
    auto head = make_flow_head(reg, "h", hidden, wr);
    TensorT<double> f1(Shape{2, 8, 8}), f2(Shape{2, 8, 8});
    for (int64_t i = 0; i < f1.size(); ++i) {
      f1.data()[i] = rng.uniform(-0.9, 0.9);
      f2.data()[i] = rng.uniform(-0.9, 0.9);
    }
    gc("update_step",
       [menc, gruw, head](const std::vector<TensorT<double>>& in) {
         FlowPairT<double> fp{in[2], in[3], FlowRes::Eighth};
         auto m = motion_encode(in[0], fp, menc);
         auto x = concat<double>({in[1], m}, 0);
         auto [hn, tr] = gru_step(in[4], x, gruw);
         auto [d1, d2] = flow_head(hn, head);
         return sum_all(add(mul(d1, d1), mul(d2, d2)));
       },
       {rand_uniform<double>(Shape{10, 2, 8, 8}, rng), rand_uniform<double>(Shape{lc, 2, 8, 8}, rng),
        f1, f2, rand_uniform<double>(Shape{hidden, 2, 8, 8}, rng, -0.7, 0.7), menc.corr1.w,
        gruw.z.cx.w, head.l2.cx.w},
       t2, 300);
  }
  {
    TensorT<double> valid(Shape{1, 3, 3}, 1.0);
    auto gt1 = rand_uniform<double>(Shape{2, 3, 3}, rng);
    auto gt2 = rand_uniform<double>(Shape{2, 3, 3}, rng);
    gc("loss1",
       [gt1, gt2, valid](const std::vector<TensorT<double>>& in) {
         std::vector<FlowPairT<double>> preds{{in[0], in[1], FlowRes::Full}};
         return loss1<double>(preds, gt1, gt2, valid, valid, 0.8);
       },
       {rand_uniform<double>(Shape{2, 3, 3}, rng), rand_uniform<double>(Shape{2, 3, 3}, rng)}, t1);
  }
}

// ---------------------------------------------------------------------------
// oracle suite: >= 100 randomized cases per operator

void add_oracle(Suite& s) {
  auto repeat = [&](const std::string& name, int cases,
                    const std::function<Fail(Rng&, int)>& one) {
    s.run("oracle", name, [&]() -> Fail {
      Rng rng(2000 + std::hash<std::string>{}(name) % 1000);
      for (int i = 0; i < cases; ++i) {
        Fail f = one(rng, i);
        if (f) return std::string("case ") + std::to_string(i) + ": " + *f;
      }
      return std::nullopt;
    });
  };

  repeat("conv_axis", 120, [](Rng& rng, int) -> Fail {
    const int cin = rng.randint(1, 3), cout = rng.randint(1, 3);
    const int h = rng.randint(3, 7), w = rng.randint(3, 7), k = 1 + 2 * rng.randint(0, 1);
    const int stride = rng.randint(1, 2), pad = rng.randint(0, 1);
    if (k > std::min(h, w) + 2 * pad) return std::nullopt;
    const Axis axis = rng.uniform() < 0.5 ? Axis::X : Axis::Y;
    auto x = rand_uniform<float>(Shape{cin, h, w}, rng);
    auto kr = rand_uniform<float>(Shape{cout, cin, k}, rng);
    auto got = conv_axis(x, kr, axis, stride, pad);
    auto want = oracle_conv_axis(x, kr, axis, stride, pad);
    const double d = max_diff(got, want);
    return expect(d <= 1e-5, "diff " + fmt(d));
  });

  repeat("bilinear_sample", 120, [](Rng& rng, int) -> Fail {
    const int c = rng.randint(1, 3), h = rng.randint(2, 7), w = rng.randint(2, 7);
    auto map = rand_uniform<float>(Shape{c, h, w}, rng);
    Tensor coords(Shape{2, 3, 3});
    for (int64_t i = 0; i < 9; ++i) {
      coords.data()[i] = float(rng.uniform(-1.5, w + 0.5));
      coords.data()[9 + i] = float(rng.uniform(-1.5, h + 0.5));
    }
    auto got = bilinear_sample(map, coords);
    double worst = 0;
    for (int ci = 0; ci < c; ++ci)
      for (int64_t p = 0; p < 9; ++p)
        worst = std::max(worst, std::fabs(double(got.data()[ci * 9 + p]) -
                                          oracle_bilinear_at(map, ci, coords.data()[p],
                                                             coords.data()[9 + p])));
    return expect(worst <= 1e-5, "diff " + fmt(worst));
  });

  repeat("avg_pool2", 120, [](Rng& rng, int) -> Fail {
    const int c = rng.randint(1, 3), h = rng.randint(2, 8), w = rng.randint(2, 8);
    auto x = rand_uniform<float>(Shape{c, h, w}, rng);
    auto got = avg_pool2(x);
    const int oh = (h + 1) / 2, ow = (w + 1) / 2;
    double worst = 0;
    for (int ci = 0; ci < c; ++ci)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          const int y1 = std::min(2 * i + 1, h - 1), x1 = std::min(2 * j + 1, w - 1);
          const double want = 0.25 * (double(x.at(ci, 2 * i, 2 * j)) + x.at(ci, 2 * i, x1) +
                                      x.at(ci, y1, 2 * j) + x.at(ci, y1, x1));
          worst = std::max(worst, std::fabs(double(got.at(ci, i, j)) - want));
        }
    return expect(worst <= 1e-5, "diff " + fmt(worst));
  });

  repeat("corr_all_pairs", 100, [](Rng& rng, int) -> Fail {
    const int d = rng.randint(2, 8), h = rng.randint(2, 5), w = rng.randint(2, 5);
    auto a = rand_uniform<float>(Shape{d, h, w}, rng);
    auto b = rand_uniform<float>(Shape{d, h, w}, rng);
    auto got = corr_all_pairs(a, b);
    double worst = 0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int k = 0; k < h; ++k)
          for (int l = 0; l < w; ++l) {
            double acc = 0;
            for (int ci = 0; ci < d; ++ci) acc += double(a.at(ci, i, j)) * b.at(ci, k, l);
            worst = std::max(worst,
                             std::fabs(double(got.at(i * w + j, k, l)) - acc / std::sqrt(double(d))));
          }
    return expect(worst <= 1e-5, "diff " + fmt(worst));
  });

  repeat("lookup", 100, [](Rng& rng, int) -> Fail {
    const int levels = rng.randint(1, 2), radius = rng.randint(1, 2);
    const int h = rng.randint(2, 5) * 2, w = rng.randint(2, 5) * 2;
    LookupSpec spec{levels, radius, false};
    auto vol = rand_uniform<float>(Shape{h * w, h, w}, rng);
    auto pyr = build_pyramid(vol, levels);
    Tensor flow(Shape{2, h, w});
    for (int64_t i = 0; i < flow.size(); ++i) flow.data()[i] = float(rng.uniform(-2.5, 2.5));
    auto got = lookup(pyr, flow, spec);
    const int win = spec.window();
    double worst = 0;
    for (int l = 0; l < levels; ++l)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
          for (int dy = -radius; dy <= radius; ++dy)
            for (int dx = -radius; dx <= radius; ++dx) {
              Tensor plane(Shape{1, pyr.levels[size_t(l)].dim(1), pyr.levels[size_t(l)].dim(2)});
              const int lh = plane.dim(1), lw = plane.dim(2);
              for (int yy = 0; yy < lh; ++yy)
                for (int xx = 0; xx < lw; ++xx)
                  plane.at(0, yy, xx) = pyr.levels[size_t(l)].at(i * w + j, yy, xx);
              const double cx = (j + double(flow.at(0, i, j))) / double(1 << l) + dx;
              const double cy = (i + double(flow.at(1, i, j))) / double(1 << l) + dy;
              const double want = oracle_bilinear_at(plane, 0, cx, cy);
              const int ch = (l * win + dy + radius) * win + dx + radius;
              worst = std::max(worst, std::fabs(double(got.at(ch, i, j)) - want));
            }
    return expect(worst <= 1e-5, "diff " + fmt(worst));
  });

  repeat("attend", 100, [](Rng& rng, int i) -> Fail {
    ParamRegistryT<float> reg;
    Rng wr(uint64_t(4000 + i));
    const int lc = rng.randint(2, 4), lm = rng.randint(2, 4), dk = 2 * rng.randint(1, 3);
    const int h = rng.randint(2, 3), w = rng.randint(2, 3);
    auto aw = make_attention(reg, "a", lc, lm, dk, wr);
    aw.alpha.data()[0] = float(rng.uniform(-1, 1));
    auto ctx = rand_uniform<float>(Shape{lc, h, w}, rng);
    auto mot = rand_uniform<float>(Shape{lm, h, w}, rng);
    auto got = attend(ctx, mot, aw);
    // direct loop re-computation
    const int n = h * w;
    double worst = 0;
    std::vector<std::vector<double>> q(size_t(n), std::vector<double>(size_t(dk), 0.0));
    auto kv = q;
    std::vector<std::vector<double>> vv(size_t(n), std::vector<double>(size_t(lm), 0.0));
    for (int p = 0; p < n; ++p) {
      const int pi = p / w, pj = p % w;
      for (int dd = 0; dd < dk; ++dd)
        for (int cc = 0; cc < lc; ++cc) {
          q[size_t(p)][size_t(dd)] += double(ctx.at(cc, pi, pj)) * aw.wq.at(cc, dd);
          kv[size_t(p)][size_t(dd)] += double(ctx.at(cc, pi, pj)) * aw.wk.at(cc, dd);
        }
      for (int oo = 0; oo < lm; ++oo)
        for (int cc = 0; cc < lm; ++cc)
          vv[size_t(p)][size_t(oo)] += double(mot.at(cc, pi, pj)) * aw.wv.at(cc, oo);
    }
    for (int p = 0; p < n; ++p) {
      std::vector<double> sc;
      sc.resize(size_t(n));
      double mx = -1e300;
      for (int t = 0; t < n; ++t) {
        double dot = 0;
        for (int dd = 0; dd < dk; ++dd) dot += q[size_t(p)][size_t(dd)] * kv[size_t(t)][size_t(dd)];
        sc[size_t(t)] = dot / std::sqrt(double(dk));
        mx = std::max(mx, sc[size_t(t)]);
      }
      double z = 0;
      for (int t = 0; t < n; ++t) {
        sc[size_t(t)] = std::exp(sc[size_t(t)] - mx);
        z += sc[size_t(t)];
      }
      const int pi = p / w, pj = p % w;
      for (int oo = 0; oo < lm; ++oo) {
        double agg = 0;
        for (int t = 0; t < n; ++t) agg += sc[size_t(t)] / z * vv[size_t(t)][size_t(oo)];
        const double want = double(mot.at(oo, pi, pj)) + double(aw.alpha.item()) * agg;
        worst = std::max(worst, std::fabs(double(got.at(oo, pi, pj)) - want));
      }
    }
    return expect(worst <= 1e-5, "diff " + fmt(worst));
  });

  repeat("gru_step", 100, [](Rng& rng, int i) -> Fail {
    ParamRegistryT<float> reg;
    Rng wr(uint64_t(5000 + i));
    const int hid = rng.randint(2, 4), in_ch = rng.randint(2, 4);
    const int h = rng.randint(2, 4), w = rng.randint(2, 4);
    auto gw = make_gru(reg, "g", hid, in_ch, wr);
    auto hs = rand_uniform<float>(Shape{hid, 2, h, w}, rng, -0.8f, 0.8f);
    auto x = rand_uniform<float>(Shape{in_ch, 2, h, w}, rng);
    auto [got, tr] = gru_step(hs, x, gw);

    // independent recomputation with the naive conv oracle
    Tensor hx(Shape{hid + in_ch, 2, h, w});
    std::memcpy(hx.data(), hs.data(), sizeof(float) * size_t(hs.size()));
    std::memcpy(hx.data() + hs.size(), x.data(), sizeof(float) * size_t(x.size()));
    auto chain = [&](const Tensor& input, const GruChainW<float>& c) {
      auto y = oracle_conv_axis(input, c.cx.w, Axis::X, 1, 1);
      y = oracle_conv_axis(y, c.cy.w, Axis::Y, 1, 1);
      y = oracle_conv_axis(y, c.ct.w, Axis::T, 1, 1);
      for (int co = 0; co < y.dim(0); ++co)
        for (int64_t p = 0; p < y.size() / y.dim(0); ++p)
          y.data()[co * (y.size() / y.dim(0)) + p] += c.ct.b.at(co);
      return y;
    };
    auto zt = chain(hx, gw.z);
    auto rt = chain(hx, gw.r);
    auto qt = chain(x, gw.q);
    double worst = 0;
    for (int64_t p = 0; p < hs.size(); ++p) {
      const double z = 1.0 / (1.0 + std::exp(-double(zt.data()[p])));
      const double r = 1.0 / (1.0 + std::exp(-double(rt.data()[p])));
      const double cand = std::tanh(double(qt.data()[p]) + r * hs.data()[p]);
      const double want = z * hs.data()[p] + (1.0 - z) * cand;
      worst = std::max(worst, std::fabs(double(got.data()[p]) - want));
    }
    return expect(worst <= 1e-5, "diff " + fmt(worst));
  });
}

// ---------------------------------------------------------------------------
// structural suite

void add_structural(Suite& s) {
  s.run("structural", "params_independent_of_N", []() -> Fail {
    auto cfg = ModelConfig::tiny(Variant::SSTM);
    cfg.iters = 4;
    auto a = init_weights(cfg, 3);
    cfg.iters = 12;
    auto b = init_weights(cfg, 3);
    return expect(a.reg.total_params() == b.reg.total_params(),
                  "counts differ with N: " + std::to_string(a.reg.total_params()) + " vs " +
                      std::to_string(b.reg.total_params()));
  });

  s.run("structural", "corr_features_324", []() -> Fail {
    LookupSpec def;
    if (def.channels() != 324) return std::string("default profile is not 324 channels");
    LookupSpec bad{1, 8, true};
    try {
      bad.validate();
      return std::string("profile (1,8) accepted though it violates 324");
    } catch (const std::invalid_argument&) {
      return std::nullopt;
    }
  });

  s.run("structural", "context_shape_128x2", []() -> Fail {
    ParamRegistry reg;
    Rng rng(3001);
    auto w = make_context_encoder_3d(reg, "c", ContextWidths{6, 6, 8, 12}, rng);
    Rng drng(1);
    auto x = rand_uniform<float>(Shape{3, 3, 64, 96}, drng);
    auto ctx = context_encode_3d(x, w);
    return expect(ctx.shape() == Shape{12, 2, 8, 12},
                  "context shape " + shape_str(ctx.shape()));
  });

  s.run("structural", "fmap_shape_256", []() -> Fail {
    ParamRegistry reg;
    Rng rng(3002);
    auto w = make_feature_encoder(reg, "f", FeatureWidths{8, 8, 8, 16}, rng);
    Rng drng(2);
    auto img = rand_uniform<float>(Shape{3, 64, 96}, drng);
    auto fm = feature_encode(img, w);
    return expect(fm.shape() == Shape{16, 8, 12}, "fmap shape " + shape_str(fm.shape()));
  });

  s.run("structural", "residual_schedule", []() -> Fail {
    Rng rng(3003);
    auto h0 = rand_uniform<float>(Shape{2, 2, 3, 3}, rng);
    for (auto [N, r] : {std::pair{4, 2}, std::pair{12, 3}}) {
      std::vector<Tensor> g;
      for (int i = 0; i < N; ++i) g.push_back(rand_uniform<float>(Shape{2, 2, 3, 3}, rng));
      std::vector<Tensor> a{h0};
      for (int n = 1; n <= N; ++n)
        a.push_back(residual_hidden(n, r, g[size_t(n - 1)],
                                    a[size_t(n >= r ? n - r : 0)]));
      // hand unroll: additions exactly at multiples of r, anchored r back
      std::vector<Tensor> want{h0};
      for (int n = 1; n <= N; ++n) {
        Tensor v = g[size_t(n - 1)];
        if (n % r == 0 && n >= r) v = add(v, want[size_t(n - r)]);
        want.push_back(v);
      }
      for (int n = 0; n <= N; ++n)
        if (max_diff(a[size_t(n)], want[size_t(n)]) != 0.0)
          return std::string("schedule mismatch at n=") + std::to_string(n);
    }
    return std::nullopt;
  });

  s.run("structural", "registry_only_1d_kernels", []() -> Fail {
    auto cfg = ModelConfig::tiny(Variant::SSTMPP);
    auto w = init_weights(cfg, 5);
    return expect(audit_only_1d_kernels(w.reg), "dense kernel found in registry");
  });

  s.run("structural", "separable_equals_dense3d", []() -> Fail {
    Rng rng(3004);
    auto x = rand_uniform<double>(Shape{1, 3, 6, 6}, rng);
    std::vector<double> a(3), b(3), c(3);
    for (int i = 0; i < 3; ++i) {
      a[size_t(i)] = rng.uniform(-1, 1);
      b[size_t(i)] = rng.uniform(-1, 1);
      c[size_t(i)] = rng.uniform(-1, 1);
    }
    TensorT<double> ka(Shape{1, 1, 3}, a), kb(Shape{1, 1, 3}, b), kc(Shape{1, 1, 3}, c);
    auto sep = conv_axis(conv_axis(conv_axis(x, ka, Axis::X), kb, Axis::Y), kc, Axis::T);
    // dense accumulation
    double worst = 0;
    for (int t = 0; t < 3; ++t)
      for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j) {
          double acc = 0;
          for (int qt = 0; qt < 3; ++qt)
            for (int qy = 0; qy < 3; ++qy)
              for (int qx = 0; qx < 3; ++qx) {
                const int st = t + qt - 1, sy = i + qy - 1, sx = j + qx - 1;
                if (st < 0 || st >= 3 || sy < 0 || sy >= 6 || sx < 0 || sx >= 6) continue;
                acc += c[size_t(qt)] * b[size_t(qy)] * a[size_t(qx)] * x.at(0, st, sy, sx);
              }
          worst = std::max(worst, std::fabs(sep.at(0, t, i, j) - acc));
        }
    return expect(worst <= 1e-5, "diff " + fmt(worst));
  });

  s.run("structural", "memory_headroom_64x96", []() -> Fail {
    // full-width forward with tape; guarded by resident set in the
    // acceptance harness, here just shape/finiteness
    auto cfg = ModelConfig::defaults(Variant::SSTM);
    cfg.iters = 2;  // keep the selftest quick; acceptance runs N=12
    auto w = init_weights(cfg, 1);
    Rng rng(3005);
    std::array<Tensor, 3> frames{rand_uniform<float>(Shape{3, 64, 96}, rng, 0.0f, 1.0f),
                                 rand_uniform<float>(Shape{3, 64, 96}, rng, 0.0f, 1.0f),
                                 rand_uniform<float>(Shape{3, 64, 96}, rng, 0.0f, 1.0f)};
    auto out = forward(frames, w, cfg);
    return expect(out.flows.back().f1.shape() == Shape{2, 64, 96} &&
                      all_finite(out.flows.back().f1),
                  "unexpected output");
  });
}

// ---------------------------------------------------------------------------
// behavioral suite

void add_behavioral(Suite& s) {
  s.run("behavioral", "gru_state_bounds", []() -> Fail {
    ParamRegistryT<float> reg;
    Rng rng(4001);
    auto w = make_gru(reg, "g", 4, 6, rng);
    Rng drng(4002);
    auto h = tanh(rand_uniform<float>(Shape{4, 2, 6, 6}, drng, -2.0f, 2.0f));
    const int N = 8, r = 2;
    std::vector<Tensor> hist{h};
    for (int n = 1; n <= N; ++n) {
      auto x = rand_uniform<float>(Shape{6, 2, 6, 6}, drng);
      auto [hn, tr] = gru_step(h, x, w);
      for (int64_t i = 0; i < hn.size(); ++i)
        if (std::fabs(hn.data()[i]) >= 1.0f)
          return std::string("pre-residual state escaped (-1,1) at step ") + std::to_string(n);
      auto enriched = residual_hidden(n, r, hn, hist[size_t(n >= r ? n - r : 0)]);
      const float bound = 1.0f + float(N) / float(r);
      for (int64_t i = 0; i < enriched.size(); ++i)
        if (std::fabs(enriched.data()[i]) > bound)
          return std::string("enriched state exceeded 1 + N/r at step ") + std::to_string(n);
      hist.push_back(enriched);
      h = hn;
    }
    return std::nullopt;
  });

  s.run("behavioral", "attention_alpha0_passthrough", []() -> Fail {
    ParamRegistry reg;
    Rng rng(4003);
    auto w = make_attention(reg, "a", 6, 4, 8, rng);
    Rng drng(4004);
    auto ctx = rand_uniform<float>(Shape{6, 3, 3}, drng);
    auto mot = rand_uniform<float>(Shape{4, 3, 3}, drng);
    auto y = attend(ctx, mot, w);
    return expect(std::memcmp(y.data(), mot.data(), sizeof(float) * size_t(mot.size())) == 0,
                  "alpha=0 is not a bitwise pass-through");
  });

  s.run("behavioral", "attention_rows_normalized", []() -> Fail {
    ParamRegistryT<double> reg;
    Rng rng(4005);
    auto w = make_attention(reg, "a", 4, 3, 4, rng);
    w.alpha.data()[0] = 1.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) w.wv.at(i, j) = i == j ? 1.0 : 0.0;
    Rng drng(4006);
    auto ctx = rand_uniform<double>(Shape{4, 3, 4}, drng);
    TensorT<double> mot(Shape{3, 3, 4}, 0.5);
    auto y = attend(ctx, mot, w);
    for (int64_t i = 0; i < y.size(); ++i)
      if (std::fabs(y.data()[i] - 1.0) > 1e-6)
        return std::string("row sums deviate: ") + fmt(y.data()[i] - 1.0);
    return std::nullopt;
  });

  s.run("behavioral", "warp_zero_flow_identity", []() -> Fail {
    Rng rng(4007);
    auto map = rand_uniform<float>(Shape{3, 6, 7}, rng);
    auto grid = identity_grid<float>(6, 7);
    auto y = bilinear_sample(map, grid);
    return expect(std::memcmp(y.data(), map.data(), sizeof(float) * size_t(map.size())) == 0,
                  "identity warp is not bitwise exact");
  });

  s.run("behavioral", "errors_zero_on_aligned", []() -> Fail {
    Rng rng(4008);
    auto fm = rand_uniform<float>(Shape{4, 6, 6}, rng);
    FlowPair flows{Tensor(Shape{2, 6, 6}, 0.0f), Tensor(Shape{2, 6, 6}, 0.0f), FlowRes::Eighth};
    auto e = brightness_errors(fm, fm, fm, flows);
    for (int64_t i = 0; i < e.size(); ++i)
      if (e.data()[i] != 0.0f) return std::string("nonzero error on perfectly aligned maps");
    return std::nullopt;
  });

  s.run("behavioral", "softmax_normalized_positive", []() -> Fail {
    Rng rng(4009);
    auto x = rand_uniform<float>(Shape{6, 9}, rng, -8.0f, 8.0f);
    auto y = softmax(x, 1);
    for (int i = 0; i < 6; ++i) {
      double acc = 0;
      for (int j = 0; j < 9; ++j) {
        if (y.at(i, j) <= 0.0f) return std::string("softmax output not strictly positive");
        acc += y.at(i, j);
      }
      if (std::fabs(acc - 1.0) > 1e-6) return std::string("softmax slice sum " + fmt(acc));
    }
    return std::nullopt;
  });

  s.run("behavioral", "loss_zero_on_perfect_and_gamma_weighting", []() -> Fail {
    TensorT<double> gt1(Shape{2, 1, 1}, std::vector<double>{1.0, 2.0});
    TensorT<double> gt2(Shape{2, 1, 1}, std::vector<double>{0.0, 0.0});
    TensorT<double> valid(Shape{1, 1, 1}, 1.0);
    std::vector<FlowPairT<double>> perfect{{gt1, gt2, FlowRes::Full},
                                           {gt1, gt2, FlowRes::Full}};
    if (std::fabs(loss1<double>(perfect, gt1, gt2, valid, valid, 0.8).item()) > 1e-12)
      return std::string("loss1 nonzero on perfect predictions");
    TensorT<double> p1(Shape{2, 1, 1}, std::vector<double>{0.0, 0.0});
    TensorT<double> p2(Shape{2, 1, 1}, std::vector<double>{1.0, 1.0});
    TensorT<double> q1(Shape{2, 1, 1}, std::vector<double>{1.0, 1.0});
    TensorT<double> q2(Shape{2, 1, 1}, std::vector<double>{0.0, -1.0});
    std::vector<FlowPairT<double>> two{{p1, p2, FlowRes::Full}, {q1, q2, FlowRes::Full}};
    const double got = loss1<double>(two, gt1, gt2, valid, valid, 0.8).item();
    if (std::fabs(got - 3.0) > 1e-7) return std::string("gamma-weighted hand value: ") + fmt(got);
    if (std::fabs(loss2<double>(two, gt2, valid, 0.8).item() -
                  (0.8 * 2.0 + 1.0 * 1.0)) > 1e-9)
      return std::string("loss2 hand value mismatch");
    return std::nullopt;
  });

  s.run("behavioral", "forward_deterministic", []() -> Fail {
    auto cfg = ModelConfig::tiny(Variant::SSTM);
    cfg.iters = 2;
    cfg.feat_ch = 16;
    cfg.ctx_ch = 8;
    cfg.hidden_ch = 8;
    cfg.motion_ch = 8;
    cfg.dk = 8;
    auto w = init_weights(cfg, 6);
    SceneSpec spec;
    auto sample = generate(spec);
    auto a = forward(sample.frames, w, cfg);
    auto b = forward(sample.frames, w, cfg);
    const auto& fa = a.flows.back().f1;
    const auto& fb = b.flows.back().f1;
    return expect(std::memcmp(fa.data(), fb.data(), sizeof(float) * size_t(fa.size())) == 0,
                  "forward is not bitwise reproducible");
  });
}

// ---------------------------------------------------------------------------
// io suite

void add_io(Suite& s) {
  namespace fs = std::filesystem;
  const auto tmp = fs::temp_directory_path();

  s.run("io", "flo_roundtrip_bitwise", [&]() -> Fail {
    const auto path = (tmp / "sstm_selftest_rt.flo").string();
    Rng rng(5001);
    FlowFile f;
    f.w = 10;
    f.h = 6;
    f.flow = rand_uniform<float>(Shape{2, 6, 10}, rng, -600.0f, 600.0f);
    write_flo(path, f);
    auto back = read_flo(path);
    const bool ok =
        std::memcmp(back.flow.data(), f.flow.data(), sizeof(float) * size_t(f.flow.size())) == 0;
    fs::remove(path);
    return expect(ok, "values changed across the round trip");
  });

  s.run("io", "flo_rejects_corruption", [&]() -> Fail {
    const auto path = (tmp / "sstm_selftest_bad.flo").string();
    std::vector<uint8_t> junk(12 + 10, 0);
    const float magic = 202021.25f;
    const int32_t w = 3, h = 2;
    std::memcpy(junk.data(), &magic, 4);
    std::memcpy(junk.data() + 4, &w, 4);
    std::memcpy(junk.data() + 8, &h, 4);
    {
      std::ofstream os(path, std::ios::binary);
      os.write(reinterpret_cast<const char*>(junk.data()), std::streamsize(junk.size()));
    }
    bool threw = false;
    try {
      read_flo(path);
    } catch (const std::exception&) {
      threw = true;
    }
    fs::remove(path);
    return expect(threw, "truncated file accepted");
  });

  s.run("io", "kitti_roundtrip_quantized", [&]() -> Fail {
    const auto path = (tmp / "sstm_selftest_k.png").string();
    Rng rng(5002);
    FlowFile f;
    f.w = 9;
    f.h = 5;
    f.flow = rand_uniform<float>(Shape{2, 5, 9}, rng, -500.0f, 500.0f);
    f.valid.resize(45);
    for (auto& v : f.valid) v = rng.uniform() < 0.8 ? 1 : 0;
    write_kitti_png(path, f);
    auto back = read_kitti_png(path);
    fs::remove(path);
    if (back.valid != f.valid) return std::string("valid plane not preserved");
    for (int64_t i = 0; i < f.flow.size(); ++i)
      if (std::fabs(back.flow.data()[i] - f.flow.data()[i]) > 1.0f / 128.0f)
        return std::string("quantization error above 1/128 px");
    FlowFile big = f;
    big.flow.at(0, 0, 0) = 513.0f;
    try {
      write_kitti_png(path, big);
      fs::remove(path);
      return std::string("out-of-range value silently written");
    } catch (const std::invalid_argument&) {
      return std::nullopt;
    }
  });

  s.run("io", "checkpoint_roundtrip_and_crc", [&]() -> Fail {
    const auto p1 = (tmp / "sstm_selftest_a.ckpt").string();
    const auto p2 = (tmp / "sstm_selftest_b.ckpt").string();
    auto cfg = ModelConfig::tiny(Variant::SSTM);
    cfg.feat_ch = 16;
    cfg.ctx_ch = 8;
    cfg.hidden_ch = 8;
    cfg.motion_ch = 8;
    cfg.dk = 8;
    auto w = init_weights(cfg, 12);
    save_checkpoint(w, cfg, p1);
    auto [w2, cfg2] = load_checkpoint(p1);
    save_checkpoint(w2, cfg2, p2);
    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    std::vector<uint8_t> ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::vector<uint8_t> bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    if (ba != bb) {
      fs::remove(p1);
      fs::remove(p2);
      return std::string("save-load-save bytes differ");
    }
    ba[ba.size() / 2] ^= 0x04;
    {
      std::ofstream os(p2, std::ios::binary | std::ios::trunc);
      os.write(reinterpret_cast<const char*>(ba.data()), std::streamsize(ba.size()));
    }
    bool threw = false;
    try {
      load_checkpoint(p2);
    } catch (const std::exception&) {
      threw = true;
    }
    fs::remove(p1);
    fs::remove(p2);
    return expect(threw, "single-bit corruption not detected");
  });

  s.run("io", "metric_partition_identity", []() -> Fail {
    Rng rng(5003);
    const int h = 12, w = 12;
    auto gt = rand_uniform<float>(Shape{2, h, w}, rng, -8.0f, 8.0f);
    auto pred = add(gt, rand_uniform<float>(Shape{2, h, w}, rng, -2.0f, 2.0f));
    auto speeds = speed_map(gt);
    const float inf = std::numeric_limits<float>::infinity();
    double weighted = 0;
    int64_t total = 0;
    for (auto band : {std::pair{0.0f, 4.0f}, std::pair{4.0f, 8.0f}, std::pair{8.0f, inf}}) {
      RegionSpec spec{RegionSpec::Kind::Speed, band.first, band.second};
      try {
        auto r = banded_epe(pred, gt, spec, speeds);
        weighted += r.epe * double(r.count);
        total += r.count;
      } catch (const std::invalid_argument&) {
      }
    }
    if (total != h * w) return std::string("band cover misses pixels");
    const double glob = epe(pred, gt);
    return expect(std::fabs(weighted / double(total) - glob) <= 1e-6,
                  "partition identity violated by " + fmt(weighted / double(total) - glob));
  });

  s.run("io", "color_zero_flow_white", []() -> Fail {
    Tensor zero(Shape{2, 3, 3}, 0.0f);
    auto img = flow_to_color(zero, 1.0f);
    for (uint16_t v : img.px)
      if (v != 255) return std::string("zero flow did not render white");
    return std::nullopt;
  });
}

}  // namespace

bool all_passed(const std::vector<CheckResult>& rs) {
  for (const auto& r : rs)
    if (!r.pass) return false;
  return true;
}

std::vector<CheckResult> run_selftest(const std::string& suite, double tol_override) {
  Suite s;
  const double tol_scale = tol_override > 0.0 ? tol_override / 1e-4 : 1.0;
  const bool all = suite == "all";
  const bool invariants = suite == "invariants";
  if (all || suite == "gradcheck") add_gradcheck(s, tol_scale);
  if (all || suite == "oracle") add_oracle(s);
  if (all || invariants || suite == "structural") add_structural(s);
  if (all || invariants || suite == "behavioral") add_behavioral(s);
  if (all || invariants || suite == "io") add_io(s);
  if (s.results.empty()) throw std::invalid_argument("selftest: unknown suite '" + suite + "'");
  return s.results;
}

}  // namespace sstm
