#include "doctest.h"

#include <cmath>
#include <limits>
#include <queue>

#include "sstm/gradcheck.hpp"
#include "sstm/loss.hpp"
#include "sstm/metrics.hpp"

using namespace sstm;

namespace {

const float kInf = std::numeric_limits<float>::infinity();

template <typename S>
FlowPairT<S> make_pair(const TensorT<S>& f1, const TensorT<S>& f2) {
  return {f1, f2, FlowRes::Full};
}

// Exact 3-4 weighted distance by Dijkstra on the 8-neighbor graph.
std::vector<float> dijkstra_chamfer(const std::vector<uint8_t>& occ, int h, int w) {
  const float inf = std::numeric_limits<float>::infinity();
  std::vector<float> d(size_t(h) * w, inf);
  using Node = std::pair<float, int>;
  std::priority_queue<Node, std::vector<Node>, std::greater<>> q;
  for (int i = 0; i < h * w; ++i)
    if (occ[size_t(i)]) {
      d[size_t(i)] = 0;
      q.push({0.0f, i});
    }
  const int di[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
  const int dj[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
  while (!q.empty()) {
    auto [dist, p] = q.top();
    q.pop();
    if (dist > d[size_t(p)]) continue;
    const int i = p / w, j = p % w;
    for (int k = 0; k < 8; ++k) {
      const int ni = i + di[k], nj = j + dj[k];
      if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
      const float cost = (di[k] != 0 && dj[k] != 0) ? 4.0f : 3.0f;
      if (dist + cost < d[size_t(ni) * w + nj]) {
        d[size_t(ni) * w + nj] = dist + cost;
        q.push({dist + cost, ni * w + nj});
      }
    }
  }
  for (auto& v : d)
    if (std::isfinite(v)) v /= 3.0f;
  return d;
}

}  // namespace

TEST_CASE("loss1: zero on perfect, N=1 reduction, hand-computed toy value") {
  TensorT<double> gt1(Shape{2, 1, 1}, std::vector<double>{1.0, 2.0});
  TensorT<double> gt2(Shape{2, 1, 1}, std::vector<double>{0.0, 0.0});
  TensorT<double> valid(Shape{1, 1, 1}, 1.0);

  std::vector<FlowPairT<double>> perfect{make_pair(gt1, gt2), make_pair(gt1, gt2)};
  CHECK(loss1<double>(perfect, gt1, gt2, valid, valid, 0.8).item() == doctest::Approx(0.0));

  // N = 1: plain mean-L1 pair average
  TensorT<double> p1(Shape{2, 1, 1}, std::vector<double>{0.0, 0.0});
  TensorT<double> p2(Shape{2, 1, 1}, std::vector<double>{1.0, 1.0});
  std::vector<FlowPairT<double>> one{make_pair(p1, p2)};
  // |1|+|2| = 3 for stream 1; |1|+|1| = 2 for stream 2; (3+2)/2 = 2.5
  CHECK(loss1<double>(one, gt1, gt2, valid, valid, 0.8).item() == doctest::Approx(2.5));

  // N = 2, gamma = 0.8: 0.8*2.5 + 1.0*((0+1)+(0+1))/2 = 3.0
  TensorT<double> q1(Shape{2, 1, 1}, std::vector<double>{1.0, 1.0});
  TensorT<double> q2(Shape{2, 1, 1}, std::vector<double>{0.0, -1.0});
  std::vector<FlowPairT<double>> two{make_pair(p1, p2), make_pair(q1, q2)};
  CHECK(loss1<double>(two, gt1, gt2, valid, valid, 0.8).item() == doctest::Approx(3.0).epsilon(1e-7));

  TensorT<double> undefined;
  CHECK_THROWS(loss1<double>(two, undefined, gt2, valid, valid, 0.8));
}

TEST_CASE("loss2: ignores the first stream; algebraic relation to loss1") {
  Rng rng(501);
  const int h = 4, w = 5;
  auto gt1 = rand_uniform<double>(Shape{2, h, w}, rng);
  auto gt2 = rand_uniform<double>(Shape{2, h, w}, rng);
  TensorT<double> valid(Shape{1, h, w}, 1.0);

  std::vector<FlowPairT<double>> preds;
  for (int i = 0; i < 3; ++i)
    preds.push_back(make_pair(rand_uniform<double>(Shape{2, h, w}, rng),
                              rand_uniform<double>(Shape{2, h, w}, rng)));

  // perfect f2 stream, garbage f1 stream -> 0
  std::vector<FlowPairT<double>> perfect2;
  for (int i = 0; i < 3; ++i)
    perfect2.push_back(make_pair(rand_uniform<double>(Shape{2, h, w}, rng), gt2));
  CHECK(loss2<double>(perfect2, gt2, valid, 0.8).item() == doctest::Approx(0.0));

  // loss1 = (loss2 on the f1 stream + loss2 on the f2 stream) / 2
  std::vector<FlowPairT<double>> stream1, stream2;
  for (const auto& p : preds) {
    stream1.push_back(make_pair(p.f2, p.f1));  // f1 placed in the f2 slot
    stream2.push_back(p);
  }
  const double l1 = loss1<double>(preds, gt1, gt2, valid, valid, 0.8).item();
  const double l2a = loss2<double>(stream1, gt1, valid, 0.8).item();
  const double l2b = loss2<double>(stream2, gt2, valid, 0.8).item();
  CHECK(l1 == doctest::Approx((l2a + l2b) / 2.0).epsilon(1e-12));
}

TEST_CASE("loss1: gamma-monotonicity and differentiability") {
  Rng rng(503);
  const int h = 3, w = 3;
  auto gt1 = rand_uniform<double>(Shape{2, h, w}, rng);
  auto gt2 = rand_uniform<double>(Shape{2, h, w}, rng);
  TensorT<double> valid(Shape{1, h, w}, 1.0);
  std::vector<FlowPairT<double>> preds;
  for (int i = 0; i < 3; ++i)
    preds.push_back(make_pair(rand_uniform<double>(Shape{2, h, w}, rng),
                              rand_uniform<double>(Shape{2, h, w}, rng)));
  const double base = loss1<double>(preds, gt1, gt2, valid, valid, 0.8).item();
  // push one intermediate prediction further from the truth
  auto worse = preds;
  worse[1].f1 = add(worse[1].f1, mul(sub(worse[1].f1, gt1), 0.5));
  const double worse_val = loss1<double>(worse, gt1, gt2, valid, valid, 0.8).item();
  CHECK(worse_val >= base);

  auto rep = grad_check(
      [&](const std::vector<TensorT<double>>& in) {
        std::vector<FlowPairT<double>> ps{make_pair(in[0], in[1])};
        return loss1<double>(ps, gt1, gt2, valid, valid, 0.8);
      },
      {rand_uniform<double>(Shape{2, h, w}, rng), rand_uniform<double>(Shape{2, h, w}, rng)},
      1e-5, 1e-4);
  INFO(rep.summary());
  CHECK(rep.pass);
}

TEST_CASE("epe: zero, 3-4-5, loop oracle") {
  Rng rng(505);
  auto gt = rand_uniform<float>(Shape{2, 5, 6}, rng);
  CHECK(epe(gt, gt) == doctest::Approx(0.0));

  Tensor pred = gt.clone();
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) {
      pred.at(0, i, j) += 3.0f;
      pred.at(1, i, j) += 4.0f;
    }
  CHECK(epe(pred, gt) == doctest::Approx(5.0).epsilon(1e-6));

  auto pr = rand_uniform<float>(Shape{2, 5, 6}, rng);
  double want = 0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 6; ++j) {
      const double du = pr.at(0, i, j) - gt.at(0, i, j);
      const double dv = pr.at(1, i, j) - gt.at(1, i, j);
      want += std::sqrt(du * du + dv * dv);
    }
  want /= 30.0;
  CHECK(epe(pr, gt) == doctest::Approx(want).epsilon(1e-6));

  std::vector<uint8_t> empty_mask(30, 0);
  CHECK_THROWS(epe(pr, gt, empty_mask));
}

TEST_CASE("fl_rate: 5% rule dominates large magnitudes; crafted 30% field") {
  // gt magnitude 100, error 4 px: 4 >= 3 but 4 < 5 -> not an outlier
  Tensor gt(Shape{2, 1, 1}, std::vector<float>{100.0f, 0.0f});
  Tensor pred(Shape{2, 1, 1}, std::vector<float>{104.0f, 0.0f});
  CHECK(fl_rate(pred, gt) == doctest::Approx(0.0));
  CHECK(fl_rate(gt, gt) == doctest::Approx(0.0));

  // 10 pixels, exactly 3 outliers
  Tensor g10(Shape{2, 2, 5}, 0.0f);
  Tensor p10 = g10.clone();
  p10.at(0, 0, 0) = 4.0f;   // epe 4 >= 3, gt mag 0 -> outlier
  p10.at(1, 0, 2) = -3.5f;  // outlier
  p10.at(0, 1, 1) = 2.0f;   // epe 2 < 3 -> inlier
  p10.at(0, 1, 4) = 8.0f;   // outlier
  CHECK(fl_rate(p10, g10) == doctest::Approx(30.0));

  // invariant under pixel permutation (reverse both fields identically)
  Tensor gr(g10.shape()), pr(p10.shape());
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 10; ++p) {
      gr.data()[c * 10 + p] = g10.data()[c * 10 + 9 - p];
      pr.data()[c * 10 + p] = p10.data()[c * 10 + 9 - p];
    }
  CHECK(fl_rate(pr, gr) == doctest::Approx(fl_rate(p10, g10)));
}

TEST_CASE("occlusion_distance: matches the exact Dijkstra oracle") {
  const int h = 11, w = 13;
  std::vector<uint8_t> occ(size_t(h) * w, 0);
  occ[size_t(5) * w + 6] = 1;  // single pixel
  auto got = occlusion_distance(occ, h, w);
  auto want = dijkstra_chamfer(occ, h, w);
  for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]));
  CHECK(got[size_t(5) * w + 6] == 0.0f);

  // a few random masks
  Rng rng(507);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<uint8_t> m(size_t(h) * w, 0);
    for (auto& v : m) v = rng.uniform() < 0.15 ? 1 : 0;
    if (std::count(m.begin(), m.end(), 1) == 0) m[0] = 1;
    auto g2 = occlusion_distance(m, h, w);
    auto w2 = dijkstra_chamfer(m, h, w);
    for (size_t i = 0; i < g2.size(); ++i) CHECK(g2[i] == doctest::Approx(w2[i]));
  }

  // fully occluded -> all zeros; empty -> all infinite
  std::vector<uint8_t> full(size_t(h) * w, 1);
  for (float v : occlusion_distance(full, h, w)) CHECK(v == 0.0f);
  std::vector<uint8_t> none(size_t(h) * w, 0);
  for (float v : occlusion_distance(none, h, w)) CHECK(std::isinf(v));
}

TEST_CASE("banded_epe: exhaustive band equals global; partition reconciles") {
  Rng rng(509);
  const int h = 8, w = 8;
  auto gt = rand_uniform<float>(Shape{2, h, w}, rng, -6.0f, 6.0f);
  auto pred = add(gt, rand_uniform<float>(Shape{2, h, w}, rng, -2.0f, 2.0f));
  auto speeds = speed_map(gt);

  RegionSpec all{RegionSpec::Kind::Speed, 0.0f, kInf};
  auto res = banded_epe(pred, gt, all, speeds);
  CHECK(res.epe == doctest::Approx(epe(pred, gt)).epsilon(1e-9));
  CHECK(res.count == h * w);

  RegionSpec b1{RegionSpec::Kind::Speed, 0.0f, 3.0f};
  RegionSpec b2{RegionSpec::Kind::Speed, 3.0f, 6.0f};
  RegionSpec b3{RegionSpec::Kind::Speed, 6.0f, kInf};
  double weighted = 0;
  int64_t total = 0;
  for (const auto& spec : {b1, b2, b3}) {
    auto r = banded_epe(pred, gt, spec, speeds);
    weighted += r.epe * double(r.count);
    total += r.count;
  }
  CHECK(total == h * w);
  CHECK(weighted / double(total) == doctest::Approx(epe(pred, gt)).epsilon(1e-6));

  RegionSpec empty{RegionSpec::Kind::Speed, 1000.0f, 2000.0f};
  CHECK_THROWS(banded_epe(pred, gt, empty, speeds));
  CHECK(b3.label() == "s6+");
  CHECK(b1.label() == "s0-3");
}

TEST_CASE("banded_epe: occlusion-distance band on a synthetic two-layer scene") {
  const int h = 16, w = 16;
  std::vector<uint8_t> occ(size_t(h) * w, 0);
  for (int i = 4; i < 8; ++i)
    for (int j = 10; j < 12; ++j) occ[size_t(i) * w + j] = 1;
  auto dist = occlusion_distance(occ, h, w);

  Rng rng(511);
  auto gt = rand_uniform<float>(Shape{2, h, w}, rng);
  auto pred = add(gt, rand_uniform<float>(Shape{2, h, w}, rng, -1.0f, 1.0f));
  RegionSpec d010{RegionSpec::Kind::OccDistance, 0.0f, 10.0f};
  auto got = banded_epe(pred, gt, d010, dist);

  // per-pixel filter oracle
  double acc = 0;
  int64_t count = 0;
  for (int64_t p = 0; p < h * w; ++p) {
    if (!(dist[size_t(p)] >= 0.0f && dist[size_t(p)] < 10.0f)) continue;
    const double du = pred.data()[p] - gt.data()[p];
    const double dv = pred.data()[h * w + p] - gt.data()[h * w + p];
    acc += std::sqrt(du * du + dv * dv);
    ++count;
  }
  CHECK(got.count == count);
  CHECK(got.epe == doctest::Approx(acc / double(count)).epsilon(1e-9));
}
