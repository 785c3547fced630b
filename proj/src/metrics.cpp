#include "sstm/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace sstm {

namespace {

void check_flow_pair(const Tensor& pred, const Tensor& gt, const std::vector<uint8_t>& mask) {
  if (pred.rank() != 3 || pred.dim(0) != 2 || pred.shape() != gt.shape())
    throw std::invalid_argument("metrics: flows must be matching (2,H,W)");
  const size_t npix = size_t(pred.dim(1)) * size_t(pred.dim(2));
  if (!mask.empty() && mask.size() != npix)
    throw std::invalid_argument("metrics: mask size mismatch");
}

}  // namespace

double epe(const Tensor& pred, const Tensor& gt, const std::vector<uint8_t>& mask) {
  check_flow_pair(pred, gt, mask);
  const int64_t npix = int64_t(pred.dim(1)) * pred.dim(2);
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t p = 0; p < npix; ++p) {
    if (!mask.empty() && !mask[size_t(p)]) continue;
    const double du = double(pred.data()[p]) - gt.data()[p];
    const double dv = double(pred.data()[npix + p]) - gt.data()[npix + p];
    acc += std::sqrt(du * du + dv * dv);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("epe: empty mask");
  return acc / double(count);
}

double fl_rate(const Tensor& pred, const Tensor& gt, const std::vector<uint8_t>& mask) {
  check_flow_pair(pred, gt, mask);
  const int64_t npix = int64_t(pred.dim(1)) * pred.dim(2);
  int64_t outliers = 0, count = 0;
  for (int64_t p = 0; p < npix; ++p) {
    if (!mask.empty() && !mask[size_t(p)]) continue;
    const double du = double(pred.data()[p]) - gt.data()[p];
    const double dv = double(pred.data()[npix + p]) - gt.data()[npix + p];
    const double e = std::sqrt(du * du + dv * dv);
    const double mag = std::sqrt(double(gt.data()[p]) * gt.data()[p] +
                                 double(gt.data()[npix + p]) * gt.data()[npix + p]);
    if (e >= 3.0 && e >= 0.05 * mag) ++outliers;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("fl_rate: empty mask");
  return 100.0 * double(outliers) / double(count);
}

std::vector<float> occlusion_distance(const std::vector<uint8_t>& occ, int h, int w) {
  if (int(occ.size()) != h * w) throw std::invalid_argument("occlusion_distance: mask size mismatch");
  const float inf = std::numeric_limits<float>::infinity();
  std::vector<float> d(size_t(h) * w);
  for (size_t i = 0; i < d.size(); ++i) d[i] = occ[i] ? 0.0f : inf;

  auto at = [&](int i, int j) -> float& { return d[size_t(i) * w + j]; };
  // forward pass
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      float v = at(i, j);
      if (j > 0) v = std::min(v, at(i, j - 1) + 3.0f);
      if (i > 0) {
        v = std::min(v, at(i - 1, j) + 3.0f);
        if (j > 0) v = std::min(v, at(i - 1, j - 1) + 4.0f);
        if (j < w - 1) v = std::min(v, at(i - 1, j + 1) + 4.0f);
      }
      at(i, j) = v;
    }
  // backward pass
  for (int i = h - 1; i >= 0; --i)
    for (int j = w - 1; j >= 0; --j) {
      float v = at(i, j);
      if (j < w - 1) v = std::min(v, at(i, j + 1) + 3.0f);
      if (i < h - 1) {
        v = std::min(v, at(i + 1, j) + 3.0f);
        if (j < w - 1) v = std::min(v, at(i + 1, j + 1) + 4.0f);
        if (j > 0) v = std::min(v, at(i + 1, j - 1) + 4.0f);
      }
      at(i, j) = v;
    }
  for (auto& v : d)
    if (std::isfinite(v)) v /= 3.0f;
  return d;
}

std::vector<float> speed_map(const Tensor& gt) {
  if (gt.rank() != 3 || gt.dim(0) != 2) throw std::invalid_argument("speed_map: flow must be (2,H,W)");
  const int64_t npix = int64_t(gt.dim(1)) * gt.dim(2);
  std::vector<float> s;
  s.resize(size_t(npix));
  for (int64_t p = 0; p < npix; ++p)
    s[size_t(p)] = std::sqrt(gt.data()[p] * gt.data()[p] +
                             gt.data()[npix + p] * gt.data()[npix + p]);
  return s;
}

std::string RegionSpec::label() const {
  const char* k = kind == Kind::OccDistance ? "d" : "s";
  const bool open = !std::isfinite(hi);
  char buf[64];
  if (open)
    std::snprintf(buf, sizeof(buf), "%s%g+", k, double(lo));
  else
    std::snprintf(buf, sizeof(buf), "%s%g-%g", k, double(lo), double(hi));
  return buf;
}

BandResult banded_epe(const Tensor& pred, const Tensor& gt, const RegionSpec& spec,
                      const std::vector<float>& aux, const std::vector<uint8_t>& mask) {
  check_flow_pair(pred, gt, mask);
  if (!(spec.lo < spec.hi)) throw std::invalid_argument("banded_epe: band requires lo < hi");
  const int64_t npix = int64_t(pred.dim(1)) * pred.dim(2);
  if (int64_t(aux.size()) != npix) throw std::invalid_argument("banded_epe: aux size mismatch");
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t p = 0; p < npix; ++p) {
    if (!mask.empty() && !mask[size_t(p)]) continue;
    const float a = aux[size_t(p)];
    if (!(a >= spec.lo && a < spec.hi)) continue;
    const double du = double(pred.data()[p]) - gt.data()[p];
    const double dv = double(pred.data()[npix + p]) - gt.data()[npix + p];
    acc += std::sqrt(du * du + dv * dv);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("banded_epe: empty band " + spec.label());
  return {acc / double(count), count};
}

}  // namespace sstm
