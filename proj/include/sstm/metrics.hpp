#pragma once

// Evaluation metrics: endpoint error, outlier rate, distance-to-occlusion
// and speed band restrictions.

#include <cstdint>
#include <string>
#include <vector>

#include "sstm/tensor.hpp"

namespace sstm {

// Ground truth for one three-frame sample. Masks live at flow resolution;
// occlusion/out-of-boundary refer to the frames 2->3 window.
struct GtSample {
  Tensor gt_f1;    // (2,H,W); may be undefined (loss2-only data)
  Tensor gt_f2;    // (2,H,W)
  Tensor valid1;   // (1,H,W) 0/1
  Tensor valid2;   // (1,H,W) 0/1
  std::vector<uint8_t> occ_mask;  // H*W, 1 = occluded
  std::vector<uint8_t> oob_mask;  // H*W, 1 = target leaves the frame
  int h = 0, w = 0;
};

// Mean endpoint error over masked pixels; empty mask vector means all pixels.
double epe(const Tensor& pred, const Tensor& gt, const std::vector<uint8_t>& mask = {});

// Percentage of masked pixels with per-pixel EPE >= 3 px AND >= 5% of |gt|.
double fl_rate(const Tensor& pred, const Tensor& gt, const std::vector<uint8_t>& mask = {});

// Chamfer 3-4 distance (in pixels, i.e. divided by 3) to the nearest
// occluded pixel; 0 inside occlusions, +inf when the mask is empty.
std::vector<float> occlusion_distance(const std::vector<uint8_t>& occ, int h, int w);

// Per-pixel ground-truth speed |gt|.
std::vector<float> speed_map(const Tensor& gt);

struct RegionSpec {
  enum class Kind { OccDistance, Speed };
  Kind kind = Kind::OccDistance;
  float lo = 0.0f;
  float hi = 0.0f;  // may be +inf

  std::string label() const;
};

struct BandResult {
  double epe = 0.0;
  int64_t count = 0;
};

// EPE restricted to pixels whose aux value lies in [lo, hi). Throws on an
// empty band.
BandResult banded_epe(const Tensor& pred, const Tensor& gt, const RegionSpec& spec,
                      const std::vector<float>& aux, const std::vector<uint8_t>& mask = {});

}  // namespace sstm
