#pragma once

// Synthetic three-frame scenes with analytic ground truth: a textured
// foreground (rectangle or disc) moving over a translating textured
// background. Flows, occlusion and out-of-boundary masks are computed from
// the motion model, not estimated.

#include <array>
#include <cstdint>

#include "sstm/metrics.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

enum class FgShape { Rect, Disc };

// Per-step motion, applied in frame coordinates: p -> A p + t.
struct StepMotion {
  float tx = 0.0f, ty = 0.0f;
  bool affine = false;
  float a11 = 1.0f, a12 = 0.0f, a21 = 0.0f, a22 = 1.0f;
};

struct SceneSpec {
  int h = 64, w = 64;
  uint64_t bg_seed = 1;
  uint64_t fg_seed = 2;
  FgShape shape = FgShape::Rect;
  float fg_cx = 32.0f, fg_cy = 32.0f;   // centre at frame 1
  float fg_half_w = 10.0f, fg_half_h = 8.0f;  // disc uses fg_half_w as radius
  StepMotion fg_motion;
  float bg_tx = 0.0f, bg_ty = 0.0f;
  float noise_sigma = 0.0f;
  uint64_t noise_seed = 3;
};

struct SynthSample {
  std::array<Tensor, 3> frames;  // (3,H,W) each, values in [0,1]
  GtSample gt;
};

SynthSample generate(const SceneSpec& spec);

// Randomized scene distribution for datasets.
struct SceneDist {
  int h = 64, w = 64;
  float max_shift = 4.0f;      // per-step translation cap, both layers
  float fg_min_half = 6.0f, fg_max_half = 14.0f;
  float noise_sigma = 0.0f;
  bool allow_disc = true;
};

SceneSpec draw_spec(const SceneDist& dist, Rng& rng);

// Deterministic random-access dataset; even indices are the train split,
// odd indices the validation split.
SynthSample dataset_sample(const SceneDist& dist, uint64_t seed, int64_t index);

inline bool is_train_index(int64_t index) { return index % 2 == 0; }

}  // namespace sstm
