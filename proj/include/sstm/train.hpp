#pragma once

// Toy-scale training: Adam with global-norm gradient clipping on the
// synthetic dataset, plus validation metrics.

#include <functional>
#include <string>
#include <vector>

#include "sstm/model.hpp"
#include "sstm/synth.hpp"

namespace sstm {

class Adam {
 public:
  explicit Adam(float lr = 4e-4f, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies accumulated gradients to every registry parameter. clip <= 0
  // disables gradient clipping.
  void step(ParamRegistry& reg, float clip = 1.0f);

  int64_t steps_taken() const { return t_; }

 private:
  float lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct TrainOptions {
  int steps = 2000;
  float lr = 4e-4f;
  float clip = 1.0f;
  int log_every = 50;
  uint64_t data_seed = 1;
  SceneDist dist;
  int train_samples = 200;  // cycled in order
  int val_samples = 16;
  bool use_loss2 = false;
};

struct ValResult {
  double epe_overall = 0, epe_f1 = 0, epe_f2 = 0;
  double d010_f2 = 0;  // EPE within 10 px of an occlusion, f2 window
  int64_t d010_count = 0;
};

ValResult validate_model(const ModelWeights& w, const ModelConfig& cfg, const SceneDist& dist,
                         uint64_t seed, int count);

struct TrainResult {
  double first_loss = 0;
  double final_loss_avg = 0;  // mean over the last 50 steps
  ValResult val;
  std::vector<double> loss_history;
};

// log callback receives preformatted key=value lines
TrainResult train_model(ModelWeights& w, const ModelConfig& cfg, const TrainOptions& opt,
                        const std::function<void(const std::string&)>& log = nullptr);

}  // namespace sstm
