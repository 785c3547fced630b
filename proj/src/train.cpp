#include "sstm/train.hpp"

#include <cmath>
#include <sstream>

#include "sstm/loss.hpp"
#include "sstm/metrics.hpp"

namespace sstm {

void Adam::step(ParamRegistry& reg, float clip) {
  const auto& entries = reg.entries();
  if (m_.empty()) {
    m_.resize(entries.size());
    v_.resize(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
      m_[i].assign(size_t(entries[i].tensor.size()), 0.0f);
      v_[i].assign(size_t(entries[i].tensor.size()), 0.0f);
    }
  }
  if (m_.size() != entries.size()) throw std::invalid_argument("adam: registry changed size");

  double norm_sq = 0.0;
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) continue;
    for (float g : e.tensor.grad_ref()) norm_sq += double(g) * g;
  }
  const double norm = std::sqrt(norm_sq);
  const float scale = (clip > 0.0f && norm > clip) ? float(clip / norm) : 1.0f;

  ++t_;
  const double bc1 = 1.0 - std::pow(double(beta1_), double(t_));
  const double bc2 = 1.0 - std::pow(double(beta2_), double(t_));
  for (size_t i = 0; i < entries.size(); ++i) {
    auto t = entries[i].tensor;
    if (!t.has_grad()) continue;
    float* p = const_cast<Tensor&>(t).data();
    const auto& g = t.grad_ref();
    for (size_t j = 0; j < g.size(); ++j) {
      const float gj = g[j] * scale;
      m_[i][j] = beta1_ * m_[i][j] + (1.0f - beta1_) * gj;
      v_[i][j] = beta2_ * v_[i][j] + (1.0f - beta2_) * gj * gj;
      const float mhat = float(m_[i][j] / bc1);
      const float vhat = float(v_[i][j] / bc2);
      p[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

ValResult validate_model(const ModelWeights& w, const ModelConfig& cfg, const SceneDist& dist,
                         uint64_t seed, int count) {
  ValResult r;
  double acc1 = 0, acc2 = 0, accd = 0;
  int64_t nd = 0;
  for (int i = 0; i < count; ++i) {
    auto s = dataset_sample(dist, seed, 2 * i + 1);  // validation split
    auto out = forward(s.frames, w, cfg);
    const auto& fin = out.flows.back();
    acc1 += epe(fin.f1, s.gt.gt_f1);
    acc2 += epe(fin.f2, s.gt.gt_f2);
    auto dmap = occlusion_distance(s.gt.occ_mask, s.gt.h, s.gt.w);
    RegionSpec d010{RegionSpec::Kind::OccDistance, 0.0f, 10.0f};
    try {
      auto band = banded_epe(fin.f2, s.gt.gt_f2, d010, dmap);
      accd += band.epe * double(band.count);
      nd += band.count;
    } catch (const std::invalid_argument&) {
      // sample without occlusions contributes nothing to the band
    }
  }
  r.epe_f1 = acc1 / count;
  r.epe_f2 = acc2 / count;
  r.epe_overall = 0.5 * (r.epe_f1 + r.epe_f2);
  r.d010_count = nd;
  r.d010_f2 = nd > 0 ? accd / double(nd) : 0.0;
  return r;
}

TrainResult train_model(ModelWeights& w, const ModelConfig& cfg, const TrainOptions& opt,
                        const std::function<void(const std::string&)>& log) {
  TrainResult result;
  Adam adam(opt.lr);
  for (int step = 0; step < opt.steps; ++step) {
    const int64_t idx = 2 * (step % opt.train_samples);  // training split
    auto sample = dataset_sample(opt.dist, opt.data_seed, idx);

    Tape tape;
    double loss_val = 0;
    {
      Tape::Scope scope(tape);
      auto out = forward(sample.frames, w, cfg);
      Tensor loss;
      if (opt.use_loss2)
        loss = loss2<float>(out.flows, sample.gt.gt_f2, sample.gt.valid2, cfg.gamma);
      else
        loss = loss1<float>(out.flows, sample.gt.gt_f1, sample.gt.gt_f2, sample.gt.valid1,
                            sample.gt.valid2, cfg.gamma);
      loss_val = loss.item();
      tape.backward(loss);
    }
    tape.clear();
    adam.step(w.reg, opt.clip);
    w.reg.zero_grads();

    result.loss_history.push_back(loss_val);
    if (step == 0) result.first_loss = loss_val;
    if (log && (step % opt.log_every == 0 || step == opt.steps - 1)) {
      auto val = validate_model(w, cfg, opt.dist, opt.data_seed,
                                std::min(opt.val_samples, 8));
      std::ostringstream os;
      os << "step=" << step << " loss=" << loss_val << " val_epe=" << val.epe_overall;
      log(os.str());
    }
  }
  const size_t tail = std::min<size_t>(50, result.loss_history.size());
  double acc = 0;
  for (size_t i = result.loss_history.size() - tail; i < result.loss_history.size(); ++i)
    acc += result.loss_history[i];
  result.final_loss_avg = acc / double(tail);
  result.val = validate_model(w, cfg, opt.dist, opt.data_seed, opt.val_samples);
  return result;
}

}  // namespace sstm
