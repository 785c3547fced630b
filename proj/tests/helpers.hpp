#pragma once

// Shared helpers for test binaries.

#include <cstring>
#include <stdexcept>

#include "sstm/model.hpp"

namespace sstm_test {

using namespace sstm;

// Copies every parameter whose name and shape match between two registries.
inline int copy_shared_params(const ParamRegistry& src, ParamRegistry& dst) {
  int copied = 0;
  for (const auto& e : dst.entries()) {
    if (!src.has(e.name)) continue;
    const auto& s = src.find(e.name);
    if (s.shape() != e.tensor.shape()) continue;
    std::memcpy(const_cast<Tensor&>(e.tensor).data(), s.data(),
                sizeof(float) * size_t(s.size()));
    ++copied;
  }
  return copied;
}

// Builds SSTM++ weights that reproduce a given SSTM model exactly when
// alpha = 0: shared tensors are copied name-to-name and the wider GRU input
// kernels embed the SSTM kernels with zeros on the aggregated-motion slice.
// Both configs must use the same context mode and warp-error setting.
inline ModelWeights embed_sstm_in_sstmpp(const ModelWeights& wa, const ModelConfig& cfga,
                                         const ModelConfig& cfgb, uint64_t seed) {
  if (cfga.variant != Variant::SSTM || cfgb.variant != Variant::SSTMPP)
    throw std::invalid_argument("embed: expected (sstm, sstm++) configs");
  if (cfga.context_mode != cfgb.context_mode ||
      cfga.use_warp_errors != cfgb.use_warp_errors || cfga.hidden_ch != cfgb.hidden_ch ||
      cfga.ctx_ch != cfgb.ctx_ch || cfga.motion_ch != cfgb.motion_ch)
    throw std::invalid_argument("embed: configs are not comparable");

  ModelWeights wb = init_weights(cfgb, seed);
  copy_shared_params(wa.reg, wb.reg);
  // alpha stays at its zero init; attention projections are arbitrary.

  const int hid = cfga.hidden_ch, ctx = cfga.ctx_ch, lm = cfga.motion_ch;
  // gate input layout: [h | ctx | Y | M] (sstm++), [h | ctx | M] (sstm)
  auto embed = [&](const Tensor& src_k, Tensor dst_k, int lead) {
    std::fill(dst_k.values().begin(), dst_k.values().end(), 0.0f);
    const int k = src_k.dim(2);
    for (int co = 0; co < src_k.dim(0); ++co)
      for (int q = 0; q < k; ++q) {
        for (int ci = 0; ci < lead + ctx; ++ci)
          dst_k.at(co, ci, q) = src_k.at(co, ci, q);
        for (int ci = 0; ci < lm; ++ci)  // M block sits after the zeroed Y block
          dst_k.at(co, lead + ctx + lm + ci, q) = src_k.at(co, lead + ctx + ci, q);
      }
  };
  embed(wa.gru.z.cx.w, wb.gru.z.cx.w, hid);
  embed(wa.gru.r.cx.w, wb.gru.r.cx.w, hid);
  embed(wa.gru.q.cx.w, wb.gru.q.cx.w, 0);
  return wb;
}

}  // namespace sstm_test
