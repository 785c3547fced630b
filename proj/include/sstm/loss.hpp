#pragma once

// Sequence training losses. The L1 norm is summed over the two flow
// components and averaged over valid pixels; step i is weighted by
// gamma^(N-i), so later refinements dominate.

#include <vector>

#include "sstm/flowpair.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

namespace detail {

// Mean over valid pixels of |du| + |dv|; valid is a (1,H,W) 0/1 mask.
template <typename S>
TensorT<S> masked_l1(const TensorT<S>& pred, const TensorT<S>& gt, const TensorT<S>& valid) {
  if (pred.shape() != gt.shape()) throw std::invalid_argument("loss: pred/gt shape mismatch");
  if (valid.rank() != 3 || valid.dim(0) != 1 || valid.dim(1) != pred.dim(1) ||
      valid.dim(2) != pred.dim(2))
    throw std::invalid_argument("loss: valid mask must be (1,H,W)");
  S count = S(0);
  for (int64_t i = 0; i < valid.size(); ++i) count += valid.data()[i];
  if (count <= S(0)) throw std::invalid_argument("loss: empty valid mask");
  auto mask2 = concat<S>({valid, valid}, 0);
  auto l1 = mul(abs(sub(pred, gt)), mask2);
  return mul(sum_all(l1), S(1) / count);
}

}  // namespace detail

// Both ground-truth streams supervised; per-step average of the two L1 terms.
template <typename S>
TensorT<S> loss1(const std::vector<FlowPairT<S>>& preds, const TensorT<S>& gt_f1,
                 const TensorT<S>& gt_f2, const TensorT<S>& valid1, const TensorT<S>& valid2,
                 S gamma) {
  if (preds.empty()) throw std::invalid_argument("loss1: no predictions");
  if (!gt_f1.defined()) throw std::invalid_argument("loss1: gt_f1 required");
  const int n = static_cast<int>(preds.size());
  TensorT<S> total = TensorT<S>::scalar(S(0));
  for (int i = 1; i <= n; ++i) {
    const auto& p = preds[static_cast<size_t>(i - 1)];
    auto term = mul(add(detail::masked_l1(p.f1, gt_f1, valid1),
                        detail::masked_l1(p.f2, gt_f2, valid2)),
                    S(0.5));
    total = add(total, mul(term, S(std::pow(double(gamma), double(n - i)))));
  }
  return total;
}

// Only the second stream supervised (single ground-truth pair available).
template <typename S>
TensorT<S> loss2(const std::vector<FlowPairT<S>>& preds, const TensorT<S>& gt_f2,
                 const TensorT<S>& valid2, S gamma) {
  if (preds.empty()) throw std::invalid_argument("loss2: no predictions");
  if (!gt_f2.defined()) throw std::invalid_argument("loss2: gt_f2 required");
  const int n = static_cast<int>(preds.size());
  TensorT<S> total = TensorT<S>::scalar(S(0));
  for (int i = 1; i <= n; ++i) {
    auto term = detail::masked_l1(preds[static_cast<size_t>(i - 1)].f2, gt_f2, valid2);
    total = add(total, mul(term, S(std::pow(double(gamma), double(n - i)))));
  }
  return total;
}

}  // namespace sstm
