#pragma once

// Space-time attention over flattened positions. Queries and keys come from
// the context features, values from the motion features; the aggregated
// motion is a residual update Y = M + alpha * softmax(Q K^T / sqrt(dk)) V.
// Attention is computed within each time window; with alpha = 0 it is an
// exact pass-through.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "sstm/params.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

template <typename S>
struct AttentionW {
  TensorT<S> wq, wk;   // (L_c, d_k)
  TensorT<S> wv;       // (L_m, L_m)
  TensorT<S> alpha;    // single learnable scalar
  int heads = 1;
};

template <typename S>
AttentionW<S> make_attention(ParamRegistryT<S>& reg, const std::string& name, int lc, int lm,
                             int dk, Rng& rng, int heads = 1) {
  if (heads < 1 || dk % heads != 0 || lm % heads != 0)
    throw std::invalid_argument("attention: head count must divide d_k and L_m");
  AttentionW<S> w;
  w.wq = reg.add(name + ".wq", Shape{lc, dk}, ParamKind::Matrix, rng);
  w.wk = reg.add(name + ".wk", Shape{lc, dk}, ParamKind::Matrix, rng);
  w.wv = reg.add(name + ".wv", Shape{lm, lm}, ParamKind::Matrix, rng);
  w.alpha = reg.add(name + ".alpha", Shape{1}, ParamKind::Scalar, rng);
  w.heads = heads;
  return w;
}

// context_t: (L_c,h,w), motion_t: (L_m,h,w) -> aggregated motion (L_m,h,w)
template <typename S>
TensorT<S> attend(const TensorT<S>& context_t, const TensorT<S>& motion_t,
                  const AttentionW<S>& w) {
  if (context_t.rank() != 3 || motion_t.rank() != 3 || context_t.dim(1) != motion_t.dim(1) ||
      context_t.dim(2) != motion_t.dim(2))
    throw std::invalid_argument("attend: context/motion spatial extents disagree");
  const int lc = context_t.dim(0), lm = motion_t.dim(0);
  const int h = context_t.dim(1), ww = context_t.dim(2);
  if (w.wq.dim(0) != lc || w.wv.dim(0) != lm)
    throw std::invalid_argument("attend: weight shapes do not match feature widths");
  const int n = h * ww, dk = w.wq.dim(1);
  const int hd = w.heads, dkh = dk / hd, lmh = lm / hd;

  auto cf = reshape(permute(context_t, {1, 2, 0}), Shape{n, lc});  // positions x channels
  auto mf = reshape(permute(motion_t, {1, 2, 0}), Shape{n, lm});
  auto q = matmul(cf, w.wq);  // (n, dk)
  auto k = matmul(cf, w.wk);
  auto v = matmul(mf, w.wv);  // (n, lm)

  std::vector<TensorT<S>> head_out;
  for (int he = 0; he < hd; ++he) {
    auto qh = hd == 1 ? q : slice(q, 1, he * dkh, dkh);
    auto kh = hd == 1 ? k : slice(k, 1, he * dkh, dkh);
    auto vh = hd == 1 ? v : slice(v, 1, he * lmh, lmh);
    auto scores = mul(matmul(qh, permute(kh, {1, 0})), S(1) / std::sqrt(S(dkh)));
    auto att = softmax(scores, 1);  // rows normalized over key positions
    head_out.push_back(matmul(att, vh));
  }
  auto agg = hd == 1 ? head_out[0] : concat<S>(head_out, 1);
  auto y = add(mf, mul(agg, w.alpha));
  return permute(reshape(y, Shape{h, ww, lm}), {2, 0, 1});
}

// Concatenates [context | Y | M] per time window and stacks the two windows
// on the temporal axis: (L_c + 2*L_m, 2, h, w).
template <typename S>
TensorT<S> aggregate_gru_input(const TensorT<S>& context, const TensorT<S>& y,
                               const TensorT<S>& motion) {
  if (context.rank() != 4 || context.dim(1) != 2 || y.shape() != motion.shape() ||
      y.rank() != 4 || y.dim(1) != 2)
    throw std::invalid_argument("aggregate_gru_input: expected (C,2,h,w) inputs");
  if (context.dim(2) != y.dim(2) || context.dim(3) != y.dim(3))
    throw std::invalid_argument("aggregate_gru_input: spatial extents disagree");
  return concat<S>({context, y, motion}, 0);
}

}  // namespace sstm
