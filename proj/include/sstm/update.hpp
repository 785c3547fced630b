#pragma once

// The recurrent update block: warping-based brightness errors, the motion
// encoder, the 3D convGRU step with separable gate convolutions, residual
// hidden connections, the shared flow head, and flow upsampling.

#include <optional>
#include <utility>

#include "sstm/encoders.hpp"
#include "sstm/flowpair.hpp"
#include "sstm/params.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

// ---------------------------------------------------------------------------
// Brightness errors. Flows are at 1/8 resolution in 1/8-pixel units.
// e1 = |W(fmap2; f1) - fmap1|, e2 = |W(fmap3; f2) - fmap2|,
// e3 = |W(W(fmap3; f2); f1) - fmap1|, each reduced over feature channels to
// a single nonnegative plane; output (3, h, w).

template <typename S>
TensorT<S> brightness_errors(const TensorT<S>& fmap1, const TensorT<S>& fmap2,
                             const TensorT<S>& fmap3, const FlowPairT<S>& flows) {
  require_res(flows, FlowRes::Eighth, "brightness_errors");
  const int h = fmap1.dim(1), w = fmap1.dim(2);
  auto grid = identity_grid<S>(h, w);
  auto c1 = add(grid, flows.f1);
  auto c2 = add(grid, flows.f2);
  auto w2 = bilinear_sample(fmap2, c1);
  auto w3 = bilinear_sample(fmap3, c2);
  auto w32 = bilinear_sample(w3, c1);  // warp the already-warped map again
  auto e1 = channel_norm(sub(w2, fmap1));
  auto e2 = channel_norm(sub(w3, fmap2));
  auto e3 = channel_norm(sub(w32, fmap1));
  return concat<S>({e1, e2, e3}, 0);
}

// ---------------------------------------------------------------------------
// Motion encoder: compresses [correlation | flow | errors] per time window
// into L_m motion channels; output (L_m, 2, h, w).

template <typename S>
struct MotionEncoderW {
  ConvP<S> corr1;      // k1 compressor on the correlation features
  SepConv<S> corr3;
  SepConv<S> flow3;    // on [flow | errors]
  SepConv<S> out3;
  bool with_errors = false;
};

template <typename S>
MotionEncoderW<S> make_motion_encoder(ParamRegistryT<S>& reg, const std::string& name,
                                      int corr_ch, int lm, bool with_errors, Rng& rng) {
  MotionEncoderW<S> w;
  const int cc = std::max(4, lm * 3 / 4);
  const int cf = std::max(4, lm / 4);
  w.corr1 = make_conv(reg, name + ".c1", Axis::X, cc, corr_ch, 1, rng);
  w.corr3 = make_sep(reg, name + ".c3", cc, cc, 3, rng);
  w.flow3 = make_sep(reg, name + ".f3", cf, with_errors ? 5 : 2, 3, rng);
  w.out3 = make_sep(reg, name + ".o3", lm, cc + cf, 3, rng);
  w.with_errors = with_errors;
  return w;
}

template <typename S>
TensorT<S> motion_encode(const TensorT<S>& corr, const FlowPairT<S>& flows,
                         const std::optional<TensorT<S>>& errors, const MotionEncoderW<S>& w) {
  require_res(flows, FlowRes::Eighth, "motion_encode");
  if (corr.rank() != 4 || corr.dim(1) != 2)
    throw std::invalid_argument("motion_encode: correlation features must be (D,2,h,w)");
  if (w.with_errors != errors.has_value())
    throw std::invalid_argument("motion_encode: error planes do not match configuration");
  const int d = corr.dim(0), h = corr.dim(2), ww = corr.dim(3);
  std::vector<TensorT<S>> windows;
  for (int t = 0; t < 2; ++t) {
    auto c = reshape(slice(corr, 1, t, 1), Shape{d, h, ww});
    c = relu(apply_sep(relu(apply_conv(c, w.corr1)), w.corr3));
    auto f = t == 0 ? flows.f1 : flows.f2;
    if (errors) f = concat<S>({f, *errors}, 0);
    f = relu(apply_sep(f, w.flow3));
    auto m = relu(apply_sep(concat<S>({c, f}, 0), w.out3));
    windows.push_back(reshape(m, Shape{m.dim(0), 1, h, ww}));
  }
  return concat<S>(windows, 1);
}

template <typename S>
TensorT<S> motion_encode(const TensorT<S>& corr, const FlowPairT<S>& flows,
                         const MotionEncoderW<S>& w) {
  return motion_encode(corr, flows, std::optional<TensorT<S>>{}, w);
}

// ---------------------------------------------------------------------------
// 3D convGRU. Every gate convolution is the chain conv_x -> conv_y -> conv_t
// (kernels (1,1,3), (1,3,1), (3,1,1)); bias sits on the temporal conv.
//   Z = sigmoid(Conv3d([h, X]))        update gate
//   r = sigmoid(Conv3d([h, X]))        reset gate
//   h' = tanh(Conv3d(X) + r (*) h)     candidate
//   h_new = Z (*) h + (1 - Z) (*) h'

template <typename S>
struct GruChainW {
  ConvP<S> cx, cy, ct;
};

template <typename S>
GruChainW<S> make_gru_chain(ParamRegistryT<S>& reg, const std::string& name, int out, int in,
                            Rng& rng) {
  GruChainW<S> c;
  c.cx = make_conv(reg, name + ".x", Axis::X, out, in, 3, rng, 1, -1, false);
  c.cy = make_conv(reg, name + ".y", Axis::Y, out, out, 3, rng, 1, -1, false);
  c.ct = make_conv(reg, name + ".t", Axis::T, out, out, 3, rng, 1, -1, true);
  return c;
}

template <typename S>
TensorT<S> apply_gru_chain(const TensorT<S>& x, const GruChainW<S>& c) {
  return apply_conv(apply_conv(apply_conv(x, c.cx), c.cy), c.ct);
}

template <typename S>
struct GruW {
  GruChainW<S> z, r, q;  // update, reset, candidate
  int hidden = 0, input = 0;
};

template <typename S>
GruW<S> make_gru(ParamRegistryT<S>& reg, const std::string& name, int hidden, int input,
                 Rng& rng) {
  GruW<S> w;
  w.z = make_gru_chain(reg, name + ".z", hidden, hidden + input, rng);
  w.r = make_gru_chain(reg, name + ".r", hidden, hidden + input, rng);
  w.q = make_gru_chain(reg, name + ".q", hidden, input, rng);
  w.hidden = hidden;
  w.input = input;
  return w;
}

template <typename S>
struct GruStepTrace {
  TensorT<S> z, r, cand;
};

template <typename S>
std::pair<TensorT<S>, GruStepTrace<S>> gru_step(const TensorT<S>& h, const TensorT<S>& x,
                                                const GruW<S>& w) {
  if (h.dim(0) != w.hidden || x.dim(0) != w.input)
    throw std::invalid_argument("gru_step: channel mismatch");
  auto hx = concat<S>({h, x}, 0);
  GruStepTrace<S> tr;
  tr.z = sigmoid(apply_gru_chain(hx, w.z));
  tr.r = sigmoid(apply_gru_chain(hx, w.r));
  tr.cand = tanh(add(apply_gru_chain(x, w.q), mul(tr.r, h)));
  auto one_minus_z = add(neg(tr.z), S(1));
  auto h_new = add(mul(tr.z, h), mul(one_minus_z, tr.cand));
  return {h_new, tr};
}

// Residual hidden connection: at every r_interval-th step the state saved
// r_interval steps earlier is added back; other steps pass through.
template <typename S>
TensorT<S> residual_hidden(int n, int r_interval, const TensorT<S>& h_new,
                           const TensorT<S>& h_saved) {
  if (r_interval < 1) throw std::invalid_argument("residual_hidden: interval must be positive");
  if (n >= r_interval && n % r_interval == 0) return add(h_new, h_saved);
  return h_new;
}

// ---------------------------------------------------------------------------
// Flow head: splits the hidden state into its two time slots and applies a
// shared two-layer head producing 2-channel flow deltas per window.

template <typename S>
struct FlowHeadW {
  SepConv<S> l1, l2;
};

template <typename S>
FlowHeadW<S> make_flow_head(ParamRegistryT<S>& reg, const std::string& name, int hidden,
                            Rng& rng) {
  FlowHeadW<S> w;
  w.l1 = make_sep(reg, name + ".l1", hidden, hidden, 3, rng);
  w.l2 = make_sep(reg, name + ".l2", 2, hidden, 3, rng);
  // zero output layer: refinement starts from the zero-delta fixed point
  std::fill(w.l2.cx.w.values().begin(), w.l2.cx.w.values().end(), S(0));
  std::fill(w.l2.cy.w.values().begin(), w.l2.cy.w.values().end(), S(0));
  return w;
}

template <typename S>
std::pair<TensorT<S>, TensorT<S>> flow_head(const TensorT<S>& state, const FlowHeadW<S>& w) {
  if (state.rank() != 4 || state.dim(1) != 2)
    throw std::invalid_argument("flow_head: state temporal extent must be 2");
  const int d = state.dim(0), h = state.dim(2), ww = state.dim(3);
  auto run = [&](int t) {
    auto ht = reshape(slice(state, 1, t, 1), Shape{d, h, ww});
    return apply_sep(relu(apply_sep(ht, w.l1)), w.l2);
  };
  return {run(0), run(1)};
}

// Bilinear x8 upsampling; flow values scale with the resolution.
template <typename S>
FlowPairT<S> upsample_flow(const FlowPairT<S>& f) {
  require_res(f, FlowRes::Eighth, "upsample_flow");
  FlowPairT<S> out;
  out.f1 = mul(upsample_bilinear(f.f1, 8), S(8));
  out.f2 = mul(upsample_bilinear(f.f2, 8), S(8));
  out.res = FlowRes::Full;
  return out;
}

}  // namespace sstm
