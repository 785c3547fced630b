#pragma once

// Feature and context encoders. All convolutions in this module are 1D
// (conv_axis); 2D spatial filtering is always the chain conv_x then conv_y.

#include <array>
#include <stdexcept>
#include <string>

#include "sstm/params.hpp"
#include "sstm/tensor.hpp"

namespace sstm {

template <typename S>
struct ConvP {
  TensorT<S> w;  // (out, in, k)
  TensorT<S> b;  // (out) or undefined
  Axis axis = Axis::X;
  int stride = 1;
  int pad = -1;  // -1: (k-1)/2
};

template <typename S>
TensorT<S> apply_conv(const TensorT<S>& x, const ConvP<S>& p) {
  auto y = conv_axis(x, p.w, p.axis, p.stride, p.pad);
  if (p.b.defined()) y = bias_add(y, p.b);
  return y;
}

// Factored spatial filter: conv along x, then along y.
template <typename S>
struct SepConv {
  ConvP<S> cx, cy;
};

template <typename S>
TensorT<S> apply_sep(const TensorT<S>& x, const SepConv<S>& p) {
  return apply_conv(apply_conv(x, p.cx), p.cy);
}

template <typename S>
ConvP<S> make_conv(ParamRegistryT<S>& reg, const std::string& name, Axis axis, int out, int in,
                   int k, Rng& rng, int stride = 1, int pad = -1, bool bias = true) {
  ConvP<S> p;
  const ParamKind kind = axis == Axis::X   ? ParamKind::ConvX
                         : axis == Axis::Y ? ParamKind::ConvY
                                           : ParamKind::ConvT;
  p.w = reg.add(name + ".w", Shape{out, in, k}, kind, rng);
  if (bias) p.b = reg.add(name + ".b", Shape{out}, ParamKind::Bias, rng);
  p.axis = axis;
  p.stride = stride;
  p.pad = pad;
  return p;
}

template <typename S>
SepConv<S> make_sep(ParamRegistryT<S>& reg, const std::string& name, int out, int in, int k,
                    Rng& rng, int stride = 1) {
  SepConv<S> p;
  p.cx = make_conv(reg, name + ".x", Axis::X, out, in, k, rng, stride);
  p.cy = make_conv(reg, name + ".y", Axis::Y, out, out, k, rng, stride);
  return p;
}

// ---------------------------------------------------------------------------
// SPT blocks: pre-activated separable spatiotemporal blocks with residual
// connections. Four layouts cover the serial / parallel / spatial-only
// design space:
//   TThenS      temporal k3, then spatial k3
//   SThenT      spatial k3, then temporal k3
//   Parallel    spatial and temporal branches summed (stride 1 only)
//   SpatialOnly spatial k3 only; also the building block of the 2D twin
//               context encoder when applied to rank-3 inputs
// A block that changes channels, strides, or reduces time projects its
// shortcut with k1 convolutions (plus a valid k2 temporal conv when
// reducing 3 frames to 2 time slots).

enum class SptKind { TThenS, SThenT, Parallel, SpatialOnly };

template <typename S>
struct SptBlockW {
  SptKind kind = SptKind::SpatialOnly;
  int in_ch = 0, out_ch = 0;
  int spatial_stride = 1;
  bool temporal_reduce = false;  // valid k2 temporal conv: T 3 -> 2
  ConvP<S> tconv;
  SepConv<S> sconv;
  bool has_proj = false;
  ConvP<S> px, py, pt;
};

template <typename S>
SptBlockW<S> make_spt_block(ParamRegistryT<S>& reg, const std::string& name, SptKind kind,
                            int in_ch, int out_ch, int stride, bool temporal_reduce, Rng& rng) {
  if (kind == SptKind::Parallel && stride != 1)
    throw std::invalid_argument("spt: parallel block requires stride 1");
  if (kind == SptKind::SpatialOnly && temporal_reduce)
    throw std::invalid_argument("spt: spatial-only block cannot reduce time");
  SptBlockW<S> b;
  b.kind = kind;
  b.in_ch = in_ch;
  b.out_ch = out_ch;
  b.spatial_stride = stride;
  b.temporal_reduce = temporal_reduce;
  const bool t_first = kind == SptKind::TThenS || kind == SptKind::Parallel;
  if (kind != SptKind::SpatialOnly) {
    const int tk = temporal_reduce ? 2 : 3;
    const int tp = temporal_reduce ? 0 : -1;
    const int t_in = t_first ? in_ch : out_ch;
    b.tconv = make_conv(reg, name + ".t", Axis::T, out_ch, t_in, tk, rng, 1, tp);
  }
  const int s_in = kind == SptKind::TThenS ? out_ch : in_ch;
  b.sconv = make_sep(reg, name + ".s", out_ch, s_in, 3, rng, stride);
  b.has_proj = in_ch != out_ch || stride != 1 || temporal_reduce;
  if (b.has_proj) {
    b.px = make_conv(reg, name + ".p.x", Axis::X, out_ch, in_ch, 1, rng, stride, 0, false);
    b.py = make_conv(reg, name + ".p.y", Axis::Y, out_ch, out_ch, 1, rng, stride, 0, false);
    if (temporal_reduce)
      b.pt = make_conv(reg, name + ".p.t", Axis::T, out_ch, out_ch, 2, rng, 1, 0, false);
  }
  return b;
}

template <typename S>
TensorT<S> spt_block(const TensorT<S>& x, const SptBlockW<S>& w) {
  if (x.dim(0) != w.in_ch)
    throw std::invalid_argument("spt_block: channel mismatch, got " + std::to_string(x.dim(0)) +
                                " expected " + std::to_string(w.in_ch));
  auto pre = relu(x);
  TensorT<S> h;
  switch (w.kind) {
    case SptKind::TThenS:
      h = apply_sep(relu(apply_conv(pre, w.tconv)), w.sconv);
      break;
    case SptKind::SThenT:
      h = apply_conv(relu(apply_sep(pre, w.sconv)), w.tconv);
      break;
    case SptKind::Parallel:
      h = add(apply_sep(pre, w.sconv), apply_conv(pre, w.tconv));
      break;
    case SptKind::SpatialOnly:
      h = apply_sep(pre, w.sconv);
      break;
  }
  TensorT<S> shortcut = x;
  if (w.has_proj) {
    shortcut = apply_conv(apply_conv(x, w.px), w.py);
    if (w.temporal_reduce) shortcut = apply_conv(shortcut, w.pt);
  }
  return add(h, shortcut);
}

// ---------------------------------------------------------------------------
// Feature encoder: shared 2D encoder to 1/8 resolution, 256 channels at full
// width. Separable convolutions with per-channel instance normalization.

template <typename S>
struct FeatureEncoderW {
  std::array<SepConv<S>, 6> stages;  // strides 2,1,2,1,2,1
  ConvP<S> proj;                     // k1 to the output width
};

struct FeatureWidths {
  int a = 64, b = 96, c = 128, out = 256;
};

template <typename S>
FeatureEncoderW<S> make_feature_encoder(ParamRegistryT<S>& reg, const std::string& name,
                                        const FeatureWidths& wd, Rng& rng) {
  FeatureEncoderW<S> w;
  w.stages[0] = make_sep(reg, name + ".s1", wd.a, 3, 7, rng, 2);
  w.stages[1] = make_sep(reg, name + ".s2", wd.a, wd.a, 3, rng, 1);
  w.stages[2] = make_sep(reg, name + ".s3", wd.b, wd.a, 3, rng, 2);
  w.stages[3] = make_sep(reg, name + ".s4", wd.b, wd.b, 3, rng, 1);
  w.stages[4] = make_sep(reg, name + ".s5", wd.c, wd.b, 3, rng, 2);
  w.stages[5] = make_sep(reg, name + ".s6", wd.c, wd.c, 3, rng, 1);
  w.proj = make_conv(reg, name + ".proj", Axis::X, wd.out, wd.c, 1, rng);
  return w;
}

template <typename S>
TensorT<S> feature_encode(const TensorT<S>& image, const FeatureEncoderW<S>& w) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("feature_encode: image must be (3,H,W)");
  if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0)
    throw std::invalid_argument("feature_encode: extents must be multiples of 8 (pad upstream)");
  auto h = image;
  for (const auto& s : w.stages) h = relu(instance_norm(apply_sep(h, s)));
  return apply_conv(h, w.proj);
}

// ---------------------------------------------------------------------------
// Context encoders. The 3D path cascades six SPT blocks over (3,3,H,W),
// reaching 1/8 spatial and 2/3 temporal resolution. The 2D twin applies a
// shared spatial-only cascade to the first two frames and stacks them.

struct ContextWidths {
  int c1 = 48, c2 = 64, c3 = 96, out = 128;
};

template <typename S>
struct ContextEncoder3dW {
  std::array<SptBlockW<S>, 6> blocks;
};

template <typename S>
ContextEncoder3dW<S> make_context_encoder_3d(ParamRegistryT<S>& reg, const std::string& name,
                                             const ContextWidths& wd, Rng& rng) {
  ContextEncoder3dW<S> w;
  w.blocks[0] = make_spt_block(reg, name + ".b1", SptKind::TThenS, 3, wd.c1, 2, false, rng);
  w.blocks[1] = make_spt_block(reg, name + ".b2", SptKind::Parallel, wd.c1, wd.c1, 1, false, rng);
  w.blocks[2] = make_spt_block(reg, name + ".b3", SptKind::SThenT, wd.c1, wd.c2, 2, false, rng);
  w.blocks[3] = make_spt_block(reg, name + ".b4", SptKind::SpatialOnly, wd.c2, wd.c2, 1, false, rng);
  w.blocks[4] = make_spt_block(reg, name + ".b5", SptKind::TThenS, wd.c2, wd.c3, 2, false, rng);
  w.blocks[5] = make_spt_block(reg, name + ".b6", SptKind::SThenT, wd.c3, wd.out, 1, true, rng);
  return w;
}

template <typename S>
TensorT<S> context_encode_3d(const TensorT<S>& frames, const ContextEncoder3dW<S>& w) {
  if (frames.rank() != 4 || frames.dim(0) != 3 || frames.dim(1) != 3)
    throw std::invalid_argument("context_encode_3d: input must be (3,3,H,W)");
  auto h = frames;
  for (const auto& b : w.blocks) h = spt_block(h, b);
  return h;
}

template <typename S>
struct ContextEncoder2dW {
  std::array<SptBlockW<S>, 6> blocks;  // all SpatialOnly, shared across frames
};

template <typename S>
ContextEncoder2dW<S> make_context_encoder_2d(ParamRegistryT<S>& reg, const std::string& name,
                                             const ContextWidths& wd, Rng& rng) {
  ContextEncoder2dW<S> w;
  w.blocks[0] = make_spt_block(reg, name + ".b1", SptKind::SpatialOnly, 3, wd.c1, 2, false, rng);
  w.blocks[1] = make_spt_block(reg, name + ".b2", SptKind::SpatialOnly, wd.c1, wd.c1, 1, false, rng);
  w.blocks[2] = make_spt_block(reg, name + ".b3", SptKind::SpatialOnly, wd.c1, wd.c2, 2, false, rng);
  w.blocks[3] = make_spt_block(reg, name + ".b4", SptKind::SpatialOnly, wd.c2, wd.c2, 1, false, rng);
  w.blocks[4] = make_spt_block(reg, name + ".b5", SptKind::SpatialOnly, wd.c2, wd.c3, 2, false, rng);
  w.blocks[5] = make_spt_block(reg, name + ".b6", SptKind::SpatialOnly, wd.c3, wd.out, 1, false, rng);
  return w;
}

template <typename S>
TensorT<S> context_encode_2d(const TensorT<S>& i1, const TensorT<S>& i2,
                             const ContextEncoder2dW<S>& w) {
  if (i1.shape() != i2.shape() || i1.rank() != 3)
    throw std::invalid_argument("context_encode_2d: frames must be equal (3,H,W)");
  auto run = [&](const TensorT<S>& img) {
    auto h = img;
    for (const auto& b : w.blocks) h = spt_block(h, b);
    return h;
  };
  auto x1 = run(i1);
  auto x2 = run(i2);
  const int c = x1.dim(0), h = x1.dim(1), ww = x1.dim(2);
  return concat<S>({reshape(x1, Shape{c, 1, h, ww}), reshape(x2, Shape{c, 1, h, ww})}, 1);
}

}  // namespace sstm
