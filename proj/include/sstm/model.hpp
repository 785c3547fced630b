#pragma once

// End-to-end assembly of the two model variants plus the weight registry,
// warm-start initialization, and checkpointing. The model owns frame padding
// and resolution bookkeeping; the kernels stay shape-strict.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "sstm/attention.hpp"
#include "sstm/correlation.hpp"
#include "sstm/encoders.hpp"
#include "sstm/flowpair.hpp"
#include "sstm/params.hpp"
#include "sstm/update.hpp"

namespace sstm {

enum class Variant { SSTM, SSTMPP };
enum class WarmStart { None, ShiftPair };
enum class ContextMode { Conv3d, Conv2dTwin };
enum class H0Mode { Context, Zeros };

struct ModelConfig {
  Variant variant = Variant::SSTM;
  int iters = 12;       // tied-weight GRU refinement steps
  int r_interval = 3;   // residual hidden connection interval
  float gamma = 0.8f;   // loss decay
  WarmStart warm_start = WarmStart::None;
  ContextMode context_mode = ContextMode::Conv3d;
  bool use_attention = false;
  bool use_warp_errors = false;
  int feat_ch = 256;
  int ctx_ch = 128;
  int hidden_ch = 128;
  int motion_ch = 128;
  int dk = 128;
  int attn_heads = 1;
  int corr_levels = 4;
  int corr_radius = 4;
  bool corr_paper_profile = true;
  H0Mode h0_mode = H0Mode::Context;
  uint64_t seed = 0;

  static ModelConfig defaults(Variant v);
  // quarter widths, 4 iterations, r = 2: the desk-scale configuration
  static ModelConfig tiny(Variant v);

  void validate() const;
  std::string to_kv() const;
  static ModelConfig from_kv(const std::string& text);
  void apply_kv_line(const std::string& key, const std::string& value);

  FeatureWidths feature_widths() const;
  ContextWidths context_widths() const;
  LookupSpec lookup_spec() const;
  int gru_input_ch() const;
};

struct ModelWeights {
  ParamRegistry reg;
  FeatureEncoderW<float> fnet;
  ContextEncoder3dW<float> cnet3;
  ContextEncoder2dW<float> cnet2;
  ConvP<float> h0conv;
  AttentionW<float> attn;
  MotionEncoderW<float> menc;
  GruW<float> gru;
  FlowHeadW<float> fhead;
};

ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed);

struct ForwardResult {
  std::vector<FlowPair> flows;  // one upsampled, cropped pair per iteration
  FlowPair final_eighth;        // detached copy for warm-start chaining
};

ForwardResult forward(const std::array<Tensor, 3>& frames, const ModelWeights& w,
                      const ModelConfig& cfg, const FlowPair* warm_prev = nullptr);

// none -> zeros; shift_pair -> (previous f2, zeros). Falls back to zeros
// when there is no previous estimate.
FlowPair warm_start_init(const FlowPair* prev, WarmStart mode, int h8, int w8);

// Edge-replicated padding of a (3,H,W) image up to multiples of 8.
Tensor pad_to_multiple8(const Tensor& img);
// [0,1] pixel range to [-1,1].
Tensor normalize_image(const Tensor& img);

// Checkpoint file ("SSTMCKPT", version 1, CRC-32 footer); see README for the
// exact byte layout.
void save_checkpoint(const ModelWeights& w, const ModelConfig& cfg, const std::string& path);
std::pair<ModelWeights, ModelConfig> load_checkpoint(const std::string& path);

}  // namespace sstm
