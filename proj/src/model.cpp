#include "sstm/model.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace sstm {

namespace {

std::string variant_name(Variant v) { return v == Variant::SSTM ? "sstm" : "sstm++"; }

Variant parse_variant(const std::string& s) {
  if (s == "sstm") return Variant::SSTM;
  if (s == "sstm++") return Variant::SSTMPP;
  throw std::invalid_argument("config: unknown variant '" + s + "'");
}

template <typename T>
T parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, T>> table,
             const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  throw std::invalid_argument(std::string("config: unknown ") + what + " '" + s + "'");
}

int parse_int(const std::string& s) {
  size_t pos = 0;
  const int v = std::stoi(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("config: bad integer '" + s + "'");
  return v;
}

}  // namespace

ModelConfig ModelConfig::defaults(Variant v) {
  ModelConfig c;
  c.variant = v;
  if (v == Variant::SSTMPP) {
    c.use_attention = true;
    c.use_warp_errors = true;
    c.context_mode = ContextMode::Conv2dTwin;
  }
  return c;
}

ModelConfig ModelConfig::tiny(Variant v) {
  ModelConfig c = defaults(v);
  c.iters = 4;
  c.r_interval = 2;
  c.feat_ch = 64;
  c.ctx_ch = 32;
  c.hidden_ch = 32;
  c.motion_ch = 32;
  c.dk = 32;
  return c;
}

void ModelConfig::validate() const {
  if ((variant == Variant::SSTMPP) != use_attention)
    throw std::invalid_argument("config: variant and use_attention disagree");
  if (iters < 1) throw std::invalid_argument("config: iters must be >= 1");
  if (r_interval < 1) throw std::invalid_argument("config: r_interval must be >= 1");
  if (!(gamma > 0.0f && gamma <= 1.0f)) throw std::invalid_argument("config: gamma must be in (0,1]");
  if (feat_ch < 8 || ctx_ch < 4 || hidden_ch < 4 || motion_ch < 4 || dk < 4)
    throw std::invalid_argument("config: channel widths too small");
  if (attn_heads < 1 || dk % attn_heads != 0 || motion_ch % attn_heads != 0)
    throw std::invalid_argument("config: attention heads must divide dk and motion_ch");
  lookup_spec().validate();
}

FeatureWidths ModelConfig::feature_widths() const {
  return {std::max(8, feat_ch / 4), std::max(8, feat_ch * 3 / 8), std::max(8, feat_ch / 2),
          feat_ch};
}

ContextWidths ModelConfig::context_widths() const {
  return {std::max(4, ctx_ch * 3 / 8), std::max(4, ctx_ch / 2), std::max(4, ctx_ch * 3 / 4),
          ctx_ch};
}

LookupSpec ModelConfig::lookup_spec() const {
  return {corr_levels, corr_radius, corr_paper_profile};
}

int ModelConfig::gru_input_ch() const {
  return ctx_ch + (use_attention ? 2 : 1) * motion_ch;
}

std::string ModelConfig::to_kv() const {
  std::ostringstream os;
  os << "variant=" << variant_name(variant) << "\n";
  os << "iters=" << iters << "\n";
  os << "r_interval=" << r_interval << "\n";
  os << "gamma=" << gamma << "\n";
  os << "warm_start=" << (warm_start == WarmStart::None ? "none" : "shift_pair") << "\n";
  os << "context_mode=" << (context_mode == ContextMode::Conv3d ? "conv3d" : "conv2d_twin") << "\n";
  os << "use_attention=" << (use_attention ? 1 : 0) << "\n";
  os << "use_warp_errors=" << (use_warp_errors ? 1 : 0) << "\n";
  os << "feat_ch=" << feat_ch << "\n";
  os << "ctx_ch=" << ctx_ch << "\n";
  os << "hidden_ch=" << hidden_ch << "\n";
  os << "motion_ch=" << motion_ch << "\n";
  os << "dk=" << dk << "\n";
  os << "attn_heads=" << attn_heads << "\n";
  os << "corr_levels=" << corr_levels << "\n";
  os << "corr_radius=" << corr_radius << "\n";
  os << "corr_paper_profile=" << (corr_paper_profile ? 1 : 0) << "\n";
  os << "h0_mode=" << (h0_mode == H0Mode::Context ? "context" : "zeros") << "\n";
  os << "seed=" << seed << "\n";
  return os.str();
}

void ModelConfig::apply_kv_line(const std::string& key, const std::string& value) {
  if (key == "variant") variant = parse_variant(value);
  else if (key == "iters") iters = parse_int(value);
  else if (key == "r_interval") r_interval = parse_int(value);
  else if (key == "gamma") gamma = std::stof(value);
  else if (key == "warm_start")
    warm_start = parse_enum<WarmStart>(value, {{"none", WarmStart::None},
                                               {"shift_pair", WarmStart::ShiftPair}}, "warm_start");
  else if (key == "context_mode")
    context_mode = parse_enum<ContextMode>(value, {{"conv3d", ContextMode::Conv3d},
                                                   {"conv2d_twin", ContextMode::Conv2dTwin}},
                                           "context_mode");
  else if (key == "use_attention") use_attention = parse_int(value) != 0;
  else if (key == "use_warp_errors") use_warp_errors = parse_int(value) != 0;
  else if (key == "feat_ch") feat_ch = parse_int(value);
  else if (key == "ctx_ch") ctx_ch = parse_int(value);
  else if (key == "hidden_ch") hidden_ch = parse_int(value);
  else if (key == "motion_ch") motion_ch = parse_int(value);
  else if (key == "dk") dk = parse_int(value);
  else if (key == "attn_heads") attn_heads = parse_int(value);
  else if (key == "corr_levels") corr_levels = parse_int(value);
  else if (key == "corr_radius") corr_radius = parse_int(value);
  else if (key == "corr_paper_profile") corr_paper_profile = parse_int(value) != 0;
  else if (key == "h0_mode")
    h0_mode = parse_enum<H0Mode>(value, {{"context", H0Mode::Context}, {"zeros", H0Mode::Zeros}},
                                 "h0_mode");
  else if (key == "seed") seed = std::stoull(value);
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

ModelConfig ModelConfig::from_kv(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config: bad line '" + line + "'");
    c.apply_kv_line(line.substr(0, eq), line.substr(eq + 1));
  }
  c.validate();
  return c;
}

ModelWeights init_weights(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelWeights w;
  Rng rng(seed);
  w.fnet = make_feature_encoder(w.reg, "fnet", cfg.feature_widths(), rng);
  if (cfg.context_mode == ContextMode::Conv3d)
    w.cnet3 = make_context_encoder_3d(w.reg, "cnet", cfg.context_widths(), rng);
  else
    w.cnet2 = make_context_encoder_2d(w.reg, "cnet", cfg.context_widths(), rng);
  if (cfg.h0_mode == H0Mode::Context)
    w.h0conv = make_conv(w.reg, "h0", Axis::X, cfg.hidden_ch, cfg.ctx_ch, 1, rng);
  w.menc = make_motion_encoder(w.reg, "menc", cfg.lookup_spec().channels(), cfg.motion_ch,
                               cfg.use_warp_errors, rng);
  if (cfg.use_attention)
    w.attn = make_attention(w.reg, "attn", cfg.ctx_ch, cfg.motion_ch, cfg.dk, rng, cfg.attn_heads);
  w.gru = make_gru(w.reg, "gru", cfg.hidden_ch, cfg.gru_input_ch(), rng);
  w.fhead = make_flow_head(w.reg, "head", cfg.hidden_ch, rng);
  return w;
}

Tensor pad_to_multiple8(const Tensor& img) {
  if (img.rank() != 3) throw std::invalid_argument("pad_to_multiple8: image must be (C,H,W)");
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const int hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
  if (hp == h && wp == w) return img;
  Tensor out(Shape{c, hp, wp});
  for (int ci = 0; ci < c; ++ci)
    for (int i = 0; i < hp; ++i)
      for (int j = 0; j < wp; ++j)
        out.at(ci, i, j) = img.at(ci, std::min(i, h - 1), std::min(j, w - 1));
  return out;
}

Tensor normalize_image(const Tensor& img) {
  Tensor out(img.shape());
  for (int64_t i = 0; i < img.size(); ++i) out.data()[i] = img.data()[i] * 2.0f - 1.0f;
  return out;
}

FlowPair warm_start_init(const FlowPair* prev, WarmStart mode, int h8, int w8) {
  FlowPair f;
  f.f1 = Tensor(Shape{2, h8, w8}, 0.0f);
  f.f2 = Tensor(Shape{2, h8, w8}, 0.0f);
  f.res = FlowRes::Eighth;
  if (mode == WarmStart::ShiftPair && prev != nullptr) {
    require_res(*prev, FlowRes::Eighth, "warm_start_init");
    if (prev->f2.shape() != f.f1.shape())
      throw std::invalid_argument("warm_start_init: previous flow shape mismatch");
    f.f1 = prev->f2.clone();
  }
  return f;
}

namespace {

Tensor window_of(const Tensor& x, int t) {
  return reshape(slice(x, 1, t, 1), Shape{x.dim(0), x.dim(2), x.dim(3)});
}

Tensor stack_windows(const Tensor& a, const Tensor& b) {
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  return concat<float>({reshape(a, Shape{c, 1, h, w}), reshape(b, Shape{c, 1, h, w})}, 1);
}

}  // namespace

ForwardResult forward(const std::array<Tensor, 3>& frames, const ModelWeights& w,
                      const ModelConfig& cfg, const FlowPair* warm_prev) {
  cfg.validate();
  for (const auto& f : frames) {
    if (f.rank() != 3 || f.dim(0) != 3) throw std::invalid_argument("forward: frames must be (3,H,W)");
    if (f.shape() != frames[0].shape()) throw std::invalid_argument("forward: frame shapes disagree");
    if (!all_finite(f)) throw std::invalid_argument("forward: non-finite input");
  }
  const int h_in = frames[0].dim(1), w_in = frames[0].dim(2);

  std::array<Tensor, 3> imgs;
  for (int i = 0; i < 3; ++i) imgs[size_t(i)] = normalize_image(pad_to_multiple8(frames[size_t(i)]));
  const int hp = imgs[0].dim(1), wp = imgs[0].dim(2);
  const int h8 = hp / 8, w8 = wp / 8;

  std::array<Tensor, 3> fmaps;
  for (int i = 0; i < 3; ++i) fmaps[size_t(i)] = feature_encode(imgs[size_t(i)], w.fnet);

  Tensor context;
  if (cfg.context_mode == ContextMode::Conv3d) {
    std::vector<Tensor> slabs;
    for (int i = 0; i < 3; ++i)
      slabs.push_back(reshape(imgs[size_t(i)], Shape{3, 1, hp, wp}));
    context = context_encode_3d(concat<float>(slabs, 1), w.cnet3);
  } else {
    context = context_encode_2d(imgs[0], imgs[1], w.cnet2);
  }

  Tensor h;
  if (cfg.h0_mode == H0Mode::Context)
    h = tanh(apply_conv(context, w.h0conv));
  else
    h = Tensor(Shape{cfg.hidden_ch, 2, h8, w8}, 0.0f);

  const LookupSpec spec = cfg.lookup_spec();
  auto pyr1 = build_pyramid(corr_all_pairs(fmaps[0], fmaps[1]), spec.levels);
  auto pyr2 = build_pyramid(corr_all_pairs(fmaps[1], fmaps[2]), spec.levels);

  FlowPair flow = warm_start_init(warm_prev, cfg.warm_start, h8, w8);

  ForwardResult result;
  std::vector<Tensor> residual_hist{h};  // post-residual states, index = step
  for (int n = 1; n <= cfg.iters; ++n) {
    auto c1 = lookup(pyr1, flow.f1, spec);
    auto c2 = lookup(pyr2, flow.f2, spec);
    auto corr = stack_windows(c1, c2);

    std::optional<Tensor> errs;
    if (cfg.use_warp_errors) errs = brightness_errors(fmaps[0], fmaps[1], fmaps[2], flow);
    auto motion = motion_encode(corr, flow, errs, w.menc);

    Tensor x;
    if (cfg.use_attention) {
      auto y1 = attend(window_of(context, 0), window_of(motion, 0), w.attn);
      auto y2 = attend(window_of(context, 1), window_of(motion, 1), w.attn);
      x = aggregate_gru_input(context, stack_windows(y1, y2), motion);
    } else {
      x = concat<float>({context, motion}, 0);
    }

    auto [h_new, trace] = gru_step(h, x, w.gru);
    const Tensor& saved = residual_hist[size_t(n >= cfg.r_interval ? n - cfg.r_interval : 0)];
    Tensor enriched = residual_hidden(n, cfg.r_interval, h_new, saved);
    residual_hist.push_back(enriched);
    h = h_new;  // recurrence carries the gated state; the residual sum feeds the head

    auto [d1, d2] = flow_head(enriched, w.fhead);
    flow.f1 = add(flow.f1, d1);
    flow.f2 = add(flow.f2, d2);

    FlowPair full = upsample_flow(flow);
    if (hp != h_in || wp != w_in) {
      full.f1 = slice(slice(full.f1, 1, 0, h_in), 2, 0, w_in);
      full.f2 = slice(slice(full.f2, 1, 0, h_in), 2, 0, w_in);
    }
    result.flows.push_back(full);
  }

  result.final_eighth.f1 = flow.f1.clone();
  result.final_eighth.f2 = flow.f2.clone();
  result.final_eighth.res = FlowRes::Eighth;
  return result;
}

}  // namespace sstm
