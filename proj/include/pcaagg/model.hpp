#pragma once
// End-to-end model: cost volume -> channel embedding -> stacked aggregation
// blocks (serial or parallel wiring; parallel blocks fuse their streams and
// the fused embedding feeds the next block) -> linear decoder -> bilinear
// upsample to label resolution.

#include "pcaagg/costvolume.hpp"
#include "pcaagg/epl.hpp"
#include "pcaagg/fod.hpp"

namespace pcaagg {

enum class Architecture { Serial, Parallel };

inline const char* to_string(Architecture a) {
  return a == Architecture::Serial ? "serial" : "parallel";
}
inline Architecture architecture_from_string(const std::string& s) {
  if (s == "serial") return Architecture::Serial;
  if (s == "parallel") return Architecture::Parallel;
  throw ConfigError("unknown architecture: " + s);
}

inline const char* to_string(FodDetach d) {
  switch (d) {
    case FodDetach::None: return "none";
    case FodDetach::Spatial: return "spatial";
    case FodDetach::Semantic: return "semantic";
  }
  return "?";
}
inline FodDetach fod_detach_from_string(const std::string& s) {
  if (s == "none") return FodDetach::None;
  if (s == "spatial") return FodDetach::Spatial;
  if (s == "semantic") return FodDetach::Semantic;
  throw ConfigError("unknown fod_detach: " + s);
}

struct ModelConfig {
  int64_t height = 16;
  int64_t width = 16;
  int64_t num_classes = 8;
  int64_t channels = 64;       // aggregation width C
  int64_t enc_channels = 32;   // encoder width (distinct from C)
  int64_t experts = 4;         // Z
  int64_t num_blocks = 2;
  Architecture architecture = Architecture::Parallel;
  FuseMode fuse = FuseMode::Epl;
  double lambda = 0.01;        // weight of the orthogonalization penalty
  AttentionConfig attention;
  int64_t upsample = 4;
  bool fod_per_class = false;
  FodDetach fod_detach = FodDetach::None;
  uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("model." + field + ": " + why);
    };
    if (height < 1) fail("height", "must be >= 1");
    if (width < 1) fail("width", "must be >= 1");
    if (num_classes < 2) fail("num_classes", "must be >= 2");
    if (channels < 4) fail("channels", "must be >= 4");
    if (enc_channels < 1) fail("enc_channels", "must be >= 1");
    if (experts < 1) fail("experts", "must be >= 1");
    if (num_blocks < 1) fail("num_blocks", "must be >= 1");
    if (lambda < 0) fail("lambda", "must be >= 0");
    if (upsample < 1) fail("upsample", "must be >= 1");
    if (attention.heads < 1 || channels % attention.heads != 0)
      fail("heads", "must divide channels");
    if (attention.window < 1 || height % attention.window != 0 ||
        width % attention.window != 0)
      fail("window", "must divide height and width");
    if (architecture == Architecture::Parallel &&
        (fuse == FuseMode::Epl) && channels % 4 != 0)
      fail("channels", "must be divisible by 4 for the coefficient mapper");
  }
};

template <typename T>
struct ForwardResult {
  DiffNode<T> logits;                         // [U*H, U*W, N]
  DiffNode<T> cost_volume;                    // [H,W,N]
  DiffNode<T> embedding;                      // [H,W,N,C]
  std::vector<StreamPairNodes<T>> pairs;      // per block
  std::vector<std::vector<DiffNode<T>>> expert_outputs;  // per block (may be empty)
};

template <typename T>
class Model {
 public:
  ModelConfig cfg;
  ParamStore<T> params;
  std::map<std::string, BatchNormState<T>> bn_states;

  static Model init(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    uint64_t seed = cfg.seed;
    int64_t C = cfg.channels;
    register_xavier(m.params, "embed.conv.weight", {C, 1, 1, 1}, 1, C, seed);
    register_constant(m.params, "embed.conv.bias", {C}, T(0));
    for (int64_t n = 1; n <= cfg.num_blocks; ++n) {
      std::string b = "block" + std::to_string(n) + ".";
      register_transformer_block(m.params, b + "spatial.", C, seed);
      register_transformer_block(m.params, b + "semantic.", C, seed);
      if (cfg.architecture == Architecture::Parallel) {
        switch (cfg.fuse) {
          case FuseMode::Epl:
            register_epl(m.params, b + "epl.", C, cfg.experts, seed);
            break;
          case FuseMode::SingleConv:
            register_fuse_conv(m.params, b + "epl.", 2 * C, C, seed);
            break;
          case FuseMode::Average:
          case FuseMode::Addition:
            register_epl_experts(m.params, b + "epl.", C, cfg.experts, seed);
            break;
          case FuseMode::ConvolutionFuse:
            register_epl_experts(m.params, b + "epl.", C, cfg.experts, seed);
            register_fuse_conv(m.params, b + "epl.", cfg.experts * C, C, seed);
            break;
        }
      }
    }
    register_xavier(m.params, "decoder.weight", {C, 1}, C, 1, seed);
    register_constant(m.params, "decoder.bias", {1}, T(0));
    return m;
  }

  // Forward from encoder-output nodes (lets tests attach gradients to them).
  ForwardResult<T> forward(Graph<T>& g, ParamBinding<T>& p, DiffNode<T> visual,
                           DiffNode<T> text, BnMode bn_mode) {
    ForwardResult<T> out;
    out.cost_volume = build_cost_volume(visual, text);
    out.embedding =
        embed_cost_volume(out.cost_volume, p["embed.conv.weight"], p["embed.conv.bias"]);
    DiffNode<T> v = out.embedding;
    for (int64_t n = 1; n <= cfg.num_blocks; ++n) {
      std::string b = "block" + std::to_string(n) + ".";
      if (cfg.architecture == Architecture::Serial) {
        DiffNode<T> phi = spatial_aggregate(v, p, b + "spatial.", cfg.attention);
        DiffNode<T> gamma = class_aggregate(phi, p, b + "semantic.", cfg.attention);
        out.pairs.push_back({phi, gamma});
        out.expert_outputs.emplace_back();
        v = gamma;
      } else {
        StreamPairNodes<T> pair =
            parallel_block(v, p, b + "spatial.", b + "semantic.", cfg.attention);
        out.pairs.push_back(pair);
        EplOutputs<T> fused =
            cfg.fuse == FuseMode::Epl
                ? epl_forward(pair, p, bn_states, b + "epl.", cfg.experts, bn_mode)
                : baseline_fuse(pair, p, bn_states, b + "epl.", cfg.experts, cfg.fuse, bn_mode);
        std::vector<DiffNode<T>> dumps = fused.expert_outputs;
        out.expert_outputs.push_back(std::move(dumps));
        v = fused.fused;
      }
    }
    // Linear readout C -> 1 per location, then bilinear upsample.
    int64_t H = cfg.height, W = cfg.width, N = cfg.num_classes;
    DiffNode<T> low = linear(v, p["decoder.weight"], p["decoder.bias"]);  // [H,W,N,1]
    low = reshape(low, {H, W, N});
    out.logits = cfg.upsample == 1 ? low : upsample_bilinear(low, cfg.upsample);
    return out;
  }

  ForwardResult<T> forward(Graph<T>& g, ParamBinding<T>& p, const SyntheticTask<T>& task,
                           BnMode bn_mode) {
    if (task.height() != cfg.height || task.width() != cfg.width ||
        task.num_classes() != cfg.num_classes ||
        task.text.dims[1] != cfg.enc_channels)
      throw ConfigError("forward: task dims do not match model config");
    if (task.params.upsample != cfg.upsample)
      throw ConfigError("forward: task upsample factor does not match model config");
    return forward(g, p, g.constant(task.visual), g.constant(task.text), bn_mode);
  }

  bool bn_ready() const {
    for (const auto& [k, s] : bn_states)
      if (!s.initialized) return false;
    return true;
  }
};

// Supervised objective: mean per-pixel cross-entropy over non-ignored pixels
// of logits[UH,UW,N] against the label map.
template <typename T>
DiffNode<T> supervised_loss(DiffNode<T> logits, const std::vector<int>& labels,
                            int ignore = kIgnoreLabel) {
  const Dims& d = logits.dims();
  if (d.size() != 3) throw ShapeError("supervised_loss: expected logits[H,W,N]");
  return cross_entropy_masked(reshape(logits, {d[0] * d[1], d[2]}), labels, ignore);
}

template <typename T>
DiffNode<T> total_loss(DiffNode<T> l_sup, DiffNode<T> l_od, T lambda) {
  if (lambda < T(0)) throw ConfigError("total_loss: lambda must be >= 0");
  return add(l_sup, scale(l_od, lambda));
}

}  // namespace pcaagg
