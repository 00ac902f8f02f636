#pragma once
// Expert-driven fusion of the two aggregation streams: channel-concatenate,
// parse with Z independent expert blocks, learn per-location softmax
// coefficients over experts, and integrate as a convex combination. Includes
// the simpler fusion baselines used by the ablation harness.

#include "pcaagg/attention.hpp"
#include "pcaagg/nn.hpp"

namespace pcaagg {

enum class FuseMode { Epl, SingleConv, Average, Addition, ConvolutionFuse };

inline const char* to_string(FuseMode m) {
  switch (m) {
    case FuseMode::Epl: return "epl";
    case FuseMode::SingleConv: return "single-conv";
    case FuseMode::Average: return "average";
    case FuseMode::Addition: return "addition";
    case FuseMode::ConvolutionFuse: return "convolution-fuse";
  }
  return "?";
}

inline FuseMode fuse_mode_from_string(const std::string& s) {
  if (s == "epl") return FuseMode::Epl;
  if (s == "single-conv") return FuseMode::SingleConv;
  if (s == "average") return FuseMode::Average;
  if (s == "addition") return FuseMode::Addition;
  if (s == "convolution-fuse") return FuseMode::ConvolutionFuse;
  throw ConfigError("unknown fuse mode: " + s);
}

// Expert z: conv(2C->C, 1x1) -> batchnorm -> conv(C->C, 3x3) -> gelu.
// Mapper: conv(2C->C/4, 1x1) -> relu -> conv(C/4->Z, 1x1) -> softmax over Z.
// Parameter count for one instance, as registered below.
inline int64_t epl_parameter_count(int64_t C, int64_t Z) {
  int64_t expert = (2 * C * C + C) + 2 * C + (9 * C * C + C);
  int64_t mapper = (2 * C * (C / 4) + C / 4) + ((C / 4) * Z + Z);
  return Z * expert + mapper;
}

template <typename T>
void register_epl_experts(ParamStore<T>& store, const std::string& prefix, int64_t C, int64_t Z,
                          uint64_t seed) {
  for (int64_t z = 1; z <= Z; ++z) {
    std::string e = prefix + "expert" + std::to_string(z) + ".";
    register_xavier(store, e + "conv1.weight", {C, 2 * C, 1, 1}, 2 * C, C, seed);
    register_constant(store, e + "conv1.bias", {C}, T(0));
    register_constant(store, e + "bn.gamma", {C}, T(1));
    register_constant(store, e + "bn.beta", {C}, T(0));
    register_xavier(store, e + "conv2.weight", {C, C, 3, 3}, 9 * C, 9 * C, seed);
    register_constant(store, e + "conv2.bias", {C}, T(0));
  }
}

template <typename T>
void register_epl(ParamStore<T>& store, const std::string& prefix, int64_t C, int64_t Z,
                  uint64_t seed) {
  if (C % 4 != 0) throw ConfigError("epl: C must be divisible by 4 (mapper hidden width C/4)");
  register_epl_experts(store, prefix, C, Z, seed);
  std::string m = prefix + "mapper.";
  register_xavier(store, m + "conv1.weight", {C / 4, 2 * C, 1, 1}, 2 * C, C / 4, seed);
  register_constant(store, m + "conv1.bias", {C / 4}, T(0));
  register_xavier(store, m + "conv2.weight", {Z, C / 4, 1, 1}, C / 4, Z, seed);
  register_constant(store, m + "conv2.bias", {Z}, T(0));
}

template <typename T>
void register_fuse_conv(ParamStore<T>& store, const std::string& prefix, int64_t in_channels,
                        int64_t C, uint64_t seed) {
  register_xavier(store, prefix + "fuse.conv.weight", {C, in_channels, 1, 1}, in_channels, C,
                  seed);
  register_constant(store, prefix + "fuse.conv.bias", {C}, T(0));
}

// Channel concatenation, context stream first: [H,W,N,C]+[H,W,N,C] -> [H,W,N,2C].
template <typename T>
DiffNode<T> concat_streams(const StreamPairNodes<T>& pair) {
  if (pair.spatial.dims() != pair.semantic.dims())
    throw ShapeError("concat_streams: stream dims differ " + dims_str(pair.spatial.dims()) +
                     " vs " + dims_str(pair.semantic.dims()));
  return concat(std::vector<DiffNode<T>>{pair.spatial, pair.semantic}, 3);
}

namespace detail {
// [H,W,N,ch] -> [N,ch,H,W]: spatial kernels see H x W, classes fold into batch.
template <typename T>
DiffNode<T> to_conv_layout(DiffNode<T> x) {
  return permute(x, {2, 3, 0, 1});
}
template <typename T>
DiffNode<T> from_conv_layout(DiffNode<T> x) {
  return permute(x, {2, 3, 0, 1});
}
}  // namespace detail

// One expert over the concatenated feature a[H,W,N,2C] -> [H,W,N,C].
template <typename T>
DiffNode<T> expert_parse(DiffNode<T> a, ParamBinding<T>& params,
                         std::map<std::string, BatchNormState<T>>& bn_states,
                         const std::string& prefix, int64_t z, BnMode mode) {
  std::string e = prefix + "expert" + std::to_string(z) + ".";
  DiffNode<T> x = detail::to_conv_layout(a);
  DiffNode<T> h = conv2d(x, params[e + "conv1.weight"], params[e + "conv1.bias"]);
  h = batchnorm(h, params[e + "bn.gamma"], params[e + "bn.beta"], bn_states[e + "bn"], mode);
  h = conv2d(h, params[e + "conv2.weight"], params[e + "conv2.bias"]);
  h = gelu(h);
  return detail::from_conv_layout(h);
}

// Per-location softmax coefficients over experts: a[H,W,N,2C] -> [H,W,N,Z].
template <typename T>
DiffNode<T> coefficient_map(DiffNode<T> a, ParamBinding<T>& params, const std::string& prefix) {
  std::string m = prefix + "mapper.";
  DiffNode<T> x = detail::to_conv_layout(a);
  DiffNode<T> h = relu(conv2d(x, params[m + "conv1.weight"], params[m + "conv1.bias"]));
  h = conv2d(h, params[m + "conv2.weight"], params[m + "conv2.bias"]);
  return softmax(detail::from_conv_layout(h), 3);
}

// R(h,w,n,c) = sum_z P(h,w,n,z) * D_z(h,w,n,c): the coefficient broadcasts
// over the channel axis. Fixed z order keeps the reduction deterministic.
template <typename T>
DiffNode<T> integrate(const std::vector<DiffNode<T>>& experts, DiffNode<T> coefficients) {
  if (experts.empty()) throw ShapeError("integrate: no experts");
  const Dims& cd = coefficients.dims();
  if (cd.size() != 4 || cd[3] != int64_t(experts.size()))
    throw ShapeError("integrate: coefficient Z axis disagrees with expert count");
  DiffNode<T> acc{};
  for (size_t z = 0; z < experts.size(); ++z) {
    DiffNode<T> pz = slice(coefficients, 3, int64_t(z), 1);  // [H,W,N,1]
    DiffNode<T> term = mul(experts[z], pz);
    acc = z == 0 ? term : add(acc, term);
  }
  return acc;
}

template <typename T>
struct EplOutputs {
  DiffNode<T> fused;                      // [H,W,N,C]
  std::vector<DiffNode<T>> expert_outputs;
  DiffNode<T> coefficients;               // [H,W,N,Z]; only for FuseMode::Epl
  bool has_coefficients = false;
};

// Full expert-driven fusion: concat -> Z experts -> coefficients -> integrate.
template <typename T>
EplOutputs<T> epl_forward(const StreamPairNodes<T>& pair, ParamBinding<T>& params,
                          std::map<std::string, BatchNormState<T>>& bn_states,
                          const std::string& prefix, int64_t Z, BnMode mode) {
  EplOutputs<T> out;
  DiffNode<T> a = concat_streams(pair);
  out.expert_outputs.reserve(size_t(Z));
  for (int64_t z = 1; z <= Z; ++z)
    out.expert_outputs.push_back(expert_parse(a, params, bn_states, prefix, z, mode));
  out.coefficients = coefficient_map(a, params, prefix);
  out.has_coefficients = true;
  out.fused = integrate(out.expert_outputs, out.coefficients);
  return out;
}

// Ablation fusions. single-conv maps the concatenation directly; average and
// addition fuse expert outputs with fixed weights; convolution-fuse stacks
// expert outputs channelwise through a 1x1 convolution.
template <typename T>
EplOutputs<T> baseline_fuse(const StreamPairNodes<T>& pair, ParamBinding<T>& params,
                            std::map<std::string, BatchNormState<T>>& bn_states,
                            const std::string& prefix, int64_t Z, FuseMode mode, BnMode bn_mode) {
  EplOutputs<T> out;
  DiffNode<T> a = concat_streams(pair);
  if (mode == FuseMode::SingleConv) {
    DiffNode<T> x = detail::to_conv_layout(a);
    DiffNode<T> h =
        conv2d(x, params[prefix + "fuse.conv.weight"], params[prefix + "fuse.conv.bias"]);
    out.fused = detail::from_conv_layout(h);
    return out;
  }
  out.expert_outputs.reserve(size_t(Z));
  for (int64_t z = 1; z <= Z; ++z)
    out.expert_outputs.push_back(expert_parse(a, params, bn_states, prefix, z, bn_mode));
  switch (mode) {
    case FuseMode::Average: {
      DiffNode<T> acc = out.expert_outputs[0];
      for (size_t z = 1; z < out.expert_outputs.size(); ++z)
        acc = add(acc, out.expert_outputs[z]);
      out.fused = scale(acc, T(1) / T(Z));
      break;
    }
    case FuseMode::Addition: {
      DiffNode<T> acc = out.expert_outputs[0];
      for (size_t z = 1; z < out.expert_outputs.size(); ++z)
        acc = add(acc, out.expert_outputs[z]);
      out.fused = acc;
      break;
    }
    case FuseMode::ConvolutionFuse: {
      DiffNode<T> stacked = concat(out.expert_outputs, 3);  // [H,W,N,Z*C]
      DiffNode<T> x = detail::to_conv_layout(stacked);
      DiffNode<T> h =
          conv2d(x, params[prefix + "fuse.conv.weight"], params[prefix + "fuse.conv.bias"]);
      out.fused = detail::from_conv_layout(h);
      break;
    }
    default:
      throw ConfigError("baseline_fuse: unknown mode");
  }
  return out;
}

}  // namespace pcaagg
