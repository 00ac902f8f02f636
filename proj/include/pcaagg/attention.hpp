#pragma once
// The two aggregation primitives over the cost embedding V[H,W,N,C]:
//  - spatial aggregation: per class, one pre-norm transformer block with
//    non-overlapping window multi-head self-attention over the H x W grid;
//  - class aggregation: per pixel, the same block shape with kernelized
//    linear attention (feature map elu+1) over the N class tokens;
// plus the serial (composition) and parallel (independent) wirings.

#include "pcaagg/nn.hpp"
#include "pcaagg/param_store.hpp"

namespace pcaagg {

struct AttentionConfig {
  int64_t heads = 4;
  int64_t window = 4;
  bool residuals = true;

  void validate(int64_t H, int64_t W, int64_t C) const {
    if (heads < 1 || C % heads != 0)
      throw ConfigError("attention: C=" + std::to_string(C) + " not divisible by heads=" +
                        std::to_string(heads));
    if (window < 1 || H % window != 0 || W % window != 0)
      throw ConfigError("attention: window=" + std::to_string(window) +
                        " must divide H=" + std::to_string(H) + " and W=" + std::to_string(W));
  }
};

enum class AttnKind { WindowedSoftmax, Linear };

// Parameter paths under `prefix`: ln1.{gamma,beta}, qkv.{weight,bias},
// proj.{weight,bias}, ln2.{gamma,beta}, mlp.w1.{weight,bias},
// mlp.w2.{weight,bias}. MLP hidden width is 2C.
template <typename T>
void register_transformer_block(ParamStore<T>& store, const std::string& prefix, int64_t C,
                                uint64_t seed) {
  register_constant(store, prefix + "ln1.gamma", {C}, T(1));
  register_constant(store, prefix + "ln1.beta", {C}, T(0));
  register_xavier(store, prefix + "qkv.weight", {C, 3 * C}, C, 3 * C, seed);
  register_constant(store, prefix + "qkv.bias", {3 * C}, T(0));
  register_xavier(store, prefix + "proj.weight", {C, C}, C, C, seed);
  register_constant(store, prefix + "proj.bias", {C}, T(0));
  register_constant(store, prefix + "ln2.gamma", {C}, T(1));
  register_constant(store, prefix + "ln2.beta", {C}, T(0));
  register_xavier(store, prefix + "mlp.w1.weight", {C, 2 * C}, C, 2 * C, seed);
  register_constant(store, prefix + "mlp.w1.bias", {2 * C}, T(0));
  register_xavier(store, prefix + "mlp.w2.weight", {2 * C, C}, 2 * C, C, seed);
  register_constant(store, prefix + "mlp.w2.bias", {C}, T(0));
}

namespace detail {

// x[B,S,C] -> [B,heads,S,dh] for one of the q/k/v thirds.
template <typename T>
DiffNode<T> split_heads(DiffNode<T> qkv, int third, int64_t B, int64_t S, int64_t C,
                        int64_t heads) {
  DiffNode<T> part = slice(qkv, 2, third * C, C);
  DiffNode<T> r = reshape(part, {B, S, heads, C / heads});
  return permute(r, {0, 2, 1, 3});
}

template <typename T>
DiffNode<T> merge_heads(DiffNode<T> x, int64_t B, int64_t S, int64_t C) {
  return reshape(permute(x, {0, 2, 1, 3}), {B, S, C});
}

}  // namespace detail

// Multi-head attention core on x[B,S,C]; softmax or linear (elu+1 kernel).
template <typename T>
DiffNode<T> multihead_attention(DiffNode<T> x, ParamBinding<T>& params,
                                const std::string& prefix, int64_t heads, AttnKind kind) {
  const Dims& d = x.dims();
  int64_t B = d[0], S = d[1], C = d[2];
  int64_t dh = C / heads;
  DiffNode<T> qkv = linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"]);
  DiffNode<T> q = detail::split_heads(qkv, 0, B, S, C, heads);
  DiffNode<T> k = detail::split_heads(qkv, 1, B, S, C, heads);
  DiffNode<T> v = detail::split_heads(qkv, 2, B, S, C, heads);

  DiffNode<T> ctx{};
  if (kind == AttnKind::WindowedSoftmax) {
    DiffNode<T> scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), T(1.0 / std::sqrt(double(dh))));
    DiffNode<T> attn = softmax(scores, 3);
    ctx = matmul(attn, v);
  } else {
    // phi(q) (phi(k)^T v) / (phi(q) . sum phi(k)); phi > 0 keeps the
    // denominator strictly positive.
    DiffNode<T> fq = elu_plus_one(q);
    DiffNode<T> fk = elu_plus_one(k);
    DiffNode<T> kv = matmul(permute(fk, {0, 1, 3, 2}), v);       // [B,h,dh,dh]
    DiffNode<T> numer = matmul(fq, kv);                          // [B,h,S,dh]
    DiffNode<T> ksum = sum(fk, 2, true);                         // [B,h,1,dh]
    DiffNode<T> denom = matmul(fq, permute(ksum, {0, 1, 3, 2})); // [B,h,S,1]
    ctx = div(numer, denom);
  }
  DiffNode<T> merged = detail::merge_heads(ctx, B, S, C);
  return linear(merged, params[prefix + "proj.weight"], params[prefix + "proj.bias"]);
}

// Pre-norm transformer block on x[B,S,C]:
//   x + attn(LN1(x)), then + MLP(LN2(.)) with GeLU and hidden 2C.
template <typename T>
DiffNode<T> transformer_block(DiffNode<T> x, ParamBinding<T>& params, const std::string& prefix,
                              int64_t heads, AttnKind kind, bool residuals) {
  DiffNode<T> h1 = layer_norm(x, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"]);
  DiffNode<T> attn = multihead_attention(h1, params, prefix, heads, kind);
  DiffNode<T> x1 = residuals ? add(x, attn) : attn;
  DiffNode<T> h2 = layer_norm(x1, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"]);
  DiffNode<T> m1 = gelu(linear(h2, params[prefix + "mlp.w1.weight"], params[prefix + "mlp.w1.bias"]));
  DiffNode<T> m2 = linear(m1, params[prefix + "mlp.w2.weight"], params[prefix + "mlp.w2.bias"]);
  return residuals ? add(x1, m2) : m2;
}

// Spatial aggregation: class index is batch; windowed softmax attention over
// the grid. v[H,W,N,C] -> [H,W,N,C].
template <typename T>
DiffNode<T> spatial_aggregate(DiffNode<T> v, ParamBinding<T>& params, const std::string& prefix,
                              const AttentionConfig& cfg) {
  const Dims& d = v.dims();
  if (d.size() != 4) throw ShapeError("spatial_aggregate: expected V[H,W,N,C]");
  int64_t H = d[0], W = d[1], N = d[2], C = d[3];
  cfg.validate(H, W, C);
  int64_t win = cfg.window;
  int64_t nh = H / win, nw = W / win;

  DiffNode<T> x = permute(v, {2, 0, 1, 3});                       // [N,H,W,C]
  x = reshape(x, {N, nh, win, nw, win, C});
  x = permute(x, {0, 1, 3, 2, 4, 5});                             // [N,nh,nw,win,win,C]
  x = reshape(x, {N * nh * nw, win * win, C});
  x = transformer_block(x, params, prefix, cfg.heads, AttnKind::WindowedSoftmax, cfg.residuals);
  x = reshape(x, {N, nh, nw, win, win, C});
  x = permute(x, {0, 1, 3, 2, 4, 5});                             // [N,nh,win,nw,win,C]
  x = reshape(x, {N, H, W, C});
  return permute(x, {1, 2, 0, 3});                                // [H,W,N,C]
}

// Class aggregation: pixel is batch; linear attention over the N class
// tokens. v[H,W,N,C] -> [H,W,N,C].
template <typename T>
DiffNode<T> class_aggregate(DiffNode<T> v, ParamBinding<T>& params, const std::string& prefix,
                            const AttentionConfig& cfg) {
  const Dims& d = v.dims();
  if (d.size() != 4) throw ShapeError("class_aggregate: expected V[H,W,N,C]");
  int64_t H = d[0], W = d[1], N = d[2], C = d[3];
  if (C % cfg.heads != 0) throw ConfigError("class_aggregate: C not divisible by heads");
  DiffNode<T> x = reshape(v, {H * W, N, C});
  x = transformer_block(x, params, prefix, cfg.heads, AttnKind::Linear, cfg.residuals);
  return reshape(x, {H, W, N, C});
}

template <typename T>
struct StreamPairNodes {
  DiffNode<T> spatial;   // context stream
  DiffNode<T> semantic;  // class stream
};

// Serial wiring: class aggregation consumes the spatially aggregated volume.
template <typename T>
DiffNode<T> serial_block(DiffNode<T> v, ParamBinding<T>& params, const std::string& spatial_prefix,
                         const std::string& semantic_prefix, const AttentionConfig& cfg) {
  return class_aggregate(spatial_aggregate(v, params, spatial_prefix, cfg), params,
                         semantic_prefix, cfg);
}

// Parallel wiring: both aggregations see the same input; the parameter sets
// are disjoint.
template <typename T>
StreamPairNodes<T> parallel_block(DiffNode<T> v, ParamBinding<T>& params,
                                  const std::string& spatial_prefix,
                                  const std::string& semantic_prefix,
                                  const AttentionConfig& cfg) {
  StreamPairNodes<T> out;
  out.spatial = spatial_aggregate(v, params, spatial_prefix, cfg);
  out.semantic = class_aggregate(v, params, semantic_prefix, cfg);
  return out;
}

}  // namespace pcaagg
