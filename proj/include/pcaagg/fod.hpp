#pragma once
// Stream decoupling: per-pixel cosine similarity between the two aggregation
// streams and the squared-similarity penalty that drives them toward
// orthogonality.

#include "pcaagg/attention.hpp"

namespace pcaagg {

enum class FodDetach { None, Spatial, Semantic };

// Per-pixel cosine similarity map M[H,W]. By default the pixel's feature
// vector is its flattened (class x channel) slice; with per_class set, a
// channel-only cosine is taken per (pixel, class) and averaged over classes.
template <typename T>
DiffNode<T> stream_similarity(const StreamPairNodes<T>& pair, bool per_class = false,
                              T eps = T(1e-8)) {
  const Dims& d = pair.spatial.dims();
  if (d.size() != 4 || pair.semantic.dims() != d)
    throw ShapeError("stream_similarity: expected matching [H,W,N,C] streams");
  int64_t H = d[0], W = d[1], N = d[2], C = d[3];
  if (!per_class) {
    DiffNode<T> b = reshape(pair.spatial, {H * W, N * C});
    DiffNode<T> e = reshape(pair.semantic, {H * W, N * C});
    DiffNode<T> m = sum(mul(normalize_l2(b, 1, eps), normalize_l2(e, 1, eps)), 1);
    return reshape(m, {H, W});
  }
  DiffNode<T> b = reshape(pair.spatial, {H * W * N, C});
  DiffNode<T> e = reshape(pair.semantic, {H * W * N, C});
  DiffNode<T> m = sum(mul(normalize_l2(b, 1, eps), normalize_l2(e, 1, eps)), 1);
  return mean(reshape(m, {H * W, N}), 1);
}

// Mean squared per-pixel similarity of one block, averaged uniformly over
// blocks. In [0,1]; zero iff the streams are pixelwise orthogonal.
template <typename T>
DiffNode<T> fod_loss(const std::vector<StreamPairNodes<T>>& pairs, bool per_class = false,
                     FodDetach detach_mode = FodDetach::None) {
  if (pairs.empty()) throw ShapeError("fod_loss: needs at least one stream pair");
  DiffNode<T> acc{};
  for (size_t i = 0; i < pairs.size(); ++i) {
    StreamPairNodes<T> p = pairs[i];
    if (detach_mode == FodDetach::Spatial) p.spatial = detach(p.spatial);
    if (detach_mode == FodDetach::Semantic) p.semantic = detach(p.semantic);
    DiffNode<T> m = stream_similarity(p, per_class);
    DiffNode<T> l = mean(mul(m, m));
    acc = i == 0 ? l : add(acc, l);
  }
  return scale(acc, T(1) / T(pairs.size()));
}

// Value-only mean |M_i| of one pair, for trace reporting.
template <typename T>
T mean_abs_similarity(const StreamPairNodes<T>& pair, bool per_class = false) {
  DiffNode<T> m = stream_similarity(pair, per_class);
  const Tensor<T>& mv = m.value();
  T s = 0;
  for (T x : mv.data) s += std::abs(x);
  return s / T(mv.numel());
}

}  // namespace pcaagg
