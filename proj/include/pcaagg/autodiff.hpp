#pragma once
// Reverse-mode automatic differentiation over Tensor<T>.
//
// A Graph is a tape: nodes are appended in evaluation order, so creation
// order is a topological order and the backward pass is a single reverse
// sweep with a fixed, deterministic accumulation order. DiffNode is a
// lightweight handle into the tape. Leaves carry no provenance; every other
// node stores the closure that replays its chain rule.

#include <deque>
#include <functional>
#include <utility>

#include "pcaagg/tensor.hpp"

namespace pcaagg {

template <typename T>
class Graph;

template <typename T>
struct DiffNode {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return graph->value(id); }
  Tensor<T> grad() const { return graph->grad_or_zero(id); }
  const Dims& dims() const { return value().dims; }
  int64_t numel() const { return value().numel(); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

template <typename T>
class Graph {
 public:
  using BackFn = std::function<void(Graph&, int self)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    const char* op = "leaf";
    BackFn backward;  // empty for leaves
  };

  DiffNode<T> leaf(Tensor<T> v, bool requires_grad = false) {
    return make(std::move(v), requires_grad, "leaf", BackFn());
  }
  DiffNode<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

  DiffNode<T> make(Tensor<T> v, bool requires_grad, const char* op, BackFn back) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    n.op = op;
    n.backward = std::move(back);
    nodes_.push_back(std::move(n));
    return DiffNode<T>{this, int(nodes_.size()) - 1};
  }

  const Tensor<T>& value(int id) const { return nodes_[size_t(id)].value; }
  bool requires_grad(int id) const { return nodes_[size_t(id)].requires_grad; }
  const char* op(int id) const { return nodes_[size_t(id)].op; }
  int size() const { return int(nodes_.size()); }

  const Tensor<T>& grad(int id) const { return nodes_[size_t(id)].grad; }
  Tensor<T> grad_or_zero(int id) const {
    const Node& n = nodes_[size_t(id)];
    if (n.has_grad) return n.grad;
    return n.value.dims.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>::zeros(n.value.dims);
  }

  // Accumulate g into node id's gradient. g must already have the node's dims.
  void accumulate(int id, const Tensor<T>& g) {
    Node& n = nodes_[size_t(id)];
    if (!n.requires_grad) return;
    if (g.dims != n.value.dims)
      throw ShapeError(std::string("gradient dims ") + dims_str(g.dims) +
                       " do not match value dims " + dims_str(n.value.dims));
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      for (size_t i = 0; i < n.grad.data.size(); ++i) n.grad.data[i] += g.data[i];
    }
  }

  // Reverse sweep from a scalar root. One call per graph.
  void backward(DiffNode<T> root) {
    if (root.graph != this) throw ShapeError("backward: node from another graph");
    Node& r = nodes_[size_t(root.id)];
    if (r.value.numel() != 1) throw ShapeError("backward: root is not scalar");
    if (backward_done_) throw ShapeError("backward: already run on this graph");
    backward_done_ = true;
    r.grad = r.value.dims.empty() ? Tensor<T>::scalar(T(1))
                                  : Tensor<T>::full(r.value.dims, T(1));
    r.has_grad = true;
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (n.has_grad && n.requires_grad && n.backward) n.backward(*this, id);
    }
  }

 private:
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-dimension broadcasting
// ---------------------------------------------------------------------------

enum class EwOp { Add, Sub, Mul, Div };

namespace detail {

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& t, const Dims& target) {
  if (t.dims == target) return t;
  Tensor<T> out(target.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>::zeros(target));
  Dims st = broadcast_strides(t.dims, target);
  Dims zero(target.size(), 0);
  for_each_broadcast(target, st, zero,
                     [&](int64_t i, int64_t off, int64_t) { out.data[size_t(i)] = t.data[size_t(off)]; });
  return out;
}

template <typename T, typename F>
Tensor<T> ew_apply(const Tensor<T>& a, const Tensor<T>& b, const Dims& out_dims, F&& f) {
  Tensor<T> out(out_dims.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>::zeros(out_dims));
  if (a.dims == b.dims && a.dims == out_dims) {
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
  }
  Dims sa = broadcast_strides(a.dims, out_dims);
  Dims sb = broadcast_strides(b.dims, out_dims);
  for_each_broadcast(out_dims, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
    out.data[size_t(i)] = f(a.data[size_t(oa)], b.data[size_t(ob)]);
  });
  return out;
}

}  // namespace detail

template <typename T>
DiffNode<T> elementwise(EwOp op, DiffNode<T> a, DiffNode<T> b) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const char* name = op == EwOp::Add   ? "add"
                     : op == EwOp::Sub ? "sub"
                     : op == EwOp::Mul ? "mul"
                                       : "div";
  Dims od = detail::broadcast_dims(av.dims, bv.dims, name);
  if (op == EwOp::Div) {
    for (T x : bv.data)
      if (std::abs(x) < T(1e-12))
        throw DomainError("div: divisor magnitude below 1e-12");
  }
  Tensor<T> out;
  switch (op) {
    case EwOp::Add:
      out = detail::ew_apply(av, bv, od, [](T x, T y) { return x + y; });
      break;
    case EwOp::Sub:
      out = detail::ew_apply(av, bv, od, [](T x, T y) { return x - y; });
      break;
    case EwOp::Mul:
      out = detail::ew_apply(av, bv, od, [](T x, T y) { return x * y; });
      break;
    case EwOp::Div:
      out = detail::ew_apply(av, bv, od, [](T x, T y) { return x / y; });
      break;
  }
  bool req = a.requires_grad() || b.requires_grad();
  return g.make(std::move(out), req, name, [op, aid = a.id, bid = b.id](Graph<T>& gr, int self) {
    const Tensor<T>& go = gr.grad(self);
    const Tensor<T>& av2 = gr.value(aid);
    const Tensor<T>& bv2 = gr.value(bid);
    switch (op) {
      case EwOp::Add:
        if (gr.requires_grad(aid)) gr.accumulate(aid, detail::reduce_to(go, av2.dims));
        if (gr.requires_grad(bid)) gr.accumulate(bid, detail::reduce_to(go, bv2.dims));
        break;
      case EwOp::Sub:
        if (gr.requires_grad(aid)) gr.accumulate(aid, detail::reduce_to(go, av2.dims));
        if (gr.requires_grad(bid)) {
          Tensor<T> neg = go;
          for (T& x : neg.data) x = -x;
          gr.accumulate(bid, detail::reduce_to(neg, bv2.dims));
        }
        break;
      case EwOp::Mul: {
        if (gr.requires_grad(aid)) {
          Tensor<T> da = detail::ew_apply(go, bv2, go.dims, [](T x, T y) { return x * y; });
          gr.accumulate(aid, detail::reduce_to(da, av2.dims));
        }
        if (gr.requires_grad(bid)) {
          Tensor<T> db = detail::ew_apply(go, av2, go.dims, [](T x, T y) { return x * y; });
          gr.accumulate(bid, detail::reduce_to(db, bv2.dims));
        }
        break;
      }
      case EwOp::Div: {
        if (gr.requires_grad(aid)) {
          Tensor<T> da = detail::ew_apply(go, bv2, go.dims, [](T x, T y) { return x / y; });
          gr.accumulate(aid, detail::reduce_to(da, av2.dims));
        }
        if (gr.requires_grad(bid)) {
          const Tensor<T>& ov = gr.value(self);
          Tensor<T> gy = detail::ew_apply(go, ov, go.dims, [](T x, T y) { return x * y; });
          Tensor<T> db = detail::ew_apply(gy, bv2, gy.dims, [](T x, T y) { return -x / y; });
          gr.accumulate(bid, detail::reduce_to(db, bv2.dims));
        }
        break;
      }
    }
  });
}

template <typename T>
DiffNode<T> add(DiffNode<T> a, DiffNode<T> b) {
  return elementwise(EwOp::Add, a, b);
}
template <typename T>
DiffNode<T> sub(DiffNode<T> a, DiffNode<T> b) {
  return elementwise(EwOp::Sub, a, b);
}
template <typename T>
DiffNode<T> mul(DiffNode<T> a, DiffNode<T> b) {
  return elementwise(EwOp::Mul, a, b);
}
template <typename T>
DiffNode<T> div(DiffNode<T> a, DiffNode<T> b) {
  return elementwise(EwOp::Div, a, b);
}

template <typename T>
DiffNode<T> add(DiffNode<T> a, T s) {
  return add(a, a.graph->constant(Tensor<T>::scalar(s)));
}
template <typename T>
DiffNode<T> sub(DiffNode<T> a, T s) {
  return sub(a, a.graph->constant(Tensor<T>::scalar(s)));
}
template <typename T>
DiffNode<T> mul(DiffNode<T> a, T s) {
  return mul(a, a.graph->constant(Tensor<T>::scalar(s)));
}
template <typename T>
DiffNode<T> div(DiffNode<T> a, T s) {
  return div(a, a.graph->constant(Tensor<T>::scalar(s)));
}
template <typename T>
DiffNode<T> scale(DiffNode<T> a, T s) {
  return mul(a, s);
}

// ---------------------------------------------------------------------------
// Batched matrix multiply
// ---------------------------------------------------------------------------

namespace detail {

// C[M,N] = (or +=) A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C, bool accum) {
  if (!accum) std::fill(C, C + M * N, T(0));
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      T av = a[k];
      const T* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] = (or +=) A[M,K] * B[N,K]^T. The transposed copy keeps the inner
// loops in the accumulate-into-row form the compiler can vectorize; the
// strict-order dot-product form cannot be.
template <typename T>
void gemm_nt(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C, bool accum) {
  std::vector<T> bt(size_t(K * N));
  for (int64_t j = 0; j < N; ++j)
    for (int64_t k = 0; k < K; ++k) bt[size_t(k * N + j)] = B[j * K + k];
  if (!accum) std::fill(C, C + M * N, T(0));
  for (int64_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    for (int64_t k = 0; k < K; ++k) {
      T av = a[k];
      const T* b = bt.data() + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] = (or +=) A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C, bool accum) {
  if (!accum) std::fill(C, C + M * N, T(0));
  for (int64_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (int64_t i = 0; i < M; ++i) {
      T av = a[i];
      T* c = C + i * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

struct MatmulPlan {
  Dims out_dims;
  Dims batch_dims;
  Dims sa, sb;  // broadcast strides over batch dims, in units of matrix blocks
  int64_t m, k, n, batch;
};

inline MatmulPlan matmul_plan(const Dims& a, const Dims& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ShapeError("matmul: operands must have rank >= 2");
  MatmulPlan p;
  p.m = a[a.size() - 2];
  p.k = a[a.size() - 1];
  int64_t kb = b[b.size() - 2];
  p.n = b[b.size() - 1];
  if (p.k != kb)
    throw ShapeError("matmul: inner dims disagree " + dims_str(a) + " vs " + dims_str(b));
  Dims ab(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
  p.batch_dims = broadcast_dims(ab, bb, "matmul");
  p.batch = dims_numel(p.batch_dims);
  p.sa = broadcast_strides(ab, p.batch_dims);
  p.sb = broadcast_strides(bb, p.batch_dims);
  p.out_dims = p.batch_dims;
  p.out_dims.push_back(p.m);
  p.out_dims.push_back(p.n);
  return p;
}

// Iterate batch indices yielding (out_block, a_block, b_block).
template <typename F>
void for_each_batch(const MatmulPlan& p, F&& f) {
  if (p.batch_dims.empty()) {
    f(int64_t(0), int64_t(0), int64_t(0));
    return;
  }
  for_each_broadcast(p.batch_dims, p.sa, p.sb,
                     [&](int64_t i, int64_t oa, int64_t ob) { f(i, oa, ob); });
}

}  // namespace detail

template <typename T>
DiffNode<T> matmul(DiffNode<T> a, DiffNode<T> b) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  detail::MatmulPlan p = detail::matmul_plan(av.dims, bv.dims);
  // Shared-weight fast path: batched left operand against a rank-2 right
  // operand collapses into one (batch*m, k) x (k, n) product.
  bool shared_b = bv.dims.size() == 2;
  Tensor<T> out(p.out_dims);
  if (shared_b) {
    detail::gemm_nn(p.batch * p.m, p.k, p.n, av.data.data(), bv.data.data(), out.data.data(),
                    false);
  } else {
    detail::for_each_batch(p, [&](int64_t ob, int64_t ab, int64_t bb) {
      detail::gemm_nn(p.m, p.k, p.n, av.data.data() + ab * p.m * p.k,
                      bv.data.data() + bb * p.k * p.n, out.data.data() + ob * p.m * p.n,
                      false);
    });
  }
  bool req = a.requires_grad() || b.requires_grad();
  return g.make(std::move(out), req, "matmul",
                [aid = a.id, bid = b.id, p, shared_b](Graph<T>& gr, int self) {
    const Tensor<T>& go = gr.grad(self);
    const Tensor<T>& av2 = gr.value(aid);
    const Tensor<T>& bv2 = gr.value(bid);
    if (gr.requires_grad(aid)) {
      Tensor<T> da(av2.dims);
      if (shared_b) {
        detail::gemm_nt(p.batch * p.m, p.n, p.k, go.data.data(), bv2.data.data(),
                        da.data.data(), false);
        gr.accumulate(aid, da);
      } else {
        Dims fa = p.batch_dims;
        fa.push_back(p.m);
        fa.push_back(p.k);
        Tensor<T> full(fa);
        detail::for_each_batch(p, [&](int64_t ob, int64_t, int64_t bb) {
          detail::gemm_nt(p.m, p.n, p.k, go.data.data() + ob * p.m * p.n,
                          bv2.data.data() + bb * p.k * p.n, full.data.data() + ob * p.m * p.k,
                          false);
        });
        gr.accumulate(aid, full.dims == av2.dims ? full : detail::reduce_to(full, av2.dims));
      }
    }
    if (gr.requires_grad(bid)) {
      if (shared_b) {
        Tensor<T> db(bv2.dims);
        detail::gemm_tn(p.k, p.batch * p.m, p.n, av2.data.data(), go.data.data(),
                        db.data.data(), false);
        gr.accumulate(bid, db);
      } else {
        Dims fb = p.batch_dims;
        fb.push_back(p.k);
        fb.push_back(p.n);
        Tensor<T> db(fb);
        detail::for_each_batch(p, [&](int64_t ob, int64_t ab, int64_t) {
          detail::gemm_tn(p.k, p.m, p.n, av2.data.data() + ab * p.m * p.k,
                          go.data.data() + ob * p.m * p.n, db.data.data() + ob * p.k * p.n,
                          false);
        });
        gr.accumulate(bid, db.dims == bv2.dims ? db : detail::reduce_to(db, bv2.dims));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
DiffNode<T> sum(DiffNode<T> a) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  T s = 0;
  for (T x : av.data) s += x;
  return g.make(Tensor<T>::scalar(s), a.requires_grad(), "sum",
                [aid = a.id](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  T go = gr.grad(self).data[0];
                  gr.accumulate(aid, Tensor<T>::full(gr.value(aid).dims, go));
                });
}

template <typename T>
DiffNode<T> sum(DiffNode<T> a, int axis, bool keepdim = false) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  int r = av.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("sum: axis out of range");
  int64_t outer = 1, n = av.dims[size_t(axis)], inner = 1;
  for (int i = 0; i < axis; ++i) outer *= av.dims[size_t(i)];
  for (int i = axis + 1; i < r; ++i) inner *= av.dims[size_t(i)];
  Dims od;
  for (int i = 0; i < r; ++i) {
    if (i == axis) {
      if (keepdim) od.push_back(1);
    } else {
      od.push_back(av.dims[size_t(i)]);
    }
  }
  Tensor<T> out(od.empty() ? Tensor<T>::scalar(T(0)) : Tensor<T>::zeros(od));
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < n; ++j) {
      const T* src = av.data.data() + (o * n + j) * inner;
      T* dst = out.data.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  return g.make(std::move(out), a.requires_grad(), "sum_axis",
                [aid = a.id, outer, n, inner](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  const Tensor<T>& go = gr.grad(self);
                  Tensor<T> da(gr.value(aid).dims);
                  for (int64_t o = 0; o < outer; ++o)
                    for (int64_t j = 0; j < n; ++j) {
                      const T* src = go.data.data() + o * inner;
                      T* dst = da.data.data() + (o * n + j) * inner;
                      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
                    }
                  gr.accumulate(aid, da);
                });
}

template <typename T>
DiffNode<T> mean(DiffNode<T> a) {
  return scale(sum(a), T(1) / T(a.numel()));
}
template <typename T>
DiffNode<T> mean(DiffNode<T> a, int axis, bool keepdim = false) {
  int r = a.value().rank();
  int ax = axis < 0 ? axis + r : axis;
  T n = T(a.value().dims[size_t(ax)]);
  return scale(sum(a, axis, keepdim), T(1) / n);
}

template <typename T>
DiffNode<T> reshape(DiffNode<T> a, Dims nd) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  if (dims_numel(nd) != av.numel())
    throw ShapeError("reshape: numel mismatch " + dims_str(av.dims) + " -> " + dims_str(nd));
  Tensor<T> out;
  out.dims = nd;
  out.data = av.data;
  return g.make(std::move(out), a.requires_grad(), "reshape",
                [aid = a.id](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  Tensor<T> da;
                  da.dims = gr.value(aid).dims;
                  da.data = gr.grad(self).data;
                  gr.accumulate(aid, da);
                });
}

template <typename T>
DiffNode<T> permute(DiffNode<T> a, std::vector<int> perm) {
  Graph<T>& g = *a.graph;
  Tensor<T> out = detail::permute(a.value(), perm);
  return g.make(std::move(out), a.requires_grad(), "permute",
                [aid = a.id, perm](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  gr.accumulate(aid, detail::permute(gr.grad(self), detail::inverse_perm(perm)));
                });
}

template <typename T>
DiffNode<T> slice(DiffNode<T> a, int axis, int64_t start, int64_t len) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  int r = av.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r || start < 0 || len <= 0 || start + len > av.dims[size_t(axis)])
    throw ShapeError("slice: range out of bounds");
  int64_t outer = 1, n = av.dims[size_t(axis)], inner = 1;
  for (int i = 0; i < axis; ++i) outer *= av.dims[size_t(i)];
  for (int i = axis + 1; i < r; ++i) inner *= av.dims[size_t(i)];
  Dims od = av.dims;
  od[size_t(axis)] = len;
  Tensor<T> out(od);
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(av.data.data() + (o * n + start) * inner, len * inner,
                out.data.data() + o * len * inner);
  return g.make(std::move(out), a.requires_grad(), "slice",
                [aid = a.id, outer, n, inner, start, len](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  const Tensor<T>& go = gr.grad(self);
                  Tensor<T> da(gr.value(aid).dims);
                  for (int64_t o = 0; o < outer; ++o)
                    std::copy_n(go.data.data() + o * len * inner, len * inner,
                                da.data.data() + (o * n + start) * inner);
                  gr.accumulate(aid, da);
                });
}

template <typename T>
DiffNode<T> concat(const std::vector<DiffNode<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph<T>& g = *parts[0].graph;
  int r = parts[0].value().rank();
  if (axis < 0) axis += r;
  Dims od = parts[0].value().dims;
  int64_t total = 0;
  for (const auto& p : parts) {
    const Dims& d = p.value().dims;
    if (int(d.size()) != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && d[size_t(i)] != od[size_t(i)])
        throw ShapeError("concat: dims mismatch " + dims_str(od) + " vs " + dims_str(d));
    total += d[size_t(axis)];
  }
  od[size_t(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= od[size_t(i)];
  for (int i = axis + 1; i < r; ++i) inner *= od[size_t(i)];
  Tensor<T> out(od);
  std::vector<int> ids;
  std::vector<int64_t> lens;
  bool req = false;
  int64_t off = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = p.value();
    int64_t len = pv.dims[size_t(axis)];
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.data.data() + o * len * inner, len * inner,
                  out.data.data() + (o * total + off) * inner);
    ids.push_back(p.id);
    lens.push_back(len);
    req = req || p.requires_grad();
    off += len;
  }
  return g.make(std::move(out), req, "concat",
                [ids, lens, outer, inner, total](Graph<T>& gr, int self) {
                  const Tensor<T>& go = gr.grad(self);
                  int64_t off2 = 0;
                  for (size_t pi = 0; pi < ids.size(); ++pi) {
                    int64_t len = lens[pi];
                    if (gr.requires_grad(ids[pi])) {
                      Tensor<T> da(gr.value(ids[pi]).dims);
                      for (int64_t o = 0; o < outer; ++o)
                        std::copy_n(go.data.data() + (o * total + off2) * inner, len * inner,
                                    da.data.data() + o * len * inner);
                      gr.accumulate(ids[pi], da);
                    }
                    off2 += len;
                  }
                });
}

// Value pass-through that blocks gradient flow.
template <typename T>
DiffNode<T> detach(DiffNode<T> a) {
  return a.graph->constant(a.value());
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
struct AxisSpan {
  int64_t outer, n, inner;
};
template <typename T>
AxisSpan<T> axis_span(const Tensor<T>& t, int axis) {
  int r = t.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for " + dims_str(t.dims));
  AxisSpan<T> s{1, t.dims[size_t(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= t.dims[size_t(i)];
  for (int i = axis + 1; i < r; ++i) s.inner *= t.dims[size_t(i)];
  return s;
}
}  // namespace detail

// Numerically stable softmax along `axis` (max-subtraction).
template <typename T>
DiffNode<T> softmax(DiffNode<T> a, int axis) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  auto sp = detail::axis_span(av, axis);
  Tensor<T> out(av.dims);
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      int64_t base = o * sp.n * sp.inner + in;
      T mx = av.data[size_t(base)];
      for (int64_t j = 1; j < sp.n; ++j)
        mx = std::max(mx, av.data[size_t(base + j * sp.inner)]);
      T total = 0;
      for (int64_t j = 0; j < sp.n; ++j) {
        T e = std::exp(av.data[size_t(base + j * sp.inner)] - mx);
        out.data[size_t(base + j * sp.inner)] = e;
        total += e;
      }
      T invt = T(1) / total;
      for (int64_t j = 0; j < sp.n; ++j) out.data[size_t(base + j * sp.inner)] *= invt;
    }
  return g.make(std::move(out), a.requires_grad(), "softmax",
                [aid = a.id, sp](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  const Tensor<T>& y = gr.value(self);
                  const Tensor<T>& go = gr.grad(self);
                  Tensor<T> da(y.dims);
                  for (int64_t o = 0; o < sp.outer; ++o)
                    for (int64_t in = 0; in < sp.inner; ++in) {
                      int64_t base = o * sp.n * sp.inner + in;
                      T dot = 0;
                      for (int64_t j = 0; j < sp.n; ++j) {
                        size_t ix = size_t(base + j * sp.inner);
                        dot += go.data[ix] * y.data[ix];
                      }
                      for (int64_t j = 0; j < sp.n; ++j) {
                        size_t ix = size_t(base + j * sp.inner);
                        da.data[ix] = y.data[ix] * (go.data[ix] - dot);
                      }
                    }
                  gr.accumulate(aid, da);
                });
}

namespace detail {
// GeLU, tanh approximation with constants 0.7978845608 (= sqrt(2/pi)) and
// 0.044715: gelu(x) = 0.5*x*(1 + tanh(0.7978845608*(x + 0.044715*x^3))).
template <typename T>
inline T gelu_value(T x) {
  T u = T(0.7978845608) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}
template <typename T>
inline T gelu_derivative(T x) {
  T u = T(0.7978845608) * (x + T(0.044715) * x * x * x);
  T t = std::tanh(u);
  T du = T(0.7978845608) * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}
}  // namespace detail

enum class Activation { Relu, Gelu, EluPlusOne };

template <typename T>
DiffNode<T> activation(Activation kind, DiffNode<T> a) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  Tensor<T> out;
  out.dims = av.dims;
  out.data.resize(av.data.size());
  const char* name = "relu";
  switch (kind) {
    case Activation::Relu:
      for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = std::max(av.data[i], T(0));
      break;
    case Activation::Gelu:
      name = "gelu";
      for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = detail::gelu_value(av.data[i]);
      break;
    case Activation::EluPlusOne:
      // elu(x)+1: x+1 for x > 0, exp(x) otherwise; strictly positive kernel
      // feature map for linear attention.
      name = "elu_plus_one";
      for (size_t i = 0; i < av.data.size(); ++i) {
        T x = av.data[i];
        out.data[i] = x > T(0) ? x + T(1) : std::exp(x);
      }
      break;
  }
  return g.make(std::move(out), a.requires_grad(), name,
                [kind, aid = a.id](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  const Tensor<T>& x = gr.value(aid);
                  const Tensor<T>& go = gr.grad(self);
                  Tensor<T> da;
                  da.dims = x.dims;
                  da.data.resize(x.data.size());
                  switch (kind) {
                    case Activation::Relu:
                      for (size_t i = 0; i < x.data.size(); ++i)
                        da.data[i] = x.data[i] > T(0) ? go.data[i] : T(0);
                      break;
                    case Activation::Gelu:
                      for (size_t i = 0; i < x.data.size(); ++i)
                        da.data[i] = go.data[i] * detail::gelu_derivative(x.data[i]);
                      break;
                    case Activation::EluPlusOne:
                      for (size_t i = 0; i < x.data.size(); ++i)
                        da.data[i] = x.data[i] > T(0) ? go.data[i]
                                                      : go.data[i] * std::exp(x.data[i]);
                      break;
                  }
                  gr.accumulate(aid, da);
                });
}

template <typename T>
DiffNode<T> relu(DiffNode<T> a) {
  return activation(Activation::Relu, a);
}
template <typename T>
DiffNode<T> gelu(DiffNode<T> a) {
  return activation(Activation::Gelu, a);
}
template <typename T>
DiffNode<T> elu_plus_one(DiffNode<T> a) {
  return activation(Activation::EluPlusOne, a);
}

template <typename T>
DiffNode<T> sqrt_op(DiffNode<T> a) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  Tensor<T> out;
  out.dims = av.dims;
  out.data.resize(av.data.size());
  for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = std::sqrt(av.data[i]);
  return g.make(std::move(out), a.requires_grad(), "sqrt",
                [aid = a.id](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  const Tensor<T>& y = gr.value(self);
                  const Tensor<T>& go = gr.grad(self);
                  Tensor<T> da;
                  da.dims = y.dims;
                  da.data.resize(y.data.size());
                  for (size_t i = 0; i < y.data.size(); ++i)
                    da.data[i] = go.data[i] * T(0.5) / y.data[i];
                  gr.accumulate(aid, da);
                });
}

// Each slice along `axis` is scaled to unit L2 norm; slices whose norm falls
// below eps are scaled by 1/eps instead.
template <typename T>
DiffNode<T> normalize_l2(DiffNode<T> a, int axis, T eps = T(1e-8)) {
  if (eps <= T(0)) throw DomainError("normalize_l2: eps must be positive");
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  auto sp = detail::axis_span(av, axis);
  Tensor<T> out(av.dims);
  Tensor<T> norms({sp.outer, sp.inner});
  for (int64_t o = 0; o < sp.outer; ++o)
    for (int64_t in = 0; in < sp.inner; ++in) {
      int64_t base = o * sp.n * sp.inner + in;
      T ss = 0;
      for (int64_t j = 0; j < sp.n; ++j) {
        T x = av.data[size_t(base + j * sp.inner)];
        ss += x * x;
      }
      T nrm = std::sqrt(ss);
      norms(o, in) = nrm;
      T s = nrm < eps ? T(1) / eps : T(1) / nrm;
      for (int64_t j = 0; j < sp.n; ++j)
        out.data[size_t(base + j * sp.inner)] = av.data[size_t(base + j * sp.inner)] * s;
    }
  return g.make(std::move(out), a.requires_grad(), "normalize_l2",
                [aid = a.id, sp, eps, norms](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(aid)) return;
                  const Tensor<T>& y = gr.value(self);
                  const Tensor<T>& go = gr.grad(self);
                  Tensor<T> da(y.dims);
                  for (int64_t o = 0; o < sp.outer; ++o)
                    for (int64_t in = 0; in < sp.inner; ++in) {
                      int64_t base = o * sp.n * sp.inner + in;
                      T nrm = norms(o, in);
                      if (nrm < eps) {
                        T s = T(1) / eps;
                        for (int64_t j = 0; j < sp.n; ++j) {
                          size_t ix = size_t(base + j * sp.inner);
                          da.data[ix] = go.data[ix] * s;
                        }
                      } else {
                        T dot = 0;
                        for (int64_t j = 0; j < sp.n; ++j) {
                          size_t ix = size_t(base + j * sp.inner);
                          dot += go.data[ix] * y.data[ix];
                        }
                        T s = T(1) / nrm;
                        for (int64_t j = 0; j < sp.n; ++j) {
                          size_t ix = size_t(base + j * sp.inner);
                          da.data[ix] = s * (go.data[ix] - y.data[ix] * dot);
                        }
                      }
                    }
                  gr.accumulate(aid, da);
                });
}

}  // namespace pcaagg
