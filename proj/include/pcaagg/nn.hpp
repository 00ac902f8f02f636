#pragma once
// Layer-level differentiable operations: convolution, batch normalization,
// layer normalization, bilinear upsampling and masked cross-entropy.

#include <vector>

#include "pcaagg/autodiff.hpp"

namespace pcaagg {

namespace detail {

// Unfold x[Cin,H,W] into cols[Cin*k*k, H*W] for same-padding cross-correlation.
template <typename T>
void im2col(const T* x, int64_t cin, int64_t h, int64_t w, int64_t k, T* cols) {
  int64_t pad = (k - 1) / 2;
  int64_t hw = h * w;
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < k; ++ki)
      for (int64_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * hw;
        for (int64_t oh = 0; oh < h; ++oh) {
          int64_t ih = oh + ki - pad;
          if (ih < 0 || ih >= h) {
            std::fill(row + oh * w, row + (oh + 1) * w, T(0));
            continue;
          }
          const T* src = x + (c * h + ih) * w;
          for (int64_t ow = 0; ow < w; ++ow) {
            int64_t iw = ow + kj - pad;
            row[oh * w + ow] = (iw < 0 || iw >= w) ? T(0) : src[iw];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, int64_t cin, int64_t h, int64_t w, int64_t k, T* x) {
  int64_t pad = (k - 1) / 2;
  int64_t hw = h * w;
  for (int64_t c = 0; c < cin; ++c)
    for (int64_t ki = 0; ki < k; ++ki)
      for (int64_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * hw;
        for (int64_t oh = 0; oh < h; ++oh) {
          int64_t ih = oh + ki - pad;
          if (ih < 0 || ih >= h) continue;
          T* dst = x + (c * h + ih) * w;
          for (int64_t ow = 0; ow < w; ++ow) {
            int64_t iw = ow + kj - pad;
            if (iw >= 0 && iw < w) dst[iw] += row[oh * w + ow];
          }
        }
      }
}

}  // namespace detail

// Same-size cross-correlation: x[B,Cin,H,W] * w[Cout,Cin,k,k] + bias[Cout],
// k in {1,3}, padding (k-1)/2.
template <typename T>
DiffNode<T> conv2d(DiffNode<T> x, DiffNode<T> w, DiffNode<T> bias) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  const Tensor<T>& bv = bias.value();
  if (xv.rank() != 4 || wv.rank() != 4)
    throw ShapeError("conv2d: expected x[B,Cin,H,W], w[Cout,Cin,k,k]");
  int64_t B = xv.dims[0], cin = xv.dims[1], H = xv.dims[2], W = xv.dims[3];
  int64_t cout = wv.dims[0], k = wv.dims[2];
  if (wv.dims[1] != cin || wv.dims[3] != k)
    throw ShapeError("conv2d: weight dims " + dims_str(wv.dims) + " mismatch input " +
                     dims_str(xv.dims));
  if (k != 1 && k != 3) throw ShapeError("conv2d: kernel must be 1 or 3");
  if (bv.dims != Dims{cout}) throw ShapeError("conv2d: bias dims mismatch");

  int64_t hw = H * W, ckk = cin * k * k;
  Tensor<T> out({B, cout, H, W});
  std::vector<T> cols(k == 1 ? 0 : size_t(ckk * hw));
  for (int64_t b = 0; b < B; ++b) {
    const T* xb = xv.data.data() + b * cin * hw;
    T* yb = out.data.data() + b * cout * hw;
    if (k == 1) {
      detail::gemm_nn(cout, cin, hw, wv.data.data(), xb, yb, false);
    } else {
      detail::im2col(xb, cin, H, W, k, cols.data());
      detail::gemm_nn(cout, ckk, hw, wv.data.data(), cols.data(), yb, false);
    }
    for (int64_t co = 0; co < cout; ++co) {
      T bval = bv.data[size_t(co)];
      T* row = yb + co * hw;
      for (int64_t i = 0; i < hw; ++i) row[i] += bval;
    }
  }
  bool req = x.requires_grad() || w.requires_grad() || bias.requires_grad();
  return g.make(
      std::move(out), req, "conv2d",
      [xid = x.id, wid = w.id, bid = bias.id, B, cin, cout, H, W, k](Graph<T>& gr, int self) {
        const Tensor<T>& go = gr.grad(self);
        const Tensor<T>& xv2 = gr.value(xid);
        const Tensor<T>& wv2 = gr.value(wid);
        int64_t hw = H * W, ckk = cin * k * k;
        bool need_x = gr.requires_grad(xid);
        bool need_w = gr.requires_grad(wid);
        bool need_b = gr.requires_grad(bid);
        Tensor<T> dx, dw, db;
        if (need_x) dx = Tensor<T>::zeros({B, cin, H, W});
        if (need_w) dw = Tensor<T>::zeros(wv2.dims);
        if (need_b) db = Tensor<T>::zeros({cout});
        std::vector<T> cols(k == 1 ? 0 : size_t(ckk * hw));
        std::vector<T> dcols(k == 1 ? 0 : size_t(ckk * hw));
        for (int64_t b = 0; b < B; ++b) {
          const T* dyb = go.data.data() + b * cout * hw;
          const T* xb = xv2.data.data() + b * cin * hw;
          if (k == 1) {
            if (need_w) detail::gemm_nt(cout, hw, cin, dyb, xb, dw.data.data(), true);
            if (need_x)
              detail::gemm_tn(cin, cout, hw, wv2.data.data(), dyb,
                              dx.data.data() + b * cin * hw, false);
          } else {
            if (need_w || need_x) detail::im2col(xb, cin, H, W, k, cols.data());
            if (need_w) detail::gemm_nt(cout, hw, ckk, dyb, cols.data(), dw.data.data(), true);
            if (need_x) {
              detail::gemm_tn(ckk, cout, hw, wv2.data.data(), dyb, dcols.data(), false);
              detail::col2im_add(dcols.data(), cin, H, W, k, dx.data.data() + b * cin * hw);
            }
          }
          if (need_b)
            for (int64_t co = 0; co < cout; ++co) {
              T s = 0;
              const T* row = dyb + co * hw;
              for (int64_t i = 0; i < hw; ++i) s += row[i];
              db.data[size_t(co)] += s;
            }
        }
        if (need_x) gr.accumulate(xid, dx);
        if (need_w) gr.accumulate(wid, dw);
        if (need_b) gr.accumulate(bid, db);
      });
}

// ---------------------------------------------------------------------------
// Batch normalization over all axes except the channel axis (axis 1)
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  bool initialized = false;
};

enum class BnMode { Train, Eval };

template <typename T>
DiffNode<T> batchnorm(DiffNode<T> x, DiffNode<T> gamma, DiffNode<T> beta,
                      BatchNormState<T>& state, BnMode mode, T momentum = T(0.1),
                      T eps = T(1e-5)) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batchnorm: input rank must be >= 2");
  int64_t C = xv.dims[1];
  if (gamma.value().dims != Dims{C} || beta.value().dims != Dims{C})
    throw ShapeError("batchnorm: gamma/beta dims mismatch");
  int64_t B = xv.dims[0];
  int64_t inner = xv.numel() / (B * C);
  int64_t m = B * inner;

  std::vector<T> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
  if (mode == BnMode::Train) {
    for (int64_t c = 0; c < C; ++c) {
      T s = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* row = xv.data.data() + (b * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) s += row[i];
      }
      mean[size_t(c)] = s / T(m);
      T v = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* row = xv.data.data() + (b * C + c) * inner;
        for (int64_t i = 0; i < inner; ++i) {
          T d = row[i] - mean[size_t(c)];
          v += d * d;
        }
      }
      var[size_t(c)] = v / T(m);
    }
    if (!state.initialized) {
      state.running_mean = Tensor<T>::zeros({C});
      state.running_var = Tensor<T>::full({C}, T(1));
      state.initialized = true;
    }
    for (int64_t c = 0; c < C; ++c) {
      state.running_mean.data[size_t(c)] =
          (T(1) - momentum) * state.running_mean.data[size_t(c)] + momentum * mean[size_t(c)];
      state.running_var.data[size_t(c)] =
          (T(1) - momentum) * state.running_var.data[size_t(c)] + momentum * var[size_t(c)];
    }
  } else {
    if (!state.initialized)
      throw DomainError("batchnorm: eval mode before any train step (uninitialized statistics)");
    for (int64_t c = 0; c < C; ++c) {
      mean[size_t(c)] = state.running_mean.data[size_t(c)];
      var[size_t(c)] = state.running_var.data[size_t(c)];
    }
  }

  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  Tensor<T> out(xv.dims);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      T iv = T(1) / std::sqrt(var[size_t(c)] + eps);
      T ga = gv.data[size_t(c)], be = bv.data[size_t(c)], mu = mean[size_t(c)];
      const T* src = xv.data.data() + (b * C + c) * inner;
      T* dst = out.data.data() + (b * C + c) * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] = (src[i] - mu) * iv * ga + be;
    }

  bool req = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  bool train = mode == BnMode::Train;
  return g.make(
      std::move(out), req, "batchnorm",
      [xid = x.id, gid = gamma.id, bid = beta.id, mean, var, eps, train, B, C,
       inner](Graph<T>& gr, int self) {
        const Tensor<T>& go = gr.grad(self);
        const Tensor<T>& xv2 = gr.value(xid);
        const Tensor<T>& gv2 = gr.value(gid);
        int64_t m = B * inner;
        bool need_x = gr.requires_grad(xid);
        bool need_g = gr.requires_grad(gid);
        bool need_b = gr.requires_grad(bid);
        Tensor<T> dx, dg, db;
        if (need_x) dx = Tensor<T>::zeros(xv2.dims);
        if (need_g) dg = Tensor<T>::zeros({C});
        if (need_b) db = Tensor<T>::zeros({C});
        for (int64_t c = 0; c < C; ++c) {
          T mu = mean[size_t(c)];
          T iv = T(1) / std::sqrt(var[size_t(c)] + eps);
          T ga = gv2.data[size_t(c)];
          T sum_dy = 0, sum_dy_xhat = 0;
          for (int64_t b = 0; b < B; ++b) {
            const T* xr = xv2.data.data() + (b * C + c) * inner;
            const T* gr2 = go.data.data() + (b * C + c) * inner;
            for (int64_t i = 0; i < inner; ++i) {
              sum_dy += gr2[i];
              sum_dy_xhat += gr2[i] * (xr[i] - mu) * iv;
            }
          }
          if (need_g) dg.data[size_t(c)] = sum_dy_xhat;
          if (need_b) db.data[size_t(c)] = sum_dy;
          if (need_x) {
            if (train) {
              // dx = (gamma*iv/m) * (m*dy - sum(dy) - xhat*sum(dy*xhat))
              T k1 = ga * iv / T(m);
              for (int64_t b = 0; b < B; ++b) {
                const T* xr = xv2.data.data() + (b * C + c) * inner;
                const T* gr2 = go.data.data() + (b * C + c) * inner;
                T* dr = dx.data.data() + (b * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i) {
                  T xhat = (xr[i] - mu) * iv;
                  dr[i] = k1 * (T(m) * gr2[i] - sum_dy - xhat * sum_dy_xhat);
                }
              }
            } else {
              T k1 = ga * iv;
              for (int64_t b = 0; b < B; ++b) {
                const T* gr2 = go.data.data() + (b * C + c) * inner;
                T* dr = dx.data.data() + (b * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i) dr[i] = k1 * gr2[i];
              }
            }
          }
        }
        if (need_x) gr.accumulate(xid, dx);
        if (need_g) gr.accumulate(gid, dg);
        if (need_b) gr.accumulate(bid, db);
      });
}

// ---------------------------------------------------------------------------
// Layer norm (composite, over the trailing axis)
// ---------------------------------------------------------------------------

template <typename T>
DiffNode<T> layer_norm(DiffNode<T> x, DiffNode<T> gamma, DiffNode<T> beta, T eps = T(1e-5)) {
  DiffNode<T> mu = mean(x, -1, true);
  DiffNode<T> xc = sub(x, mu);
  DiffNode<T> v = mean(mul(xc, xc), -1, true);
  DiffNode<T> y = div(xc, sqrt_op(add(v, eps)));
  return add(mul(y, gamma), beta);
}

// x[..., k] * w[k, n] + b[n]
template <typename T>
DiffNode<T> linear(DiffNode<T> x, DiffNode<T> w, DiffNode<T> b) {
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Bilinear upsampling of the two leading spatial axes of x[H,W,...]
// ---------------------------------------------------------------------------

template <typename T>
DiffNode<T> upsample_bilinear(DiffNode<T> x, int64_t factor) {
  if (factor < 1) throw ShapeError("upsample_bilinear: factor must be >= 1");
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("upsample_bilinear: rank must be >= 2");
  int64_t H = xv.dims[0], W = xv.dims[1];
  int64_t inner = xv.numel() / (H * W);
  int64_t OH = H * factor, OW = W * factor;
  Dims od = xv.dims;
  od[0] = OH;
  od[1] = OW;

  // Half-pixel-center mapping; borders clamp (edge replication).
  struct Tap {
    int64_t i0, i1;
    T f;
  };
  auto taps = [&](int64_t o, int64_t n) {
    T y = (T(o) + T(0.5)) / T(factor) - T(0.5);
    T fl = std::floor(y);
    int64_t i0 = int64_t(fl);
    T f = y - fl;
    int64_t i0c = std::clamp<int64_t>(i0, 0, n - 1);
    int64_t i1c = std::clamp<int64_t>(i0 + 1, 0, n - 1);
    return Tap{i0c, i1c, f};
  };
  std::vector<Tap> row_taps(static_cast<size_t>(OH)), col_taps(static_cast<size_t>(OW));
  for (int64_t i = 0; i < OH; ++i) row_taps[size_t(i)] = taps(i, H);
  for (int64_t j = 0; j < OW; ++j) col_taps[size_t(j)] = taps(j, W);

  Tensor<T> out(od);
  for (int64_t oi = 0; oi < OH; ++oi) {
    const Tap& r = row_taps[size_t(oi)];
    for (int64_t oj = 0; oj < OW; ++oj) {
      const Tap& c = col_taps[size_t(oj)];
      const T* p00 = xv.data.data() + (r.i0 * W + c.i0) * inner;
      const T* p01 = xv.data.data() + (r.i0 * W + c.i1) * inner;
      const T* p10 = xv.data.data() + (r.i1 * W + c.i0) * inner;
      const T* p11 = xv.data.data() + (r.i1 * W + c.i1) * inner;
      T w00 = (T(1) - r.f) * (T(1) - c.f), w01 = (T(1) - r.f) * c.f;
      T w10 = r.f * (T(1) - c.f), w11 = r.f * c.f;
      T* dst = out.data.data() + (oi * OW + oj) * inner;
      for (int64_t t = 0; t < inner; ++t)
        dst[t] = w00 * p00[t] + w01 * p01[t] + w10 * p10[t] + w11 * p11[t];
    }
  }
  return g.make(std::move(out), x.requires_grad(), "upsample_bilinear",
                [xid = x.id, row_taps, col_taps, W, OH, OW, inner](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(xid)) return;
                  const Tensor<T>& go = gr.grad(self);
                  Tensor<T> dx = Tensor<T>::zeros(gr.value(xid).dims);
                  for (int64_t oi = 0; oi < OH; ++oi) {
                    const Tap& r = row_taps[size_t(oi)];
                    for (int64_t oj = 0; oj < OW; ++oj) {
                      const Tap& c = col_taps[size_t(oj)];
                      T w00 = (T(1) - r.f) * (T(1) - c.f), w01 = (T(1) - r.f) * c.f;
                      T w10 = r.f * (T(1) - c.f), w11 = r.f * c.f;
                      const T* src = go.data.data() + (oi * OW + oj) * inner;
                      T* p00 = dx.data.data() + (r.i0 * W + c.i0) * inner;
                      T* p01 = dx.data.data() + (r.i0 * W + c.i1) * inner;
                      T* p10 = dx.data.data() + (r.i1 * W + c.i0) * inner;
                      T* p11 = dx.data.data() + (r.i1 * W + c.i1) * inner;
                      for (int64_t t = 0; t < inner; ++t) {
                        p00[t] += w00 * src[t];
                        p01[t] += w01 * src[t];
                        p10[t] += w10 * src[t];
                        p11[t] += w11 * src[t];
                      }
                    }
                  }
                  gr.accumulate(xid, dx);
                });
}

// ---------------------------------------------------------------------------
// Mean cross-entropy over non-ignored rows, log-sum-exp stabilized
// ---------------------------------------------------------------------------

inline constexpr int kIgnoreLabel = 255;

template <typename T>
DiffNode<T> cross_entropy_masked(DiffNode<T> logits, const std::vector<int>& labels,
                                 int ignore = kIgnoreLabel) {
  Graph<T>& g = *logits.graph;
  const Tensor<T>& lv = logits.value();
  if (lv.rank() != 2) throw ShapeError("cross_entropy: logits must be [rows, classes]");
  int64_t P = lv.dims[0], N = lv.dims[1];
  if (int64_t(labels.size()) != P) throw ShapeError("cross_entropy: label count mismatch");
  int64_t counted = 0;
  T total = 0;
  for (int64_t p = 0; p < P; ++p) {
    int y = labels[size_t(p)];
    if (y == ignore) continue;
    if (y < 0 || y >= N)
      throw DomainError("cross_entropy: label " + std::to_string(y) + " out of range");
    const T* row = lv.data.data() + p * N;
    T mx = row[0];
    for (int64_t j = 1; j < N; ++j) mx = std::max(mx, row[j]);
    T lse = 0;
    for (int64_t j = 0; j < N; ++j) lse += std::exp(row[j] - mx);
    lse = std::log(lse) + mx;
    total += lse - row[y];
    ++counted;
  }
  if (counted == 0) throw DomainError("cross_entropy: all pixels ignored (empty supervision)");
  T loss = total / T(counted);
  return g.make(Tensor<T>::scalar(loss), logits.requires_grad(), "cross_entropy",
                [lid = logits.id, labels, ignore, P, N, counted](Graph<T>& gr, int self) {
                  if (!gr.requires_grad(lid)) return;
                  T go = gr.grad(self).data[0];
                  const Tensor<T>& lv2 = gr.value(lid);
                  Tensor<T> dl = Tensor<T>::zeros(lv2.dims);
                  T scale = go / T(counted);
                  for (int64_t p = 0; p < P; ++p) {
                    int y = labels[size_t(p)];
                    if (y == ignore) continue;
                    const T* row = lv2.data.data() + p * N;
                    T* drow = dl.data.data() + p * N;
                    T mx = row[0];
                    for (int64_t j = 1; j < N; ++j) mx = std::max(mx, row[j]);
                    T denom = 0;
                    for (int64_t j = 0; j < N; ++j) denom += std::exp(row[j] - mx);
                    for (int64_t j = 0; j < N; ++j)
                      drow[j] = scale * std::exp(row[j] - mx) / denom;
                    drow[y] -= scale;
                  }
                  gr.accumulate(lid, dl);
                });
}

}  // namespace pcaagg
