#pragma once
// Representation-similarity analysis: mean canonical correlation between two
// feature matrices after an SVCCA-style PCA reduction, plus the expert
// redundancy matrix and the stream coupling series built on it.

#include <optional>

#include "pcaagg/tensor.hpp"

namespace pcaagg {

namespace detail {

// Cyclic Jacobi eigen-decomposition of a symmetric matrix (row-major n x n).
// Deterministic sweep order; returns eigenvalues descending with matching
// eigenvectors in the columns of V.
inline void jacobi_eigh(std::vector<double>& a, int64_t n, std::vector<double>& eigvals,
                        std::vector<double>& eigvecs) {
  std::vector<double>& v = eigvecs;
  v.assign(size_t(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i) v[size_t(i * n + i)] = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0;
    for (int64_t p = 0; p < n; ++p)
      for (int64_t q = p + 1; q < n; ++q) off += a[size_t(p * n + q)] * a[size_t(p * n + q)];
    if (off < 1e-24) break;
    for (int64_t p = 0; p < n; ++p)
      for (int64_t q = p + 1; q < n; ++q) {
        double apq = a[size_t(p * n + q)];
        if (std::abs(apq) < 1e-300) continue;
        double app = a[size_t(p * n + p)], aqq = a[size_t(q * n + q)];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (int64_t k = 0; k < n; ++k) {
          double akp = a[size_t(k * n + p)], akq = a[size_t(k * n + q)];
          a[size_t(k * n + p)] = c * akp - s * akq;
          a[size_t(k * n + q)] = s * akp + c * akq;
        }
        for (int64_t k = 0; k < n; ++k) {
          double apk = a[size_t(p * n + k)], aqk = a[size_t(q * n + k)];
          a[size_t(p * n + k)] = c * apk - s * aqk;
          a[size_t(q * n + k)] = s * apk + c * aqk;
        }
        for (int64_t k = 0; k < n; ++k) {
          double vkp = v[size_t(k * n + p)], vkq = v[size_t(k * n + q)];
          v[size_t(k * n + p)] = c * vkp - s * vkq;
          v[size_t(k * n + q)] = s * vkp + c * vkq;
        }
      }
  }
  eigvals.resize(size_t(n));
  for (int64_t i = 0; i < n; ++i) eigvals[size_t(i)] = a[size_t(i * n + i)];
  // Sort descending, reordering eigenvector columns the same way.
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](int64_t x, int64_t y) { return eigvals[size_t(x)] > eigvals[size_t(y)]; });
  std::vector<double> ev(static_cast<size_t>(n)), vv(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i) {
    ev[size_t(i)] = eigvals[size_t(order[size_t(i)])];
    for (int64_t k = 0; k < n; ++k)
      vv[size_t(k * n + i)] = v[size_t(k * n + order[size_t(i)])];
  }
  eigvals = std::move(ev);
  eigvecs = std::move(vv);
}

// Column-centered copy.
inline Tensor<double> center_columns(const Tensor<double>& x) {
  int64_t n = x.dims[0], f = x.dims[1];
  Tensor<double> out = x;
  for (int64_t j = 0; j < f; ++j) {
    double mu = 0;
    for (int64_t i = 0; i < n; ++i) mu += x(i, j);
    mu /= double(n);
    for (int64_t i = 0; i < n; ++i) out(i, j) -= mu;
  }
  return out;
}

// cov = X^T Y / (n - 1) for centered X[n,fx], Y[n,fy].
inline std::vector<double> cross_cov(const Tensor<double>& x, const Tensor<double>& y) {
  int64_t n = x.dims[0], fx = x.dims[1], fy = y.dims[1];
  std::vector<double> c(size_t(fx * fy), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = x.data.data() + i * fx;
    const double* yi = y.data.data() + i * fy;
    for (int64_t a = 0; a < fx; ++a) {
      double xv = xi[a];
      double* row = c.data() + a * fy;
      for (int64_t b = 0; b < fy; ++b) row[b] += xv * yi[b];
    }
  }
  for (double& v : c) v /= double(n - 1);
  return c;
}

// Project centered X onto its top-k principal directions.
inline Tensor<double> pca_project(const Tensor<double>& x, int64_t k) {
  int64_t n = x.dims[0], f = x.dims[1];
  std::vector<double> cov = cross_cov(x, x);
  std::vector<double> eigvals, eigvecs;
  jacobi_eigh(cov, f, eigvals, eigvecs);
  Tensor<double> out({n, k});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < k; ++j) {
      double s = 0;
      for (int64_t a = 0; a < f; ++a) s += x(i, a) * eigvecs[size_t(a * f + j)];
      out(i, j) = s;
    }
  return out;
}

// Inverse square root of a symmetric PSD matrix; adds `ridge` to the diagonal
// first when ill-conditioned, reporting through `ridged`.
inline std::vector<double> inv_sqrt_sym(std::vector<double> m, int64_t n, double ridge,
                                        bool* ridged) {
  std::vector<double> eigvals, eigvecs;
  {
    std::vector<double> probe = m;
    jacobi_eigh(probe, n, eigvals, eigvecs);
  }
  double max_eig = eigvals.empty() ? 0.0 : eigvals.front();
  double min_eig = eigvals.empty() ? 0.0 : eigvals.back();
  if (min_eig < 1e-10 * std::max(max_eig, 1e-30)) {
    for (int64_t i = 0; i < n; ++i) m[size_t(i * n + i)] += ridge;
    if (ridged) *ridged = true;
    jacobi_eigh(m, n, eigvals, eigvecs);
  }
  std::vector<double> out(size_t(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0;
      for (int64_t a = 0; a < n; ++a) {
        double lam = std::max(eigvals[size_t(a)], 1e-30);
        s += eigvecs[size_t(i * n + a)] * eigvecs[size_t(j * n + a)] / std::sqrt(lam);
      }
      out[size_t(i * n + j)] = s;
    }
  return out;
}

inline std::vector<double> matmul_sq(const std::vector<double>& a, const std::vector<double>& b,
                                     int64_t n) {
  std::vector<double> c(size_t(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < n; ++k) {
      double av = a[size_t(i * n + k)];
      for (int64_t j = 0; j < n; ++j) c[size_t(i * n + j)] += av * b[size_t(k * n + j)];
    }
  return c;
}

}  // namespace detail

struct CcaOptions {
  int64_t max_components = 20;  // PCA reduction to min(20, features)
  double ridge = 1e-6;
};

struct CcaResult {
  double mean_correlation = 0.0;
  int64_t components = 0;
  bool ridge_applied = false;
};

// SVCCA-style mean canonical correlation of X[samples,fx] vs Y[samples,fy]:
// column-center, PCA-reduce each side to k = min(max_components, features),
// whiten, then average the singular values of the whitened cross-covariance,
// clamped to [0,1].
inline CcaResult cca_mean_correlation(const Tensor<double>& x, const Tensor<double>& y,
                                      const CcaOptions& opt = {}) {
  if (x.rank() != 2 || y.rank() != 2)
    throw ShapeError("cca: expected [samples, features] matrices");
  if (x.dims[0] != y.dims[0]) throw ShapeError("cca: sample counts differ");
  int64_t n = x.dims[0];
  if (n <= x.dims[1] || n <= y.dims[1])
    throw DomainError("cca: needs more samples than features (" + std::to_string(n) + " samples)");

  CcaResult result;
  int64_t k = std::min({opt.max_components, x.dims[1], y.dims[1]});
  result.components = k;

  Tensor<double> xc = detail::center_columns(x);
  Tensor<double> yc = detail::center_columns(y);
  Tensor<double> xp = detail::pca_project(xc, k);
  Tensor<double> yp = detail::pca_project(yc, k);

  std::vector<double> sxx = detail::cross_cov(xp, xp);
  std::vector<double> syy = detail::cross_cov(yp, yp);
  std::vector<double> sxy = detail::cross_cov(xp, yp);

  bool ridged = false;
  std::vector<double> wx = detail::inv_sqrt_sym(std::move(sxx), k, opt.ridge, &ridged);
  std::vector<double> wy = detail::inv_sqrt_sym(std::move(syy), k, opt.ridge, &ridged);
  result.ridge_applied = ridged;

  std::vector<double> t = detail::matmul_sq(detail::matmul_sq(wx, sxy, k), wy, k);
  // Singular values of t = sqrt of eigenvalues of t^T t.
  std::vector<double> tt(size_t(k * k), 0.0);
  for (int64_t i = 0; i < k; ++i)
    for (int64_t j = 0; j < k; ++j) {
      double s = 0;
      for (int64_t a = 0; a < k; ++a) s += t[size_t(a * k + i)] * t[size_t(a * k + j)];
      tt[size_t(i * k + j)] = s;
    }
  std::vector<double> eigvals, eigvecs;
  detail::jacobi_eigh(tt, k, eigvals, eigvecs);
  double total = 0;
  for (int64_t i = 0; i < k; ++i) {
    double sv = std::sqrt(std::max(eigvals[size_t(i)], 0.0));
    total += std::clamp(sv, 0.0, 1.0);
  }
  result.mean_correlation = std::clamp(total / double(k), 0.0, 1.0);
  return result;
}

// Flatten [H,W,N,C] features into an (H*W*N) x C sample matrix.
template <typename T>
Tensor<double> flatten_features(const Tensor<T>& t) {
  if (t.rank() != 4) throw ShapeError("flatten_features: expected [H,W,N,C]");
  Tensor<double> out({t.dims[0] * t.dims[1] * t.dims[2], t.dims[3]});
  for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = double(t.data[i]);
  return out;
}

struct RedundancyReport {
  std::vector<std::vector<double>> experts;  // Z x Z mean canonical correlations
  bool ridge_applied = false;
  int64_t components = 0;
};

// Pairwise mean canonical correlation among expert feature matrices.
inline RedundancyReport expert_redundancy(const std::vector<Tensor<double>>& features,
                                          const CcaOptions& opt = {}) {
  size_t z = features.size();
  RedundancyReport report;
  report.experts.assign(z, std::vector<double>(z, 0.0));
  for (size_t i = 0; i < z; ++i)
    for (size_t j = i; j < z; ++j) {
      CcaResult r = cca_mean_correlation(features[i], features[j], opt);
      report.experts[i][j] = r.mean_correlation;
      report.experts[j][i] = r.mean_correlation;
      report.ridge_applied = report.ridge_applied || r.ridge_applied;
      report.components = r.components;
    }
  return report;
}

// Coupling between the two streams of one block at one step.
template <typename T>
double stream_coupling(const Tensor<T>& spatial, const Tensor<T>& semantic,
                       const CcaOptions& opt = {}) {
  return cca_mean_correlation(flatten_features(spatial), flatten_features(semantic), opt)
      .mean_correlation;
}

}  // namespace pcaagg
