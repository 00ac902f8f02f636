#pragma once
// Central-finite-difference verification of analytic gradients. Always run
// in double precision; finite differences are unreliable in single.

#include <functional>
#include <map>

#include "pcaagg/tensor.hpp"

namespace pcaagg {

struct GradCheckLeaf {
  std::string name;
  double max_rel_err = 0.0;
  int64_t entries_checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  double tol = 0.0;
  double step = 0.0;
  bool pass = true;
  std::vector<GradCheckLeaf> leaves;

  double max_rel_err() const {
    double m = 0;
    for (const auto& l : leaves) m = std::max(m, l.max_rel_err);
    return m;
  }
};

// Objective under test: must re-read the current leaf values on every call
// and be deterministic. When want_grad is set it also reports the analytic
// gradient of each leaf by name.
using GradObjective =
    std::function<double(bool want_grad, std::map<std::string, Tensor<double>>* grads)>;

// Compares the analytic gradient of every leaf entry against the central
// difference (f(x+h) - f(x-h)) / 2h. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-8). Coordinates where both sides are below
// `zero_tol` count as matching: a structurally-zero gradient (softmax shift
// invariance, batchnorm mean subtraction) is computed by cancellation and
// carries ~1e-10 noise that no correct implementation can push under the
// 1e-8 floor. `max_entries_per_leaf` = 0 checks every entry; otherwise a
// deterministic stride subsample of that many entries.
inline GradCheckReport check_gradients(const GradObjective& f,
                                       std::vector<std::pair<std::string, Tensor<double>*>> leaves,
                                       double step = 1e-5, double tol = 1e-4,
                                       int64_t max_entries_per_leaf = 0,
                                       double zero_tol = 1e-7) {
  GradCheckReport report;
  report.tol = tol;
  report.step = step;

  std::map<std::string, Tensor<double>> analytic;
  f(true, &analytic);

  for (auto& [name, tensor] : leaves) {
    GradCheckLeaf leaf;
    leaf.name = name;
    Tensor<double> grad;
    auto it = analytic.find(name);
    if (it != analytic.end()) {
      grad = it->second;
      if (grad.dims != tensor->dims)
        throw ShapeError("check_gradients: gradient dims mismatch for leaf " + name);
    } else {
      grad = tensor->dims.empty() ? Tensor<double>::scalar(0.0)
                                  : Tensor<double>::zeros(tensor->dims);
    }
    int64_t n = tensor->numel();
    int64_t stride = 1;
    if (max_entries_per_leaf > 0 && n > max_entries_per_leaf)
      stride = (n + max_entries_per_leaf - 1) / max_entries_per_leaf;
    for (int64_t i = 0; i < n; i += stride) {
      double orig = tensor->data[size_t(i)];
      tensor->data[size_t(i)] = orig + step;
      double fp = f(false, nullptr);
      tensor->data[size_t(i)] = orig - step;
      double fm = f(false, nullptr);
      tensor->data[size_t(i)] = orig;
      double numeric = (fp - fm) / (2.0 * step);
      double a = grad.data[size_t(i)];
      if (std::abs(a) < zero_tol && std::abs(numeric) < zero_tol) {
        ++leaf.entries_checked;
        continue;
      }
      double rel = std::abs(a - numeric) /
                   std::max({std::abs(a), std::abs(numeric), 1e-8});
      leaf.max_rel_err = std::max(leaf.max_rel_err, rel);
      ++leaf.entries_checked;
    }
    leaf.pass = leaf.max_rel_err <= tol;
    report.pass = report.pass && leaf.pass;
    report.leaves.push_back(std::move(leaf));
  }
  return report;
}

}  // namespace pcaagg
