#pragma once
// Segmentation metrics: confusion accumulation, per-class IoU / mIoU with a
// seen/unseen split, and the harmonic mean of the two split means.

#include <cmath>
#include <optional>
#include <vector>

#include "pcaagg/tensor.hpp"

namespace pcaagg {

inline constexpr int kMetricsIgnore = 255;

struct ConfusionMatrix {
  int64_t num_classes = 0;
  std::vector<int64_t> counts;  // rows = ground truth, cols = prediction

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int64_t n) : num_classes(n), counts(size_t(n * n), 0) {}

  int64_t& at(int64_t gt, int64_t pred) { return counts[size_t(gt * num_classes + pred)]; }
  int64_t at(int64_t gt, int64_t pred) const { return counts[size_t(gt * num_classes + pred)]; }

  int64_t total() const {
    int64_t t = 0;
    for (int64_t c : counts) t += c;
    return t;
  }

  void merge(const ConfusionMatrix& other) {
    if (other.num_classes != num_classes) throw ShapeError("confusion merge: size mismatch");
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }
};

inline void accumulate_confusion(const std::vector<int>& pred, const std::vector<int>& gt,
                                 ConfusionMatrix& cm, int ignore = kMetricsIgnore) {
  if (pred.size() != gt.size())
    throw ShapeError("accumulate_confusion: prediction/label size mismatch");
  for (size_t i = 0; i < pred.size(); ++i) {
    int g = gt[i];
    if (g == ignore) continue;
    int p = pred[i];
    if (g < 0 || g >= cm.num_classes || p < 0 || p >= cm.num_classes)
      throw DomainError("accumulate_confusion: label out of range at pixel " +
                        std::to_string(i));
    ++cm.at(g, p);
  }
}

struct EvalReport {
  std::vector<std::optional<double>> per_class_iou;  // nullopt = undefined (zero union)
  double miou = 0.0;
  std::optional<double> seen_miou;
  std::optional<double> unseen_miou;
  std::optional<double> hiou;
  bool hiou_degenerate = false;  // both split means were zero
  int64_t sample_count = 0;
};

// 2su/(s+u); s = u = 0 is defined as 0 with a warning flag.
inline double compute_hiou(double seen, double unseen, bool* degenerate = nullptr) {
  if (degenerate) *degenerate = false;
  if (seen == 0.0 && unseen == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return 2.0 * seen * unseen / (seen + unseen);
}

// IoU_c = tp / (tp + fp + fn); classes with zero union are undefined and
// excluded from means unless count_undefined_as_zero flips the convention.
inline EvalReport compute_miou(const ConfusionMatrix& cm,
                               const std::vector<uint8_t>& seen_mask = {},
                               bool count_undefined_as_zero = false) {
  int64_t n = cm.num_classes;
  EvalReport report;
  report.sample_count = cm.total();
  report.per_class_iou.resize(size_t(n));
  double total = 0;
  int64_t defined = 0;
  for (int64_t c = 0; c < n; ++c) {
    int64_t tp = cm.at(c, c);
    int64_t fp = 0, fn = 0;
    for (int64_t o = 0; o < n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    int64_t uni = tp + fp + fn;
    if (uni == 0) {
      if (count_undefined_as_zero) {
        report.per_class_iou[size_t(c)] = 0.0;
        ++defined;
      }
      continue;
    }
    double iou = double(tp) / double(uni);
    report.per_class_iou[size_t(c)] = iou;
    total += iou;
    ++defined;
  }
  if (defined == 0) throw DomainError("compute_miou: every class undefined (no labeled pixels)");
  report.miou = total / double(defined);

  if (!seen_mask.empty()) {
    if (int64_t(seen_mask.size()) != n) throw ShapeError("compute_miou: seen mask size mismatch");
    double s_total = 0, u_total = 0;
    int64_t s_n = 0, u_n = 0;
    for (int64_t c = 0; c < n; ++c) {
      if (!report.per_class_iou[size_t(c)].has_value()) continue;
      double iou = *report.per_class_iou[size_t(c)];
      if (seen_mask[size_t(c)]) {
        s_total += iou;
        ++s_n;
      } else {
        u_total += iou;
        ++u_n;
      }
    }
    if (s_n > 0) report.seen_miou = s_total / double(s_n);
    if (u_n > 0) report.unseen_miou = u_total / double(u_n);
    if (report.seen_miou && report.unseen_miou)
      report.hiou = compute_hiou(*report.seen_miou, *report.unseen_miou, &report.hiou_degenerate);
  }
  return report;
}

}  // namespace pcaagg
