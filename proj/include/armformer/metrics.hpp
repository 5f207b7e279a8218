#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "armformer/datapipe.hpp"
#include "armformer/model.hpp"

namespace armformer {

/// Pixel counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = kNumClasses);

  int num_classes() const { return n_; }
  std::int64_t at(int gt, int pred) const { return counts_[gt * n_ + pred]; }
  std::int64_t& at(int gt, int pred) { return counts_[gt * n_ + pred]; }
  std::int64_t total() const;

  /// Adds one count per pixel. Throws ContractError on size mismatch or
  /// labels outside [0, num_classes).
  void accumulate(std::span<const int> pred, std::span<const int> gt);
  /// Entrywise sum; class counts must agree.
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  int n_;
  std::vector<std::int64_t> counts_;
};

ConfusionMatrix confusion_accumulate(ConfusionMatrix cm, std::span<const int> pred, std::span<const int> gt);

/// Ratios that are 0/0 are empty and left out of the means.
struct ClassMetrics {
  std::optional<double> iou;
  std::optional<double> acc;
  std::optional<double> precision;
  std::optional<double> fscore;
};

struct MetricReport {
  std::vector<ClassMetrics> classes;
  double mean_iou = 0.0;
  double mean_acc = 0.0;
  double mean_fscore = 0.0;
  bool include_background = true;
};

/// Per class: TP = cm[c][c], FP = column sum - TP, FN = row sum - TP;
/// IoU = TP/(TP+FP+FN), Acc = TP/(TP+FN), precision = TP/(TP+FP),
/// F = 2TP/(2TP+FP+FN). Means average the non-empty values of the included
/// classes; class 0 is excluded when include_background is false.
MetricReport compute_metrics(const ConfusionMatrix& cm, bool include_background = true);

/// Correct pixels over all pixels; 0 for an empty matrix.
double pixel_accuracy(const ConfusionMatrix& cm);

/// Predictions of `model` over `samples` in batches of `batch_size`.
ConfusionMatrix evaluate_confusion(const Model& model, std::span<const Sample> samples, std::int64_t batch_size = 8);
/// Pixel accuracy and mIoU (background included) of evaluate_confusion().
EvalSummary evaluate_summary(const Model& model, std::span<const Sample> samples, std::int64_t batch_size = 8);

/// Fixed-width table: one row per class plus a mean row. Empty values print as "-".
std::string format_metric_table(const MetricReport& report);
/// `key=value` lines: miou, macc, mfscore, include_background, then
/// iou.<class>, acc.<class>, fscore.<class> for non-empty values.
std::string format_metric_keyvalues(const MetricReport& report);

}  // namespace armformer
