#include "armformer/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "armformer/errors.hpp"

namespace armformer {

ConfusionMatrix::ConfusionMatrix(int num_classes) : n_(num_classes) {
  if (num_classes < 1) throw ContractError("confusion matrix: need at least one class");
  counts_.assign(static_cast<std::size_t>(n_) * n_, 0);
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

void ConfusionMatrix::accumulate(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size())
    throw ContractError("confusion matrix: prediction has " + std::to_string(pred.size()) +
                        " pixels, ground truth " + std::to_string(gt.size()));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], g = gt[i];
    if (p < 0 || p >= n_ || g < 0 || g >= n_)
      throw ContractError("confusion matrix: label out of range at pixel " + std::to_string(i));
    ++counts_[g * n_ + p];
  }
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw ContractError("confusion matrix: class counts differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion_accumulate(ConfusionMatrix cm, std::span<const int> pred, std::span<const int> gt) {
  cm.accumulate(pred, gt);
  return cm;
}

namespace {

std::optional<double> ratio(std::int64_t num, std::int64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

double mean_of(const std::vector<ClassMetrics>& classes, int first, std::optional<double> ClassMetrics::*field) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t c = first; c < classes.size(); ++c)
    if (auto v = classes[c].*field) {
      sum += *v;
      ++n;
    }
  return n == 0 ? 0.0 : sum / n;
}

std::string class_name(int c) {
  return c < kNumClasses ? std::string(kPalette[c].name) : "class" + std::to_string(c);
}

std::string cell(const std::optional<double>& v) {
  char buf[16];
  if (!v) return "-";
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

MetricReport compute_metrics(const ConfusionMatrix& cm, bool include_background) {
  const int n = cm.num_classes();
  MetricReport r;
  r.include_background = include_background;
  r.classes.resize(n);
  for (int c = 0; c < n; ++c) {
    std::int64_t row = 0, col = 0;
    for (int k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::int64_t tp = cm.at(c, c), fp = col - tp, fn = row - tp;
    auto& m = r.classes[c];
    m.iou = ratio(tp, tp + fp + fn);
    m.acc = ratio(tp, tp + fn);
    m.precision = ratio(tp, tp + fp);
    m.fscore = ratio(2 * tp, 2 * tp + fp + fn);
  }
  const int first = include_background ? 0 : 1;
  r.mean_iou = mean_of(r.classes, first, &ClassMetrics::iou);
  r.mean_acc = mean_of(r.classes, first, &ClassMetrics::acc);
  r.mean_fscore = mean_of(r.classes, first, &ClassMetrics::fscore);
  return r;
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) return 0.0;
  std::int64_t diag = 0;
  for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

ConfusionMatrix evaluate_confusion(const Model& model, std::span<const Sample> samples, std::int64_t batch_size) {
  if (batch_size < 1) throw ContractError("evaluate: batch size must be >= 1");
  ConfusionMatrix cm(static_cast<int>(model.config().num_classes));
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) idx.push_back(i);
    auto batch = make_batch(samples, idx);
    cm.accumulate(model.predict(batch.images), batch.labels);
  }
  return cm;
}

EvalSummary evaluate_summary(const Model& model, std::span<const Sample> samples, std::int64_t batch_size) {
  auto cm = evaluate_confusion(model, samples, batch_size);
  return {pixel_accuracy(cm), compute_metrics(cm).mean_iou};
}

std::string format_metric_table(const MetricReport& report) {
  std::string out;
  char line[96];
  std::snprintf(line, sizeof line, "%-12s %8s %8s %8s\n", "class", "IoU", "Acc", "Fscore");
  out += line;
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    const auto& m = report.classes[c];
    std::snprintf(line, sizeof line, "%-12s %8s %8s %8s\n", class_name(static_cast<int>(c)).c_str(),
                  cell(m.iou).c_str(), cell(m.acc).c_str(), cell(m.fscore).c_str());
    out += line;
  }
  std::snprintf(line, sizeof line, "%-12s %8.4f %8.4f %8.4f\n", report.include_background ? "mean" : "mean(fg)",
                report.mean_iou, report.mean_acc, report.mean_fscore);
  out += line;
  return out;
}

std::string format_metric_keyvalues(const MetricReport& report) {
  std::string out;
  char buf[64];
  auto put = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    out += key + "=" + buf + "\n";
  };
  put("miou", report.mean_iou);
  put("macc", report.mean_acc);
  put("mfscore", report.mean_fscore);
  out += std::string("include_background=") + (report.include_background ? "true" : "false") + "\n";
  for (std::size_t c = 0; c < report.classes.size(); ++c) {
    const auto& m = report.classes[c];
    const auto name = class_name(static_cast<int>(c));
    if (m.iou) put("iou." + name, *m.iou);
    if (m.acc) put("acc." + name, *m.acc);
    if (m.fscore) put("fscore." + name, *m.fscore);
  }
  return out;
}

}  // namespace armformer
