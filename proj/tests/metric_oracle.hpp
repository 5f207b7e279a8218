#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace armformer::testing {

struct OracleClass {
  std::optional<double> iou, acc, fscore;
};

struct OracleReport {
  std::vector<OracleClass> classes;
  double miou = 0.0, macc = 0.0, mfscore = 0.0;
};

/// Per-class pixel scan over every (pred, gt) pair; never builds a matrix.
inline OracleReport brute_force_metrics(const std::vector<std::vector<int>>& preds,
                                        const std::vector<std::vector<int>>& gts, int num_classes,
                                        bool include_background) {
  OracleReport r;
  r.classes.resize(num_classes);
  double s_iou = 0, s_acc = 0, s_f = 0;
  int n_iou = 0, n_acc = 0, n_f = 0;
  for (int c = 0; c < num_classes; ++c) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t m = 0; m < preds.size(); ++m)
      for (std::size_t i = 0; i < preds[m].size(); ++i) {
        const bool p = preds[m][i] == c, g = gts[m][i] == c;
        tp += p && g;
        fp += p && !g;
        fn += !p && g;
      }
    auto& o = r.classes[c];
    if (tp + fp + fn > 0) o.iou = double(tp) / double(tp + fp + fn);
    if (tp + fn > 0) o.acc = double(tp) / double(tp + fn);
    if (2 * tp + fp + fn > 0) o.fscore = double(2 * tp) / double(2 * tp + fp + fn);
    if (c == 0 && !include_background) continue;
    if (o.iou) s_iou += *o.iou, ++n_iou;
    if (o.acc) s_acc += *o.acc, ++n_acc;
    if (o.fscore) s_f += *o.fscore, ++n_f;
  }
  r.miou = n_iou ? s_iou / n_iou : 0.0;
  r.macc = n_acc ? s_acc / n_acc : 0.0;
  r.mfscore = n_f ? s_f / n_f : 0.0;
  return r;
}

}  // namespace armformer::testing
