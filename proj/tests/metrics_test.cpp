#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "armformer/errors.hpp"
#include "armformer/metrics.hpp"
#include "armformer/random.hpp"
#include "metric_oracle.hpp"

using namespace armformer;

namespace {

std::vector<int> random_map(Rng& rng, std::size_t n, int classes) {
  std::vector<int> m(n);
  for (auto& v : m) v = static_cast<int>(rng.below(classes));
  return m;
}

// Correlated prediction: keeps the ground truth with probability 0.7.
std::vector<int> noisy_copy(Rng& rng, const std::vector<int>& gt, int classes) {
  std::vector<int> p = gt;
  for (auto& v : p)
    if (rng.uniform() > 0.7) v = static_cast<int>(rng.below(classes));
  return p;
}

}  // namespace

TEST(Confusion, PerfectPredictionFillsDiagonalOnly) {
  std::vector<int> gt{0, 1, 2, 3, 4, 5, 5, 1};
  ConfusionMatrix cm;
  cm.accumulate(gt, gt);
  for (int g = 0; g < kNumClasses; ++g)
    for (int p = 0; p < kNumClasses; ++p)
      if (g != p) {
        EXPECT_EQ(cm.at(g, p), 0);
      }
  EXPECT_EQ(cm.at(5, 5), 2);
  EXPECT_EQ(cm.total(), 8);
}

TEST(Confusion, TwoByTwoHandCase) {
  std::vector<int> gt{0, 0, 1, 1}, pred{0, 1, 1, 1};
  auto cm = confusion_accumulate(ConfusionMatrix{}, pred, gt);
  EXPECT_EQ(cm.at(0, 0), 1);
  EXPECT_EQ(cm.at(0, 1), 1);
  EXPECT_EQ(cm.at(1, 1), 2);
  EXPECT_EQ(cm.at(1, 0), 0);
  EXPECT_EQ(cm.total(), 4);
}

TEST(Confusion, AccumulationOrderIrrelevant) {
  Rng rng(1);
  auto g1 = random_map(rng, 64, 6), p1 = random_map(rng, 64, 6);
  auto g2 = random_map(rng, 64, 6), p2 = random_map(rng, 64, 6);
  auto ab = confusion_accumulate(confusion_accumulate(ConfusionMatrix{}, p1, g1), p2, g2);
  auto ba = confusion_accumulate(confusion_accumulate(ConfusionMatrix{}, p2, g2), p1, g1);
  EXPECT_EQ(ab, ba);
  auto shard = confusion_accumulate(ConfusionMatrix{}, p2, g2);
  auto merged = confusion_accumulate(ConfusionMatrix{}, p1, g1);
  merged += shard;
  EXPECT_EQ(merged, ab);
}

TEST(Confusion, ContractViolations) {
  ConfusionMatrix cm;
  std::vector<int> a{0, 1, 2}, b{0, 1};
  EXPECT_THROW(cm.accumulate(a, b), ContractError);
  std::vector<int> bad{0, 6, 1};
  EXPECT_THROW(cm.accumulate(bad, a), ContractError);
  std::vector<int> neg{0, -1, 1};
  EXPECT_THROW(cm.accumulate(a, neg), ContractError);
  ConfusionMatrix two(2);
  EXPECT_THROW(cm += two, ContractError);
}

TEST(Metrics, PerfectDiagonal) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 10;
  cm.at(1, 1) = 5;
  auto r = compute_metrics(cm);
  for (const auto& c : r.classes) {
    EXPECT_EQ(*c.iou, 1.0);
    EXPECT_EQ(*c.acc, 1.0);
    EXPECT_EQ(*c.fscore, 1.0);
  }
  EXPECT_EQ(r.mean_iou, 1.0);
}

TEST(Metrics, HandWorkedTwoClassCase) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 1;
  cm.at(0, 1) = 1;
  cm.at(1, 1) = 2;
  auto r = compute_metrics(cm);
  EXPECT_DOUBLE_EQ(*r.classes[0].iou, 0.5);
  EXPECT_DOUBLE_EQ(*r.classes[0].acc, 0.5);
  EXPECT_DOUBLE_EQ(*r.classes[0].precision, 1.0);
  EXPECT_DOUBLE_EQ(*r.classes[0].fscore, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.classes[1].iou, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.classes[1].acc, 1.0);
  EXPECT_DOUBLE_EQ(*r.classes[1].precision, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.classes[1].fscore, 0.8);
  EXPECT_DOUBLE_EQ(r.mean_iou, (0.5 + 2.0 / 3.0) / 2.0);
  EXPECT_DOUBLE_EQ(r.mean_acc, 0.75);
}

TEST(Metrics, AbsentClassesSkippedFromMeans) {
  // Six-class matrix in which only classes 0 and 1 occur: same means as the 2x2 case.
  ConfusionMatrix cm;
  cm.at(0, 0) = 1;
  cm.at(0, 1) = 1;
  cm.at(1, 1) = 2;
  auto r = compute_metrics(cm);
  for (int c = 2; c < kNumClasses; ++c) {
    EXPECT_FALSE(r.classes[c].iou.has_value());
    EXPECT_FALSE(r.classes[c].fscore.has_value());
  }
  EXPECT_DOUBLE_EQ(r.mean_iou, (0.5 + 2.0 / 3.0) / 2.0);
}

TEST(Metrics, PredictedButAbsentClassScoresZeroIou) {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 3;
  cm.at(0, 2) = 1;
  auto r = compute_metrics(cm);
  EXPECT_EQ(*r.classes[2].iou, 0.0);
  EXPECT_EQ(*r.classes[2].fscore, 0.0);
  EXPECT_FALSE(r.classes[2].acc.has_value());
  EXPECT_DOUBLE_EQ(r.mean_iou, 0.75 / 2.0);
  EXPECT_DOUBLE_EQ(r.mean_acc, 0.75);
}

TEST(Metrics, BackgroundExclusion) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 1;
  cm.at(0, 1) = 1;
  cm.at(1, 1) = 2;
  auto r = compute_metrics(cm, false);
  EXPECT_FALSE(r.include_background);
  EXPECT_DOUBLE_EQ(r.mean_iou, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.mean_fscore, 0.8);
  EXPECT_DOUBLE_EQ(*r.classes[0].iou, 0.5);
}

TEST(Metrics, EmptyMatrixGivesZeroMeans) {
  auto r = compute_metrics(ConfusionMatrix{});
  EXPECT_EQ(r.mean_iou, 0.0);
  for (const auto& c : r.classes) EXPECT_FALSE(c.iou.has_value());
}

TEST(Metrics, MatchesBruteForceOracleOn200Pairs) {
  Rng rng(2024);
  std::vector<std::vector<int>> preds, gts;
  ConfusionMatrix cm;
  for (int k = 0; k < 200; ++k) {
    // Half the maps omit some classes so that skipping paths are exercised.
    const int classes = k % 2 ? kNumClasses : 1 + static_cast<int>(rng.below(kNumClasses));
    auto gt = random_map(rng, 16 * 16, classes);
    auto pred = noisy_copy(rng, gt, classes);
    cm.accumulate(pred, gt);
    gts.push_back(gt);
    preds.push_back(pred);

    for (bool bg : {true, false}) {
      auto single = compute_metrics(confusion_accumulate(ConfusionMatrix{}, pred, gt), bg);
      auto oracle = armformer::testing::brute_force_metrics({pred}, {gt}, kNumClasses, bg);
      for (int c = 0; c < kNumClasses; ++c) {
        ASSERT_EQ(single.classes[c].iou, oracle.classes[c].iou) << "pair " << k << " class " << c;
        ASSERT_EQ(single.classes[c].acc, oracle.classes[c].acc);
        ASSERT_EQ(single.classes[c].fscore, oracle.classes[c].fscore);
        if (auto iou = single.classes[c].iou) {
          ASSERT_LE(std::abs(*single.classes[c].fscore - 2.0 * *iou / (1.0 + *iou)), 1e-12);
        }
      }
      ASSERT_EQ(single.mean_iou, oracle.miou);
      ASSERT_EQ(single.mean_acc, oracle.macc);
      ASSERT_EQ(single.mean_fscore, oracle.mfscore);
    }
  }
  auto all = compute_metrics(cm);
  auto oracle = armformer::testing::brute_force_metrics(preds, gts, kNumClasses, true);
  EXPECT_EQ(all.mean_iou, oracle.miou);
  EXPECT_EQ(all.mean_fscore, oracle.mfscore);
}

TEST(Metrics, IouBoundedByFscore) {
  Rng rng(9);
  for (int k = 0; k < 50; ++k) {
    auto gt = random_map(rng, 100, 6);
    auto r = compute_metrics(confusion_accumulate(ConfusionMatrix{}, noisy_copy(rng, gt, 6), gt));
    for (const auto& c : r.classes)
      if (c.iou) {
        EXPECT_LE(*c.iou, *c.fscore);
        EXPECT_LE(*c.fscore, 1.0);
      }
  }
}

TEST(Metrics, InvariantUnderConsistentRelabeling) {
  Rng rng(4);
  std::vector<int> perm(kNumClasses);
  std::iota(perm.begin(), perm.end(), 0);
  for (int k = 0; k < 20; ++k) {
    auto gt = random_map(rng, 256, 6), pred = noisy_copy(rng, gt, 6);
    for (int i = kNumClasses - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    auto gt2 = gt, pred2 = pred;
    for (auto& v : gt2) v = perm[v];
    for (auto& v : pred2) v = perm[v];
    auto a = compute_metrics(confusion_accumulate(ConfusionMatrix{}, pred, gt));
    auto b = compute_metrics(confusion_accumulate(ConfusionMatrix{}, pred2, gt2));
    for (int c = 0; c < kNumClasses; ++c) {
      EXPECT_EQ(a.classes[c].iou, b.classes[perm[c]].iou);
      EXPECT_EQ(a.classes[c].fscore, b.classes[perm[c]].fscore);
    }
    EXPECT_NEAR(a.mean_iou, b.mean_iou, 1e-15);
  }
}

TEST(Metrics, TextFormats) {
  ConfusionMatrix cm;
  cm.at(0, 0) = 3;
  cm.at(1, 1) = 1;
  cm.at(1, 0) = 1;
  auto r = compute_metrics(cm);
  auto table = format_metric_table(r);
  EXPECT_NE(table.find("background"), std::string::npos);
  EXPECT_NE(table.find("revolver"), std::string::npos);
  EXPECT_NE(table.find("mean"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), kNumClasses + 2);

  auto kv = format_metric_keyvalues(r);
  EXPECT_NE(kv.find("miou=0.625\n"), std::string::npos) << kv;
  EXPECT_NE(kv.find("iou.handgun=0.5\n"), std::string::npos) << kv;
  EXPECT_EQ(kv.find("iou.knife"), std::string::npos);
  EXPECT_NE(kv.find("include_background=true"), std::string::npos);
}
