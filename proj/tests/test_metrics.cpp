#include <gtest/gtest.h>

#include "cta/metrics.hpp"
#include "oracles.hpp"

using namespace cta;
using namespace cta::metrics;

namespace {

Box box(int cls, float x0, float y0, float x1, float y1) { return {cls, x0, y0, x1, y1}; }

}  // namespace

TEST(Top1, Examples) {
  const std::vector<int> labels{0, 1, 2, 3};
  EXPECT_EQ(top1_accuracy(std::vector<int>{0, 1, 2, 3}, labels), 1.0);
  EXPECT_EQ(top1_accuracy(std::vector<int>{0, 1, 0, 0}, labels), 0.5);
  EXPECT_EQ(top1_accuracy(std::vector<int>{1, 0, 0, 0}, labels), 0.0);
  EXPECT_THROW(top1_accuracy(std::vector<int>{}, std::vector<int>{}), std::invalid_argument);
}

TEST(Detection, SinglePerfectMatch) {
  // IoU 0.6: a 10x10 box against a 10x6 box inside it.
  const std::vector<std::vector<Box>> gt{{box(0, 0, 0, 10, 10)}};
  const std::vector<std::vector<Detection>> pred{{{box(0, 0, 0, 10, 6), 0.9f}}};
  const auto s = detection_map_mar(pred, gt);
  EXPECT_EQ(s.map, 1.0);
  EXPECT_EQ(s.mar, 1.0);
}

TEST(Detection, BelowThresholdIsMiss) {
  const std::vector<std::vector<Box>> gt{{box(0, 0, 0, 10, 10)}};
  const std::vector<std::vector<Detection>> pred{{{box(0, 0, 0, 10, 3), 0.9f}}};
  const auto s = detection_map_mar(pred, gt);
  EXPECT_EQ(s.map, 0.0);
  EXPECT_EQ(s.mar, 0.0);
}

TEST(Detection, InvalidBoxesThrow) {
  const std::vector<std::vector<Box>> gt{{box(0, 5, 5, 5, 9)}};
  const std::vector<std::vector<Detection>> none{{}};
  EXPECT_THROW(detection_map_mar(none, gt), std::invalid_argument);
}

TEST(Detection, ConstructedThreeImageTwoClassInstance) {
  const std::vector<std::vector<Box>> gt{
      {box(0, 0, 0, 4, 4), box(1, 4, 4, 8, 8)}, {box(0, 2, 2, 6, 6)}, {box(1, 0, 0, 3, 3), box(1, 5, 5, 8, 8)}};
  const std::vector<std::vector<Detection>> pred{
      {{box(0, 0, 0, 4, 4), 0.9f}, {box(1, 0, 0, 2, 2), 0.8f}},
      {{box(0, 2, 2, 6, 5), 0.6f}, {box(0, 2, 2, 6, 6), 0.6f}},
      {{box(1, 0, 0, 3, 3), 0.7f}, {box(1, 5, 5, 8, 7), 0.4f}}};
  const auto s = detection_map_mar(pred, gt);
  const auto r = oracle::detection_reference(pred, gt);
  EXPECT_EQ(s.classes, r.classes);
  for (std::size_t i = 0; i < r.ap.size(); ++i) {
    EXPECT_NEAR(s.ap[i], r.ap[i], 1e-12);
    EXPECT_EQ(s.ar[i], r.ar[i]);
  }
  EXPECT_NEAR(s.map, r.map, 1e-12);
}

TEST(Detection, MatchesBruteForceOracle) {
  Rng rng(77);
  for (int t = 0; t < 200; ++t) {
    const auto inst = oracle::random_detection_instance(rng, 3, 2);
    const auto s = detection_map_mar(inst.predictions, inst.ground_truth);
    const auto r = oracle::detection_reference(inst.predictions, inst.ground_truth);
    ASSERT_EQ(s.classes, r.classes) << "instance " << t;
    for (std::size_t i = 0; i < r.ap.size(); ++i) {
      EXPECT_NEAR(s.ap[i], r.ap[i], 1e-12) << "instance " << t;
      EXPECT_EQ(s.ar[i], r.ar[i]) << "instance " << t;
    }
    EXPECT_NEAR(s.map, r.map, 1e-12);
    EXPECT_NEAR(s.mar, r.mar, 1e-12);
  }
}

TEST(Detection, MonotoneUnderFalsePositiveRemovalAndTruePositiveAddition) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    auto inst = oracle::random_detection_instance(rng, 3, 2);
    const auto base = detection_map_mar(inst.predictions, inst.ground_truth);
    // Remove one prediction that matches no ground truth of its class at all.
    for (auto& preds : inst.predictions) {
      for (std::size_t k = 0; k < preds.size(); ++k) {
        bool can_match = false;
        const std::size_t img = &preds - inst.predictions.data();
        for (const auto& g : inst.ground_truth[img]) {
          can_match |= g.class_id == preds[k].box.class_id && iou(g, preds[k].box) >= 0.5f;
        }
        if (can_match) continue;
        auto fewer = inst.predictions;
        fewer[img].erase(fewer[img].begin() + static_cast<long>(k));
        const auto s = detection_map_mar(fewer, inst.ground_truth);
        for (std::size_t c = 0; c < s.ap.size(); ++c) EXPECT_GE(s.ap[c] + 1e-12, base.ap[c]);
      }
    }
    // A lowest-confidence exact copy of a ground-truth box never lowers recall.
    for (std::size_t img = 0; img < inst.ground_truth.size(); ++img) {
      if (inst.ground_truth[img].empty()) continue;
      auto more = inst.predictions;
      more[img].push_back({inst.ground_truth[img][0], 0.01f});
      const auto s = detection_map_mar(more, inst.ground_truth);
      for (std::size_t c = 0; c < s.ar.size(); ++c) EXPECT_GE(s.ar[c], base.ar[c]);
      break;
    }
    for (double v : base.ap) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Segmentation, PerfectPrediction) {
  const std::vector<std::vector<std::uint8_t>> m{{0, 1, 2, 2}};
  const auto s = segmentation_gcr_miou(m, m, 2);
  EXPECT_EQ(s.gcr, 1.0);
  EXPECT_EQ(s.miou, 1.0);
}

TEST(Segmentation, HandCountedSevenTwelfths) {
  const std::vector<std::vector<std::uint8_t>> gt{{0, 0, 1, 1}};
  const std::vector<std::vector<std::uint8_t>> pred{{0, 1, 1, 1}};
  const auto s = segmentation_gcr_miou(pred, gt, 1);
  EXPECT_EQ(s.gcr, 0.75);
  ASSERT_EQ(s.iou.size(), 2u);
  EXPECT_EQ(s.iou[0], 0.5);
  EXPECT_EQ(s.iou[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.miou, 7.0 / 12.0);
}

TEST(Segmentation, RejectsBadInputs) {
  const std::vector<std::vector<std::uint8_t>> a{{0, 1}}, b{{0}}, c{{0, 5}};
  EXPECT_THROW(segmentation_gcr_miou(a, b, 1), std::invalid_argument);
  EXPECT_THROW(segmentation_gcr_miou(a, c, 1), std::invalid_argument);
}

TEST(Segmentation, MatchesCountingOracle) {
  Rng rng(31);
  for (int t = 0; t < 200; ++t) {
    const int k = rng.uniform_int(1, 4);
    const auto inst = oracle::random_segmentation_instance(rng, 4, 6, k);
    const auto s = segmentation_gcr_miou(inst.predictions, inst.ground_truth, k);
    const auto r = oracle::segmentation_reference(inst.predictions, inst.ground_truth, k);
    EXPECT_EQ(s.gcr, r.gcr);
    EXPECT_EQ(s.classes, r.classes);
    EXPECT_EQ(s.iou, r.iou);
    EXPECT_EQ(s.miou, r.miou);
  }
}
