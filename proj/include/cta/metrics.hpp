#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cta/boxes.hpp"

namespace cta::metrics {

double top1_accuracy(std::span<const int> predictions, std::span<const int> labels);

struct DetectionScores {
  double map = 0;
  double mar = 0;
  std::vector<int> classes;  // classes with at least one ground-truth box
  std::vector<double> ap;    // aligned with classes
  std::vector<double> ar;
};

// Per class: predictions are ranked by confidence (ties keep image order) and
// each is matched to the unmatched ground truth of its class with the highest
// IoU >= iou_threshold. AP is the area under the precision envelope, AR the
// recall at the end of the ranking.
DetectionScores detection_map_mar(const std::vector<std::vector<Detection>>& predictions,
                                  const std::vector<std::vector<Box>>& ground_truth,
                                  double iou_threshold = 0.5);

struct SegmentationScores {
  double gcr = 0;
  double miou = 0;
  std::vector<int> classes;  // classes present in prediction or ground truth
  std::vector<double> iou;   // aligned with classes
};

// Masks hold values in [0, num_classes]; 0 is background and counts as a class.
SegmentationScores segmentation_gcr_miou(const std::vector<std::vector<std::uint8_t>>& predictions,
                                         const std::vector<std::vector<std::uint8_t>>& ground_truth,
                                         int num_classes);

}  // namespace cta::metrics
