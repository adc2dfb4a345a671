#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the code they check beyond plain data types and model forwards.

#include <cstdint>
#include <vector>

#include "cta/boxes.hpp"
#include "cta/rng.hpp"
#include "cta/taskmodels.hpp"

namespace cta::oracle {

// Exact rational evaluation of per-class AP/AR over integer-coordinate boxes.
struct DetectionRef {
  double map = 0;
  double mar = 0;
  std::vector<int> classes;
  std::vector<double> ap;
  std::vector<double> ar;
};
DetectionRef detection_reference(const std::vector<std::vector<Detection>>& predictions,
                                 const std::vector<std::vector<Box>>& ground_truth);

// Per-pixel counting over all (pred, gt) class pairs.
struct SegmentationRef {
  double gcr = 0;
  double miou = 0;
  std::vector<int> classes;
  std::vector<double> iou;
};
SegmentationRef segmentation_reference(const std::vector<std::vector<std::uint8_t>>& predictions,
                                       const std::vector<std::vector<std::uint8_t>>& ground_truth, int num_classes);

// Random instances on a small integer grid so IoU ties and threshold hits occur.
struct DetectionInstance {
  std::vector<std::vector<Detection>> predictions;
  std::vector<std::vector<Box>> ground_truth;
};
DetectionInstance random_detection_instance(Rng& rng, int images, int classes);

struct SegmentationInstance {
  std::vector<std::vector<std::uint8_t>> predictions;
  std::vector<std::vector<std::uint8_t>> ground_truth;
  int num_classes = 0;
};
SegmentationInstance random_segmentation_instance(Rng& rng, int images, int side, int num_classes);

// Grad-CAM with d(score)/d(features) taken by central differences through the
// model head, compared against the autodiff map.
// An element whose central difference at `step` disagrees with the one at
// step/10, or whose one-sided slopes disagree, sits on a kink (ReLU, argmax,
// threshold) and has no well-defined
// finite difference at this step; it is counted in `kinked` and takes the
// analytic gradient so it does not pollute the map comparison.
struct CamCheck {
  double worst = 0;  // max |map_fd - map_autodiff|
  int elements = 0;
  int kinked = 0;
};
CamCheck grad_cam_fd_check(const models::TaskModel<double>& model, const Tensor<double>& x, double step);

// Relative error of the end-to-end attention loss gradient w.r.t. x_adv on
// `pixels` random coordinates: |g_fd - g| / max(|g_fd|, |g|, floor) per pixel,
// worst case returned. Coordinates straddling a kink (same test as above) are
// redrawn and counted.
struct LossGradCheck {
  double worst_relative = 0;
  int pixels = 0;
  int kinked = 0;
  double loss = 0;
};
LossGradCheck loss_gradient_fd_check(const models::TaskModel<double>& extractor, const Tensor<double>& x_adv,
                                     Rng& rng, int pixels, double step);

// Tiny random instance: a task model with small widths and a random batch of 2.
struct TinyInstance {
  std::unique_ptr<models::TaskModel<double>> model;
  Tensor<double> x;
};
TinyInstance tiny_instance(models::Task task, std::uint64_t seed, int image_size = 32);

}  // namespace cta::oracle
