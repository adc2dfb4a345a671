#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "cta/datagen.hpp"
#include "cta/metrics.hpp"
#include "cta/taskmodels.hpp"

namespace cta::models {

struct TrainOptions {
  int epochs = 10;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::array<int, 4> widths{16, 32, 64, 64};
  bool enforce_gate = true;
};

// Minimum clean quality on the test split.
inline constexpr double kClassifierGate = 0.90;   // Top-1
inline constexpr double kDetectorGate = 0.50;     // mAP@0.5
inline constexpr double kSegmenterGate = 0.60;    // mIoU

struct TrainedModel {
  std::unique_ptr<TaskModel<float>> model;
  std::vector<double> loss_history;  // mean loss per epoch
  double gate_metric = 0;            // Top-1, mAP or mIoU on the test split
};

using LossLogger = std::function<void(int epoch, double mean_loss)>;

// Each trainer evaluates the test split after training and throws
// TrainingFailure naming the metric when the gate is missed (unless disabled).
TrainedModel train_classifier(const data::Dataset& dataset, const TrainOptions& options, const LossLogger& log = {});
TrainedModel train_detector(const data::Dataset& dataset, const TrainOptions& options, const LossLogger& log = {});
TrainedModel train_segmenter(const data::Dataset& dataset, const TrainOptions& options, const LossLogger& log = {});

// Loss on a batch of outputs; fills d_outputs (same shape). Labels come from
// the samples in `batch` order.
double classification_loss(const Tensor<float>& logits, std::span<const data::MultiTaskSample* const> batch,
                           Tensor<float>& d_logits);
double segmentation_loss(const Tensor<float>& logits, std::span<const data::MultiTaskSample* const> batch,
                         Tensor<float>& d_logits);
double detection_loss(const Tensor<float>& outputs, std::span<const data::MultiTaskSample* const> batch,
                      Tensor<float>& d_outputs);

// Inference over images (N, 3, H, W) in chunks.
std::vector<int> predict_classes(const TaskModel<float>& model, const Tensor<float>& images, int chunk = 64);
std::vector<std::vector<std::uint8_t>> predict_masks(const TaskModel<float>& model, const Tensor<float>& images,
                                                     int chunk = 64);
std::vector<std::vector<Detection>> predict_detections(const TaskModel<float>& model, const Tensor<float>& images,
                                                       const DecodeOptions& decode = {}, int chunk = 64);

double evaluate_classifier(const TaskModel<float>& model, const Tensor<float>& images,
                           const std::vector<data::MultiTaskSample>& samples);
metrics::DetectionScores evaluate_detector(const TaskModel<float>& model, const Tensor<float>& images,
                                           const std::vector<data::MultiTaskSample>& samples,
                                           const DecodeOptions& decode = {});
metrics::SegmentationScores evaluate_segmenter(const TaskModel<float>& model, const Tensor<float>& images,
                                               const std::vector<data::MultiTaskSample>& samples, int num_classes);

Tensor<float> stack_images(const std::vector<data::MultiTaskSample>& samples);

}  // namespace cta::models
