#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cta/boxes.hpp"
#include "cta/layers.hpp"
#include "cta/rng.hpp"
#include "cta/tensor.hpp"

namespace cta::models {

enum class Task { cls, det, seg };
std::string to_string(Task task);
Task task_from_string(const std::string& name);

struct FeatureTap {
  std::string layer_id;
  int channels = 0;
  int height = 0;
  int width = 0;
};

// Activations of one forward pass. `features` are the tap activations and
// `outputs` the head outputs; `saved` holds model-specific intermediates.
template <typename T>
struct Trace {
  Tensor<T> input;
  std::vector<Tensor<T>> saved;
  std::vector<Tensor<T>> pre;  // backbone conv outputs before normalization
  Tensor<T> features;
  Tensor<T> outputs;
};

struct ModelConfig {
  Task task = Task::cls;
  int num_classes = 4;
  std::array<int, 4> widths{16, 32, 64, 64};
};

// Output layouts:
//   cls: (N, C, 1, 1) logits
//   seg: (N, C + 1, H, W) logits, channel 0 is background
//   det: (N, 5 + C, H/8, W/8): objectness logit, tx, ty, tw, th, class logits
template <typename T>
class TaskModel {
 public:
  explicit TaskModel(ModelConfig config) : config_(config) {}
  virtual ~TaskModel() = default;

  const ModelConfig& config() const { return config_; }
  Task task() const { return config_.task; }
  int num_classes() const { return config_.num_classes; }

  virtual std::string architecture_id() const = 0;
  virtual FeatureTap tap(int image_height, int image_width) const = 0;

  virtual void init(Rng& rng) = 0;
  virtual Trace<T> forward(const Tensor<T>& x) const = 0;

  // Head outputs from replacement tap features; any other state (skip
  // connections) comes from `trace`.
  virtual Tensor<T> head(const Trace<T>& trace, const Tensor<T>& features) const = 0;
  // d(outputs)/d(features) applied to d_outputs, at trace.features.
  virtual Tensor<T> head_backward(const Trace<T>& trace, const Tensor<T>& d_outputs) const = 0;
  // Gradient w.r.t. the input image given a gradient on the tap features.
  virtual Tensor<T> features_backward(const Trace<T>& trace, const Tensor<T>& d_features) const = 0;
  // Accumulates parameter gradients (aligned with params()).
  virtual void backward(const Trace<T>& trace, const Tensor<T>& d_outputs,
                        nn::GradBuffers<T>& grads) const = 0;

  virtual std::vector<std::vector<T>*> params() = 0;
  std::vector<const std::vector<T>*> params() const;

  virtual std::unique_ptr<TaskModel<T>> clone() const = 0;

  std::uint64_t weights_hash() const;

 private:
  ModelConfig config_;
};

template <typename T>
std::unique_ptr<TaskModel<T>> make_model(const ModelConfig& config);

// Copies parameters between precisions (e.g. a trained float model into a
// double model for gradient checks).
template <typename To, typename From>
std::unique_ptr<TaskModel<To>> convert_model(const TaskModel<From>& model);

struct TaskScore {
  double value = 0;
  int class_id = 0;
};

struct ScoreOptions {
  double det_tau = 0.5;
};

// Scalar target for Grad-CAM on a single sample's outputs (n == 1) and its
// gradient w.r.t. those outputs.
template <typename T>
TaskScore task_scalar_score(Task task, const Tensor<T>& outputs, const ScoreOptions& options = {},
                            Tensor<T>* d_outputs = nullptr);

// Decoding. Ties resolve to the lowest class id.
template <typename T>
int predict_class(const Tensor<T>& logits, int sample = 0);
template <typename T>
std::vector<std::uint8_t> predict_mask(const Tensor<T>& logits, int sample = 0);

struct DecodeOptions {
  double score_threshold = 0.05;
  double nms_iou = 0.45;
};

template <typename T>
std::vector<Detection> predict_boxes(const Tensor<T>& outputs, int image_size, int sample = 0,
                                     const DecodeOptions& options = {});

// Greedy per-class non-maximum suppression, highest confidence first.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold);

inline constexpr int kDetStride = 8;

}  // namespace cta::models
