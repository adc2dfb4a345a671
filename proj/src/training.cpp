#include "cta/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "cta/errors.hpp"
#include "cta/layers.hpp"
#include "cta/rng.hpp"

namespace cta::models {
namespace {

using Batch = std::span<const data::MultiTaskSample* const>;

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Softmax cross-entropy over `classes` logits strided by `stride`.
double softmax_xent(const float* z, int classes, std::size_t stride, int target, float* dz, double scale) {
  double zmax = z[0];
  for (int k = 1; k < classes; ++k) zmax = std::max(zmax, static_cast<double>(z[k * stride]));
  double denom = 0;
  for (int k = 0; k < classes; ++k) denom += std::exp(z[k * stride] - zmax);
  for (int k = 0; k < classes; ++k) {
    const double p = std::exp(z[k * stride] - zmax) / denom;
    dz[k * stride] += static_cast<float>(scale * (p - (k == target ? 1.0 : 0.0)));
  }
  return -(z[target * stride] - zmax - std::log(denom));
}

template <typename LossFn>
TrainedModel train_generic(Task task, const data::Dataset& ds, const TrainOptions& opt, LossFn loss_fn,
                           const LossLogger& log) {
  if (opt.epochs < 1) throw std::invalid_argument("epochs must be ≥ 1");
  if (opt.batch_size < 1) throw std::invalid_argument("batch_size must be ≥ 1");
  if (ds.train.empty()) throw std::invalid_argument("training split is empty");
  TrainedModel out;
  out.model = make_model<float>({task, ds.spec.num_classes, opt.widths});
  Rng rng(stage_seed(opt.seed, "train-" + to_string(task)));
  out.model->init(rng);
  auto params = out.model->params();
  auto grads = nn::zeros_like(params);
  nn::Adam<float> adam(static_cast<float>(opt.learning_rate), 0.9f, 0.999f);

  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double sum = 0;
    for (std::size_t first = 0; first < order.size(); first += opt.batch_size) {
      const std::size_t count = std::min<std::size_t>(opt.batch_size, order.size() - first);
      std::vector<const data::MultiTaskSample*> batch;
      std::vector<Tensor<float>> images;
      for (std::size_t i = 0; i < count; ++i) {
        batch.push_back(&ds.train[order[first + i]]);
        images.push_back(batch.back()->image);
      }
      const auto trace = out.model->forward(stack<float>(images));
      Tensor<float> d_out(trace.outputs.shape());
      const double l = loss_fn(trace.outputs, Batch(batch), d_out);
      if (!std::isfinite(l)) {
        throw TrainingFailure("non-finite " + to_string(task) + " training loss at epoch " + std::to_string(epoch));
      }
      sum += l * count;
      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
      out.model->backward(trace, d_out, grads);
      adam.step(params, grads);
    }
    out.loss_history.push_back(sum / ds.train.size());
    if (log) log(epoch, out.loss_history.back());
  }
  return out;
}

}  // namespace

double classification_loss(const Tensor<float>& logits, Batch batch, Tensor<float>& d) {
  const int n = logits.n();
  const int c = logits.c();
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    loss += softmax_xent(logits.data() + static_cast<std::size_t>(i) * c, c, 1, batch[i]->class_label,
                         d.data() + static_cast<std::size_t>(i) * c, 1.0 / n);
  }
  return loss / n;
}

double segmentation_loss(const Tensor<float>& logits, Batch batch, Tensor<float>& d) {
  const int n = logits.n();
  const int c = logits.c();
  const std::size_t plane = logits.shape().plane();
  const double scale = 1.0 / (static_cast<double>(n) * plane);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const float* z = logits.data() + i * logits.shape().sample_size();
    float* dz = d.data() + i * logits.shape().sample_size();
    for (std::size_t p = 0; p < plane; ++p) {
      loss += softmax_xent(z + p, c, plane, batch[i]->mask[p], dz + p, scale);
    }
  }
  return loss * scale;
}

double detection_loss(const Tensor<float>& out, Batch batch, Tensor<float>& d) {
  constexpr double kBoxWeight = 5.0;
  constexpr double kNoObjWeight = 0.5;
  const int n = out.n();
  const int gh = out.h();
  const int gw = out.w();
  const int cells = gh * gw;
  const int nc = out.c() - 5;
  const double img = static_cast<double>(gh) * kDetStride;
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const float* z = out.data() + i * out.shape().sample_size();
    float* dz = d.data() + i * out.shape().sample_size();
    std::vector<const Box*> owner(cells, nullptr);
    for (const auto& b : batch[i]->boxes) {
      const double cx = (b.x_min + b.x_max) / 2;
      const double cy = (b.y_min + b.y_max) / 2;
      const int gx = std::min(static_cast<int>(cx / kDetStride), gw - 1);
      const int gy = std::min(static_cast<int>(cy / kDetStride), gh - 1);
      const Box*& slot = owner[gy * gw + gx];
      if (slot == nullptr || b.area() > slot->area()) slot = &b;
    }
    for (int cell = 0; cell < cells; ++cell) {
      const Box* b = owner[cell];
      const double obj = sigmoid(z[cell]);
      const double t = b != nullptr ? 1.0 : 0.0;
      const double w = b != nullptr ? 1.0 : kNoObjWeight;
      loss += -w * (t * std::log(std::max(obj, 1e-12)) + (1 - t) * std::log(std::max(1 - obj, 1e-12)));
      dz[cell] += static_cast<float>(w * (obj - t) / n);
      if (b == nullptr) continue;
      const int gx = cell % gw;
      const int gy = cell / gw;
      const double target[4] = {(b->x_min + b->x_max) / 2 / kDetStride - gx,
                                (b->y_min + b->y_max) / 2 / kDetStride - gy, (b->x_max - b->x_min) / img,
                                (b->y_max - b->y_min) / img};
      for (int k = 0; k < 4; ++k) {
        const double s = sigmoid(z[(1 + k) * cells + cell]);
        const double diff = s - target[k];
        loss += kBoxWeight * diff * diff;
        dz[(1 + k) * cells + cell] += static_cast<float>(kBoxWeight * 2 * diff * s * (1 - s) / n);
      }
      loss += softmax_xent(z + 5 * cells + cell, nc, cells, b->class_id, dz + 5 * cells + cell, 1.0 / n);
    }
  }
  return loss / n;
}

Tensor<float> stack_images(const std::vector<data::MultiTaskSample>& samples) {
  std::vector<Tensor<float>> images;
  images.reserve(samples.size());
  for (const auto& s : samples) images.push_back(s.image);
  return stack<float>(images);
}

namespace {
template <typename Fn>
void for_chunks(const Tensor<float>& images, int chunk, Fn fn) {
  for (int first = 0; first < images.n(); first += chunk) {
    const int count = std::min(chunk, images.n() - first);
    fn(first, images.slice(first, count));
  }
}
}  // namespace

std::vector<int> predict_classes(const TaskModel<float>& model, const Tensor<float>& images, int chunk) {
  std::vector<int> out;
  for_chunks(images, chunk, [&](int, const Tensor<float>& x) {
    const auto t = model.forward(x);
    for (int n = 0; n < x.n(); ++n) out.push_back(predict_class(t.outputs, n));
  });
  return out;
}

std::vector<std::vector<std::uint8_t>> predict_masks(const TaskModel<float>& model, const Tensor<float>& images,
                                                     int chunk) {
  std::vector<std::vector<std::uint8_t>> out;
  for_chunks(images, chunk, [&](int, const Tensor<float>& x) {
    const auto t = model.forward(x);
    for (int n = 0; n < x.n(); ++n) out.push_back(predict_mask(t.outputs, n));
  });
  return out;
}

std::vector<std::vector<Detection>> predict_detections(const TaskModel<float>& model, const Tensor<float>& images,
                                                       const DecodeOptions& decode, int chunk) {
  std::vector<std::vector<Detection>> out;
  for_chunks(images, chunk, [&](int, const Tensor<float>& x) {
    const auto t = model.forward(x);
    for (int n = 0; n < x.n(); ++n) out.push_back(predict_boxes(t.outputs, x.h(), n, decode));
  });
  return out;
}

double evaluate_classifier(const TaskModel<float>& model, const Tensor<float>& images,
                           const std::vector<data::MultiTaskSample>& samples) {
  const auto preds = predict_classes(model, images);
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.class_label);
  return metrics::top1_accuracy(preds, labels);
}

metrics::DetectionScores evaluate_detector(const TaskModel<float>& model, const Tensor<float>& images,
                                           const std::vector<data::MultiTaskSample>& samples,
                                           const DecodeOptions& decode) {
  std::vector<std::vector<Box>> gts;
  for (const auto& s : samples) gts.push_back(s.boxes);
  return metrics::detection_map_mar(predict_detections(model, images, decode), gts, 0.5);
}

metrics::SegmentationScores evaluate_segmenter(const TaskModel<float>& model, const Tensor<float>& images,
                                               const std::vector<data::MultiTaskSample>& samples, int num_classes) {
  std::vector<std::vector<std::uint8_t>> gts;
  for (const auto& s : samples) gts.push_back(s.mask);
  return metrics::segmentation_gcr_miou(predict_masks(model, images), gts, num_classes);
}

TrainedModel train_classifier(const data::Dataset& ds, const TrainOptions& opt, const LossLogger& log) {
  auto out = train_generic(Task::cls, ds, opt, classification_loss, log);
  out.gate_metric = evaluate_classifier(*out.model, stack_images(ds.test), ds.test);
  if (opt.enforce_gate && out.gate_metric < kClassifierGate) {
    throw TrainingFailure("classifier missed the clean Top-1 gate: " + std::to_string(out.gate_metric) + " < " +
                          std::to_string(kClassifierGate));
  }
  return out;
}

TrainedModel train_detector(const data::Dataset& ds, const TrainOptions& opt, const LossLogger& log) {
  auto out = train_generic(Task::det, ds, opt, detection_loss, log);
  out.gate_metric = evaluate_detector(*out.model, stack_images(ds.test), ds.test).map;
  if (opt.enforce_gate && out.gate_metric < kDetectorGate) {
    throw TrainingFailure("detector missed the clean mAP gate: " + std::to_string(out.gate_metric) + " < " +
                          std::to_string(kDetectorGate));
  }
  return out;
}

TrainedModel train_segmenter(const data::Dataset& ds, const TrainOptions& opt, const LossLogger& log) {
  auto out = train_generic(Task::seg, ds, opt, segmentation_loss, log);
  out.gate_metric = evaluate_segmenter(*out.model, stack_images(ds.test), ds.test, ds.spec.num_classes).miou;
  if (opt.enforce_gate && out.gate_metric < kSegmenterGate) {
    throw TrainingFailure("segmenter missed the clean mIoU gate: " + std::to_string(out.gate_metric) + " < " +
                          std::to_string(kSegmenterGate));
  }
  return out;
}

}  // namespace cta::models
