#include "cta/metrics.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

namespace cta::metrics {

double top1_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.empty()) throw std::invalid_argument("top1_accuracy: empty input");
  if (predictions.size() != labels.size()) throw std::invalid_argument("top1_accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / labels.size();
}

DetectionScores detection_map_mar(const std::vector<std::vector<Detection>>& predictions,
                                  const std::vector<std::vector<Box>>& ground_truth, double iou_threshold) {
  if (predictions.size() != ground_truth.size()) throw std::invalid_argument("detection: image count mismatch");
  std::map<int, int> gt_count;
  for (const auto& boxes : ground_truth) {
    for (const auto& b : boxes) {
      if (!b.valid()) throw std::invalid_argument("detection: invalid ground-truth box");
      ++gt_count[b.class_id];
    }
  }
  for (const auto& dets : predictions) {
    for (const auto& d : dets) {
      if (!d.box.valid()) throw std::invalid_argument("detection: invalid predicted box");
    }
  }

  DetectionScores out;
  for (const auto& [cls, total] : gt_count) {
    struct Ranked {
      float confidence;
      std::size_t image;
      const Box* box;
    };
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      for (const auto& d : predictions[i]) {
        if (d.box.class_id == cls) ranked.push_back({d.confidence, i, &d.box});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.confidence > b.confidence; });

    std::vector<std::vector<bool>> used(ground_truth.size());
    for (std::size_t i = 0; i < ground_truth.size(); ++i) used[i].assign(ground_truth[i].size(), false);

    std::vector<double> precision;
    std::vector<double> recall;
    int tp = 0;
    int fp = 0;
    for (const auto& r : ranked) {
      const auto& gts = ground_truth[r.image];
      int best = -1;
      float best_iou = 0;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (gts[g].class_id != cls || used[r.image][g]) continue;
        const float v = iou(*r.box, gts[g]);
        if (v >= iou_threshold && v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        used[r.image][best] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / (tp + fp));
      recall.push_back(static_cast<double>(tp) / total);
    }
    for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
      precision[i] = std::max(precision[i], precision[i + 1]);
    }
    double ap = 0;
    double prev_recall = 0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
    out.classes.push_back(cls);
    out.ap.push_back(ap);
    out.ar.push_back(static_cast<double>(tp) / total);
  }
  if (!out.classes.empty()) {
    for (std::size_t i = 0; i < out.classes.size(); ++i) {
      out.map += out.ap[i];
      out.mar += out.ar[i];
    }
    out.map /= out.classes.size();
    out.mar /= out.classes.size();
  }
  return out;
}

SegmentationScores segmentation_gcr_miou(const std::vector<std::vector<std::uint8_t>>& predictions,
                                         const std::vector<std::vector<std::uint8_t>>& ground_truth,
                                         int num_classes) {
  if (predictions.size() != ground_truth.size() || predictions.empty()) {
    throw std::invalid_argument("segmentation: image count mismatch or empty input");
  }
  const int k = num_classes + 1;
  std::vector<long long> inter(k, 0), pred_count(k, 0), gt_count(k, 0);
  long long correct = 0;
  long long total = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& p = predictions[i];
    const auto& g = ground_truth[i];
    if (p.size() != g.size()) throw std::invalid_argument("segmentation: mask size mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (p[j] >= k || g[j] >= k) throw std::invalid_argument("segmentation: mask value out of range");
      ++pred_count[p[j]];
      ++gt_count[g[j]];
      if (p[j] == g[j]) {
        ++inter[p[j]];
        ++correct;
      }
      ++total;
    }
  }
  SegmentationScores out;
  out.gcr = total > 0 ? static_cast<double>(correct) / total : 0.0;
  for (int c = 0; c < k; ++c) {
    const long long uni = pred_count[c] + gt_count[c] - inter[c];
    if (uni == 0) continue;
    out.classes.push_back(c);
    out.iou.push_back(static_cast<double>(inter[c]) / uni);
  }
  for (double v : out.iou) out.miou += v;
  if (!out.iou.empty()) out.miou /= out.iou.size();
  return out;
}

}  // namespace cta::metrics
