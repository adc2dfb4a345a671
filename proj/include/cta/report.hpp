#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "cta/checkpoint.hpp"
#include "cta/datagen.hpp"
#include "cta/metrics.hpp"
#include "cta/taskmodels.hpp"

namespace cta::report {

using AttackFn = std::function<Tensor<float>(const Tensor<float>&)>;

struct AttentionShift {
  double clean = 0;
  double adversarial = 0;
  int images = 0;  // images with a non-zero extractor map in both conditions
};

// Mean foreground mass fraction (mask > 0) of the extractor's normalized,
// image-resolution Grad-CAM on clean and attacked images.
AttentionShift attention_shift_report(const models::TaskModelBundle& bundle,
                                      const std::vector<data::MultiTaskSample>& samples, const AttackFn& attack_fn);
AttentionShift attention_shift(const models::TaskModelBundle& bundle, const std::vector<data::MultiTaskSample>& samples,
                               const Tensor<float>& clean, const Tensor<float>& adversarial);

struct AttackSpec {
  std::string name;  // clean | gaussian | dr | cta
  double epsilon = 0;
  std::optional<std::uint64_t> seed;
  AttackFn fn;  // empty for clean
};

struct ReportRow {
  std::string attack;
  double epsilon = 0;
  std::optional<std::uint64_t> seed;
  double top1 = 0;
  metrics::DetectionScores det;
  metrics::SegmentationScores seg;
  AttentionShift shift;
  double max_linf = 0;
};

struct MetricsReport {
  std::string dataset_id;
  int num_classes = 0;
  int images = 0;
  std::vector<double> epsilons;
  std::vector<std::uint64_t> seeds;
  std::vector<ReportRow> rows;

  const ReportRow* find(const std::string& attack, double epsilon, std::optional<std::uint64_t> seed = {}) const;
};

struct ReportOptions {
  models::DecodeOptions decode;
  std::string dataset_id;
  std::vector<std::uint64_t> seeds;
};

MetricsReport build_report(const models::TaskModelBundle& bundle, const std::vector<data::MultiTaskSample>& samples,
                           int num_classes, const std::vector<AttackSpec>& attacks, const ReportOptions& options);

// Keys sorted, every float rounded to 4 decimals.
nlohmann::json to_json(const MetricsReport& report);
std::string render_json(const MetricsReport& report);
// Aligned text table in percent, one row per attack cell.
std::string render_table(const MetricsReport& report);
// attack,epsilon,seed,task,category,metric,value
std::string render_category_csv(const MetricsReport& report);

void write_report(const MetricsReport& report, const std::filesystem::path& dir);

double round4(double v);

}  // namespace cta::report
