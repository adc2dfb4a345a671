#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "cta/datagen.hpp"

namespace cta {

struct DatasetConfig {
  int image_size = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  int num_classes = 4;
  int background = 0;
  double contrast_min = 0.10;
  double contrast_max = 0.25;
  double grain = 0.0;
  int n_train = 1024;
  int n_test = 128;
};

struct ModelsConfig {
  int batch_size = 32;
  double learning_rate = 5e-3;
  std::array<int, 4> widths{16, 32, 64, 64};
  int cls_epochs = 30;
  int det_epochs = 8;
  int seg_epochs = 12;
  bool enforce_gates = true;
};

struct AttackSection {
  // Epsilons are given on the 0-255 scale and divided by 255 internally.
  std::vector<double> epsilons_8bit{16, 10};
  // Every seed is trained for the first epsilon; the others use seeds[0] only.
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int epochs = 24;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.99;
  int generator_width = 16;
  int train_images = 256;
  int dr_steps = 40;
  double dr_step_size_8bit = -1;  // negative: epsilon / 10
  int snapshots = 4;              // attention snapshots kept per generator for visualize
};

struct EvalConfig {
  std::vector<std::string> attacks{"clean", "gaussian", "dr", "cta"};
  double det_score_threshold = 0.05;
  double det_nms_iou = 0.45;
};

struct VisualizeConfig {
  std::vector<int> image_ids{0, 1, 2, 3};
};

struct RunConfig {
  DatasetConfig dataset;
  ModelsConfig models;
  AttackSection attack;
  EvalConfig eval;
  VisualizeConfig visualize;
  std::string output_root = "out";
  std::uint64_t global_seed = 0;

  void validate() const;
  data::SceneSpec scene() const;
  std::uint64_t seed_for(const std::string& stage) const;
  std::vector<double> epsilons() const;
  double primary_epsilon() const;
  std::filesystem::path root() const { return output_root; }
};

nlohmann::json to_json(const RunConfig& config);
RunConfig from_json(const nlohmann::json& j);

// Merges `overrides` onto the defaults; unknown keys and type mismatches raise
// ConfigError naming the dotted key.
RunConfig load_config(const nlohmann::json& overrides);
RunConfig load_config_file(const std::filesystem::path& path, const std::vector<std::string>& sets = {});

// Applies one "dotted.key=value" assignment. The value is parsed as JSON when
// possible and as a bare string otherwise.
void apply_set(nlohmann::json& target, const std::string& assignment);

// Canonical spelling of an epsilon, used in artifact names and error messages.
std::string epsilon_tag(double epsilon);

}  // namespace cta
