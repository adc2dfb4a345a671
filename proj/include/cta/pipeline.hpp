#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cta/attack.hpp"
#include "cta/checkpoint.hpp"
#include "cta/config.hpp"
#include "cta/datagen.hpp"
#include "cta/report.hpp"

namespace cta::pipeline {

// out/{dataset,models,generators,adv,reports,figures}
struct Layout {
  std::filesystem::path root;

  explicit Layout(const RunConfig& config) : root(config.root()) {}
  std::filesystem::path dataset() const { return root / "dataset"; }
  std::filesystem::path models() const { return root / "models"; }
  std::filesystem::path generators() const { return root / "generators"; }
  std::filesystem::path adv() const { return root / "adv"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path figures() const { return root / "figures"; }
  std::filesystem::path model(const std::string& name) const { return models() / name; }
  std::filesystem::path generator(double epsilon, std::uint64_t seed) const;
};

// "eps16" for 16/255; used in directory names.
std::string epsilon_dirname(double epsilon);

// Every (epsilon, seed) generator the config asks for.
struct GeneratorKey {
  double epsilon = 0;
  std::uint64_t seed = 0;
};
std::vector<GeneratorKey> generator_keys(const RunConfig& config);
attack::AttackConfig attack_config(const RunConfig& config, const GeneratorKey& key);

data::Dataset require_dataset(const RunConfig& config);
models::TaskModelBundle require_models(const RunConfig& config);
attack::Generator<float> require_generator(const RunConfig& config, const GeneratorKey& key);
std::string dataset_id(const RunConfig& config);

// Picks, for every pixel, the 8-bit value nearest to x_adv that still lies
// inside the epsilon ball around x and inside [0, 1].
Tensor<float> quantize_within_ball(const Tensor<float>& x, const Tensor<float>& x_adv, double epsilon);

// Throws when any image leaves the epsilon ball (+1e-6) or [0, 1].
void verify_epsilon_ball(const Tensor<float>& x, const Tensor<float>& x_adv, double epsilon);

std::vector<report::AttackSpec> report_attacks(const RunConfig& config, const models::TaskModelBundle& bundle);

void cmd_datagen(const RunConfig& config);
void cmd_train_models(const RunConfig& config);
void cmd_train_attack(const RunConfig& config);

struct AttackArgs {
  std::filesystem::path input;  // directory of PNGs; empty: the dataset's test split
  std::optional<double> epsilon_8bit;
  std::optional<std::uint64_t> seed;
};
void cmd_attack(const RunConfig& config, const AttackArgs& args);
report::MetricsReport cmd_eval(const RunConfig& config);
// Empty ids: config.visualize.image_ids.
void cmd_visualize(const RunConfig& config, const std::vector<int>& image_ids);

// 0 success, 2 config error, 3 missing artifact, 4 runtime failure.
int exit_code(const std::exception& e);
// Single-line form of an error for stderr.
std::string error_line(const std::exception& e);

}  // namespace cta::pipeline
