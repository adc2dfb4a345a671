#include "cta/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cta/errors.hpp"
#include "cta/rng.hpp"

namespace cta {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DatasetConfig, image_size, min_shapes, max_shapes, num_classes, background,
                                   contrast_min, contrast_max, grain, n_train, n_test)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelsConfig, batch_size, learning_rate, widths, cls_epochs, det_epochs,
                                   seg_epochs, enforce_gates)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(AttackSection, epsilons_8bit, seeds, epochs, batch_size, learning_rate,
                                   adam_beta1, adam_beta2, generator_width, train_images, dr_steps,
                                   dr_step_size_8bit, snapshots)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EvalConfig, attacks, det_score_threshold, det_nms_iou)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(VisualizeConfig, image_ids)

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

bool compatible(const nlohmann::json& def, const nlohmann::json& val) {
  if (def.is_number_float()) return val.is_number();
  if (def.is_number_unsigned()) return val.is_number_unsigned() || (val.is_number_integer() && val.get<long long>() >= 0);
  if (def.is_number_integer()) return val.is_number_integer();
  return def.type() == val.type();
}

void merge(nlohmann::json& base, const nlohmann::json& over, const std::string& prefix) {
  if (!over.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " key " + prefix) + " must be an object");
  for (const auto& [key, value] : over.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key: " + path);
    auto& slot = base[key];
    if (slot.is_object()) {
      merge(slot, value, path);
    } else {
      require(compatible(slot, value), "config key " + path + " has the wrong type (expected " +
                                           std::string(slot.type_name()) + ")");
      slot = value;
    }
  }
}

}  // namespace

void RunConfig::validate() const {
  try {
    scene().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  require(dataset.n_train > 0 && dataset.n_test > 0, "dataset.n_train and dataset.n_test must be positive");
  require(models.batch_size >= 1, "models.batch_size must be >= 1");
  require(models.learning_rate > 0, "models.learning_rate must be positive");
  require(models.cls_epochs >= 1 && models.det_epochs >= 1 && models.seg_epochs >= 1,
          "models.*_epochs must be >= 1");
  for (int w : models.widths) require(w >= 1, "models.widths must be positive");
  require(!attack.epsilons_8bit.empty(), "attack.epsilons_8bit must not be empty");
  for (double e : attack.epsilons_8bit) require(e > 0 && e < 255, "attack.epsilons_8bit values must be in (0, 255)");
  require(!attack.seeds.empty(), "attack.seeds must not be empty");
  require(attack.epochs >= 1, "attack.epochs must be >= 1");
  require(attack.batch_size >= 1, "attack.batch_size must be >= 1");
  require(attack.generator_width >= 1, "attack.generator_width must be >= 1");
  require(attack.train_images >= 1, "attack.train_images must be >= 1");
  require(attack.dr_steps >= 0, "attack.dr_steps must be >= 0");
  require(attack.snapshots >= 0, "attack.snapshots must be >= 0");
  require(!eval.attacks.empty() && eval.attacks.front() == "clean", "eval.attacks must start with \"clean\"");
  for (const auto& a : eval.attacks) {
    require(a == "clean" || a == "gaussian" || a == "dr" || a == "cta", "unknown attack in eval.attacks: " + a);
  }
  for (int id : visualize.image_ids) {
    require(id >= 0 && id < dataset.n_test, "visualize.image_ids must index the test split");
  }
  require(!output_root.empty(), "output_root must not be empty");
}

data::SceneSpec RunConfig::scene() const {
  data::SceneSpec s;
  s.image_size = dataset.image_size;
  s.min_shapes = dataset.min_shapes;
  s.max_shapes = dataset.max_shapes;
  s.num_classes = dataset.num_classes;
  s.background = dataset.background;
  s.contrast_min = dataset.contrast_min;
  s.contrast_max = dataset.contrast_max;
  s.grain = dataset.grain;
  s.rng_seed = seed_for("datagen");
  return s;
}

std::uint64_t RunConfig::seed_for(const std::string& stage) const { return stage_seed(global_seed, stage); }

std::vector<double> RunConfig::epsilons() const {
  std::vector<double> out;
  for (double e : attack.epsilons_8bit) out.push_back(e / 255.0);
  return out;
}

double RunConfig::primary_epsilon() const { return attack.epsilons_8bit.front() / 255.0; }

nlohmann::json to_json(const RunConfig& c) {
  return {{"dataset", c.dataset},         {"models", c.models},       {"attack", c.attack},
          {"eval", c.eval},               {"visualize", c.visualize}, {"output_root", c.output_root},
          {"global_seed", c.global_seed}};
}

RunConfig from_json(const nlohmann::json& j) {
  RunConfig c;
  c.dataset = j.at("dataset").get<DatasetConfig>();
  c.models = j.at("models").get<ModelsConfig>();
  c.attack = j.at("attack").get<AttackSection>();
  c.eval = j.at("eval").get<EvalConfig>();
  c.visualize = j.at("visualize").get<VisualizeConfig>();
  c.output_root = j.at("output_root").get<std::string>();
  c.global_seed = j.at("global_seed").get<std::uint64_t>();
  return c;
}

RunConfig load_config(const nlohmann::json& overrides) {
  nlohmann::json merged = to_json(RunConfig{});
  merge(merged, overrides, "");
  RunConfig c;
  try {
    c = from_json(merged);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void apply_set(nlohmann::json& target, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &target;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed --set key: " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("--set key " + key + " descends into a non-object");
      *node = nlohmann::json::object();
    }
    start = dot + 1;
  }
}

RunConfig load_config_file(const std::filesystem::path& path, const std::vector<std::string>& sets) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  }
  for (const auto& s : sets) apply_set(j, s);
  return load_config(j);
}

std::string epsilon_tag(double epsilon) {
  const double v = epsilon * 255.0;
  char buf[32];
  if (std::abs(v - std::round(v)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%d/255", static_cast<int>(std::round(v)));
  } else {
    std::snprintf(buf, sizeof buf, "%.6g", epsilon);
  }
  return buf;
}

}  // namespace cta
