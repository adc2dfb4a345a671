#include "cta/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "cta/errors.hpp"

namespace cta {
namespace {
constexpr char kMagic[8] = {'C', 'T', 'A', 'W', 'G', 'T', '0', '1'};
}

void write_weights(const std::filesystem::path& path, const std::vector<const std::vector<float>*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t count = params.size();
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  for (const auto* p : params) {
    const std::uint64_t n = p->size();
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(p->data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void read_weights(const std::filesystem::path& path, const std::vector<std::vector<float>*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact(path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0 || count != params.size()) {
    throw std::runtime_error("corrupt or incompatible weights file " + path.string());
  }
  for (auto* p : params) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (n != p->size()) throw std::runtime_error("weights size mismatch in " + path.string());
    in.read(reinterpret_cast<char*>(p->data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  if (!in) throw std::runtime_error("truncated weights file " + path.string());
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact(path.string());
  return nlohmann::json::parse(in);
}

namespace models {

void save_model(const TaskModel<float>& model, const ModelMetadata& meta, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_weights(dir / "weights.bin", model.params());
  nlohmann::json j;
  j["task"] = to_string(model.task());
  j["architecture_id"] = model.architecture_id();
  j["tap_layer_id"] = model.tap(meta.image_size, meta.image_size).layer_id;
  j["train_seed"] = meta.train_seed;
  j["clean_metrics"] = meta.clean_metrics;
  j["num_classes"] = model.num_classes();
  j["widths"] = model.config().widths;
  j["image_size"] = meta.image_size;
  j["weights_hash"] = hex64(model.weights_hash());
  write_json(dir / "model.json", j);
}

std::unique_ptr<TaskModel<float>> load_model(const std::filesystem::path& dir, ModelMetadata* meta) {
  if (!std::filesystem::exists(dir / "model.json") || !std::filesystem::exists(dir / "weights.bin")) {
    throw MissingArtifact("model checkpoint " + dir.string());
  }
  const auto j = read_json(dir / "model.json");
  ModelConfig config;
  config.task = task_from_string(j.at("task"));
  config.num_classes = j.at("num_classes");
  config.widths = j.at("widths").get<std::array<int, 4>>();
  auto model = make_model<float>(config);
  if (model->architecture_id() != j.at("architecture_id")) {
    throw std::runtime_error("architecture mismatch in " + dir.string());
  }
  read_weights(dir / "weights.bin", model->params());
  if (meta != nullptr) {
    meta->tap_layer_id = j.at("tap_layer_id");
    meta->train_seed = j.at("train_seed");
    meta->clean_metrics = j.at("clean_metrics");
    meta->image_size = j.at("image_size");
  }
  return model;
}

TaskModelBundle::TaskModelBundle(std::unique_ptr<TaskModel<float>> classifier,
                                 std::unique_ptr<TaskModel<float>> detector,
                                 std::unique_ptr<TaskModel<float>> segmenter)
    : classifier_(std::move(classifier)), detector_(std::move(detector)), segmenter_(std::move(segmenter)) {
  if (!classifier_ || !detector_ || !segmenter_) throw std::invalid_argument("bundle requires all three models");
  if (classifier_->task() != Task::cls || detector_->task() != Task::det || segmenter_->task() != Task::seg) {
    throw std::invalid_argument("bundle models have the wrong task tags");
  }
  extractor_ = classifier_->clone();
}

const TaskModel<float>& TaskModelBundle::model(Task task) const {
  switch (task) {
    case Task::cls: return *classifier_;
    case Task::det: return *detector_;
    case Task::seg: return *segmenter_;
  }
  throw std::invalid_argument("unknown task");
}

std::vector<std::uint64_t> TaskModelBundle::weight_hashes() const {
  return {classifier_->weights_hash(), detector_->weights_hash(), segmenter_->weights_hash(),
          extractor_->weights_hash()};
}

}  // namespace models
}  // namespace cta
