#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "cta/taskmodels.hpp"

namespace cta {

// Raw little-endian float blob with a small header; opaque to consumers.
void write_weights(const std::filesystem::path& path, const std::vector<const std::vector<float>*>& params);
void read_weights(const std::filesystem::path& path, const std::vector<std::vector<float>*>& params);

std::string hex64(std::uint64_t v);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

namespace models {

struct ModelMetadata {
  std::string tap_layer_id;
  std::uint64_t train_seed = 0;
  nlohmann::json clean_metrics = nlohmann::json::object();
  int image_size = 64;
};

// Directory with weights.bin and model.json
// {task, architecture_id, tap_layer_id, train_seed, clean_metrics, ...}.
void save_model(const TaskModel<float>& model, const ModelMetadata& meta, const std::filesystem::path& dir);
std::unique_ptr<TaskModel<float>> load_model(const std::filesystem::path& dir, ModelMetadata* meta = nullptr);

// The three task models plus the frozen extractor D (a copy of the trained
// classifier). The bundle only hands out const access after construction.
class TaskModelBundle {
 public:
  TaskModelBundle(std::unique_ptr<TaskModel<float>> classifier, std::unique_ptr<TaskModel<float>> detector,
                  std::unique_ptr<TaskModel<float>> segmenter);

  const TaskModel<float>& classifier() const { return *classifier_; }
  const TaskModel<float>& detector() const { return *detector_; }
  const TaskModel<float>& segmenter() const { return *segmenter_; }
  const TaskModel<float>& extractor() const { return *extractor_; }
  const TaskModel<float>& model(Task task) const;

  // Hashes of classifier, detector, segmenter, extractor weights in that order.
  std::vector<std::uint64_t> weight_hashes() const;

 private:
  std::unique_ptr<TaskModel<float>> classifier_, detector_, segmenter_, extractor_;
};

}  // namespace models
}  // namespace cta
