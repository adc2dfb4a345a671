#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cta/boxes.hpp"
#include "cta/tensor.hpp"

namespace cta::data {

enum class ShapeKind { circle = 0, square, triangle, cross, diamond, ring };
inline constexpr int kMaxClasses = 6;
const char* shape_name(int class_id);

struct SceneSpec {
  int image_size = 64;
  int min_shapes = 1;
  int max_shapes = 3;
  int num_classes = 4;
  int background = 0;  // 0: smooth value noise, 1: sinusoidal bands
  // Shapes are the background shifted by a per-channel offset whose magnitude
  // is drawn from [contrast_min, contrast_max].
  double contrast_min = 0.10;
  double contrast_max = 0.25;
  // Standard deviation of per-pixel sensor grain added to the whole image.
  double grain = 0.0;
  std::uint64_t rng_seed = 7;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct MultiTaskSample {
  Tensor<float> image;              // (1, 3, H, W), values in [0, 1] on the 8-bit grid
  int class_label = 0;              // class of the largest box
  std::vector<Box> boxes;           // tight boxes around each shape's mask pixels
  std::vector<std::uint8_t> mask;   // H * W, 0 = background, class_id + 1 otherwise

  int height() const { return image.h(); }
  int width() const { return image.w(); }
};

MultiTaskSample generate_sample(const SceneSpec& spec, std::uint64_t index);

// Returns an empty string when every sample invariant holds, otherwise a
// description of the first violation.
std::string check_invariants(const MultiTaskSample& sample, int num_classes);

struct ManifestRecord {
  std::string file;
  std::string split;
  int class_label = 0;
  std::vector<Box> boxes;
  std::string mask_file;
};

struct DatasetManifest {
  SceneSpec spec;
  std::vector<ManifestRecord> records;
};

struct Dataset {
  SceneSpec spec;
  std::vector<MultiTaskSample> train;
  std::vector<MultiTaskSample> test;
};

// Writes images/, masks/, manifest.jsonl and dataset.json under out_dir.
// Train samples use indices [0, n_train), test samples [n_train, n_train + n_test).
DatasetManifest generate_dataset(const SceneSpec& spec, int n_train, int n_test,
                                 const std::filesystem::path& out_dir);

Dataset load_dataset(const std::filesystem::path& dir);

// Images only; the attack trainer receives this view and never sees labels.
std::vector<Tensor<float>> images_of(const std::vector<MultiTaskSample>& samples);

}  // namespace cta::data
