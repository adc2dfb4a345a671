#include "cta/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include "json.hpp"
#include <stdexcept>

#include "cta/image_io.hpp"
#include "cta/rng.hpp"

namespace cta::data {
namespace {

constexpr double kPi = 3.14159265358979323846;

struct Placement {
  int class_id;
  int x0, y0, size;
};

bool inside(ShapeKind kind, double u, double v) {
  // u, v in [0, 1) relative to the bounding square; centred coordinates below.
  const double dx = u - 0.5;
  const double dy = v - 0.5;
  switch (kind) {
    case ShapeKind::circle:
      return dx * dx + dy * dy <= 0.25;
    case ShapeKind::square:
      return std::abs(dx) <= 0.4 && std::abs(dy) <= 0.4;
    case ShapeKind::triangle:
      return v >= 0.05 && v <= 0.95 && std::abs(dx) <= 0.5 * (v - 0.05) / 0.9;
    case ShapeKind::cross:
      return (std::abs(dx) <= 0.14 && std::abs(dy) <= 0.5) ||
             (std::abs(dy) <= 0.14 && std::abs(dx) <= 0.5);
    case ShapeKind::diamond:
      return std::abs(dx) + std::abs(dy) <= 0.5;
    case ShapeKind::ring: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= 0.25 && r2 >= 0.0625;
    }
  }
  return false;
}

void paint_background(const SceneSpec& spec, Rng& rng, Tensor<double>& img) {
  const int s = spec.image_size;
  if (spec.background == 0) {
    constexpr int kGrid = 4;
    for (int c = 0; c < 3; ++c) {
      double grid[kGrid][kGrid];
      for (auto& row : grid) {
        for (auto& v : row) v = rng.uniform(0.3, 0.7);
      }
      for (int y = 0; y < s; ++y) {
        const double gy = (y + 0.5) / s * (kGrid - 1);
        const int y0 = std::min(static_cast<int>(gy), kGrid - 2);
        const double fy = gy - y0;
        for (int x = 0; x < s; ++x) {
          const double gx = (x + 0.5) / s * (kGrid - 1);
          const int x0 = std::min(static_cast<int>(gx), kGrid - 2);
          const double fx = gx - x0;
          img.at(0, c, y, x) = (1 - fy) * ((1 - fx) * grid[y0][x0] + fx * grid[y0][x0 + 1]) +
                               fy * ((1 - fx) * grid[y0 + 1][x0] + fx * grid[y0 + 1][x0 + 1]);
        }
      }
    }
  } else {
    for (int c = 0; c < 3; ++c) {
      const double freq = rng.uniform(1.0, 3.0);
      const double theta = rng.uniform(0.0, kPi);
      const double phase = rng.uniform(0.0, 2 * kPi);
      const double base = rng.uniform(0.4, 0.6);
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          const double t = (x * std::cos(theta) + y * std::sin(theta)) / s;
          img.at(0, c, y, x) = base + 0.1 * std::sin(2 * kPi * freq * t + phase);
        }
      }
    }
  }
}

bool overlaps(const Placement& a, const Placement& b, int margin) {
  return a.x0 < b.x0 + b.size + margin && b.x0 < a.x0 + a.size + margin &&
         a.y0 < b.y0 + b.size + margin && b.y0 < a.y0 + a.size + margin;
}

nlohmann::json box_json(const Box& b) {
  return nlohmann::json::array({b.class_id, b.x_min, b.y_min, b.x_max, b.y_max});
}

Box box_from_json(const nlohmann::json& j) {
  return {j.at(0).get<int>(), j.at(1).get<float>(), j.at(2).get<float>(), j.at(3).get<float>(),
          j.at(4).get<float>()};
}

}  // namespace

const char* shape_name(int class_id) {
  static constexpr const char* kNames[kMaxClasses] = {"circle", "square", "triangle",
                                                      "cross",  "diamond", "ring"};
  return class_id >= 0 && class_id < kMaxClasses ? kNames[class_id] : "unknown";
}

void SceneSpec::validate() const {
  if (image_size < 32) throw std::invalid_argument("image_size must be >= 32");
  if (min_shapes < 1 || max_shapes > 3 || min_shapes > max_shapes) {
    throw std::invalid_argument("shape count range must satisfy 1 <= min <= max <= 3");
  }
  if (num_classes < 2 || num_classes > kMaxClasses) {
    throw std::invalid_argument("num_classes must be in [2, " + std::to_string(kMaxClasses) + "]");
  }
  if (background != 0 && background != 1) {
    throw std::invalid_argument("background must be 0 or 1");
  }
  if (!(contrast_min > 0 && contrast_min <= contrast_max && contrast_max <= 0.3)) {
    throw std::invalid_argument("contrast range must satisfy 0 < min <= max <= 0.3");
  }
  if (!(grain >= 0 && grain <= 0.1)) throw std::invalid_argument("grain must be in [0, 0.1]");
}

MultiTaskSample generate_sample(const SceneSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(splitmix64(spec.rng_seed ^ splitmix64(index + 0x5eed)));
  const int s = spec.image_size;

  Tensor<double> canvas({1, 3, s, s});
  paint_background(spec, rng, canvas);

  const int count = rng.uniform_int(spec.min_shapes, spec.max_shapes);
  std::vector<Placement> placed;
  for (int k = 0; k < count; ++k) {
    // The first shape is clearly the largest so the image label is unambiguous.
    const int lo = k == 0 ? static_cast<int>(0.34 * s) : static_cast<int>(0.16 * s);
    const int hi = k == 0 ? static_cast<int>(0.47 * s) : static_cast<int>(0.25 * s);
    const int size = rng.uniform_int(lo, hi);
    const int cls = rng.uniform_int(0, spec.num_classes - 1);
    for (int attempt = 0; attempt < 64; ++attempt) {
      Placement p{cls, rng.uniform_int(1, s - size - 1), rng.uniform_int(1, s - size - 1), size};
      const bool clash = std::any_of(placed.begin(), placed.end(),
                                     [&](const Placement& q) { return overlaps(p, q, 2); });
      if (!clash) {
        placed.push_back(p);
        break;
      }
    }
  }

  MultiTaskSample out;
  out.mask.assign(static_cast<std::size_t>(s) * s, 0);
  for (const auto& p : placed) {
    double offset[3];
    for (double& o : offset) {
      o = rng.uniform(spec.contrast_min, spec.contrast_max);
      if (rng.uniform() < 0.5) o = -o;
    }
    int bx0 = s, by0 = s, bx1 = -1, by1 = -1;
    for (int y = p.y0; y < p.y0 + p.size; ++y) {
      for (int x = p.x0; x < p.x0 + p.size; ++x) {
        const double u = (x - p.x0 + 0.5) / p.size;
        const double v = (y - p.y0 + 0.5) / p.size;
        if (!inside(static_cast<ShapeKind>(p.class_id), u, v)) continue;
        for (int c = 0; c < 3; ++c) canvas.at(0, c, y, x) += offset[c];
        out.mask[static_cast<std::size_t>(y) * s + x] = static_cast<std::uint8_t>(p.class_id + 1);
        bx0 = std::min(bx0, x);
        by0 = std::min(by0, y);
        bx1 = std::max(bx1, x);
        by1 = std::max(by1, y);
      }
    }
    if (bx1 >= 0) {
      out.boxes.push_back({p.class_id, static_cast<float>(bx0), static_cast<float>(by0),
                           static_cast<float>(bx1 + 1), static_cast<float>(by1 + 1)});
    }
  }

  if (spec.grain > 0) {
    for (std::size_t i = 0; i < canvas.size(); ++i) canvas[i] += spec.grain * rng.normal();
  }
  out.image = Tensor<float>({1, 3, s, s});
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    out.image[i] = static_cast<float>(io::to_byte(canvas[i])) / 255.0f;
  }

  const Box* largest = nullptr;
  for (const auto& b : out.boxes) {
    if (largest == nullptr || b.area() > largest->area() ||
        (b.area() == largest->area() && b.class_id < largest->class_id)) {
      largest = &b;
    }
  }
  out.class_label = largest != nullptr ? largest->class_id : 0;
  return out;
}

std::string check_invariants(const MultiTaskSample& sample, int num_classes) {
  const int h = sample.height();
  const int w = sample.width();
  if (sample.image.c() != 3 || sample.mask.size() != static_cast<std::size_t>(h) * w) {
    return "image/mask shape mismatch";
  }
  for (std::size_t i = 0; i < sample.image.size(); ++i) {
    if (!(sample.image[i] >= 0.0f && sample.image[i] <= 1.0f)) return "pixel outside [0,1]";
  }
  if (sample.boxes.empty()) return "sample has no boxes";
  if (sample.class_label < 0 || sample.class_label >= num_classes) return "class label out of range";
  for (const auto& b : sample.boxes) {
    if (!b.valid() || b.x_min < 0 || b.y_min < 0 || b.x_max > w || b.y_max > h) {
      return "invalid box";
    }
    int hits = 0;
    for (int y = static_cast<int>(b.y_min); y < static_cast<int>(b.y_max); ++y) {
      for (int x = static_cast<int>(b.x_min); x < static_cast<int>(b.x_max); ++x) {
        hits += sample.mask[static_cast<std::size_t>(y) * w + x] == b.class_id + 1;
      }
    }
    if (hits == 0) return "box without mask pixels of its class";
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int m = sample.mask[static_cast<std::size_t>(y) * w + x];
      if (m > num_classes) return "mask value out of range";
      if (m == 0) continue;
      const bool covered = std::any_of(sample.boxes.begin(), sample.boxes.end(), [&](const Box& b) {
        return x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max;
      });
      if (!covered) return "mask pixel outside every box";
    }
  }
  const Box* largest = &sample.boxes[0];
  for (const auto& b : sample.boxes) {
    if (b.area() > largest->area() || (b.area() == largest->area() && b.class_id < largest->class_id)) {
      largest = &b;
    }
  }
  if (largest->class_id != sample.class_label) return "class label is not the largest box class";
  return {};
}

DatasetManifest generate_dataset(const SceneSpec& spec, int n_train, int n_test,
                                 const std::filesystem::path& out_dir) {
  spec.validate();
  if (n_train <= 0 || n_test <= 0) throw std::invalid_argument("n_train and n_test must be > 0");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest{spec, {}};
  const int total = n_train + n_test;
  std::vector<MultiTaskSample> samples(total);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < total; ++i) samples[i] = generate_sample(spec, static_cast<std::uint64_t>(i));

  for (int i = 0; i < total; ++i) {
    const bool train = i < n_train;
    const int local = train ? i : i - n_train;
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%05d.png", train ? "train" : "test", local);
    ManifestRecord rec{std::string("images/") + name, train ? "train" : "test",
                       samples[i].class_label, samples[i].boxes, std::string("masks/") + name};
    io::write_png(out_dir / rec.file, io::to_raster(samples[i].image));
    io::write_png(out_dir / rec.mask_file,
                  io::Raster{spec.image_size, spec.image_size, 1, samples[i].mask});
    manifest.records.push_back(std::move(rec));
  }

  {
    std::ofstream out(out_dir / "manifest.jsonl", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (out_dir / "manifest.jsonl").string());
    for (const auto& r : manifest.records) {
      nlohmann::json j;
      j["file"] = r.file;
      j["split"] = r.split;
      j["class"] = r.class_label;
      j["mask_file"] = r.mask_file;
      j["boxes"] = nlohmann::json::array();
      for (const auto& b : r.boxes) j["boxes"].push_back(box_json(b));
      out << j.dump() << '\n';
    }
  }
  {
    nlohmann::json j;
    j["image_size"] = spec.image_size;
    j["min_shapes"] = spec.min_shapes;
    j["max_shapes"] = spec.max_shapes;
    j["num_classes"] = spec.num_classes;
    j["background"] = spec.background;
    j["contrast_min"] = spec.contrast_min;
    j["contrast_max"] = spec.contrast_max;
    j["grain"] = spec.grain;
    j["rng_seed"] = spec.rng_seed;
    j["n_train"] = n_train;
    j["n_test"] = n_test;
    std::ofstream out(out_dir / "dataset.json", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (out_dir / "dataset.json").string());
    out << j.dump(2) << '\n';
  }
  return manifest;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "dataset.json");
  if (!meta) throw std::runtime_error("cannot open " + (dir / "dataset.json").string());
  const auto j = nlohmann::json::parse(meta);
  Dataset ds;
  ds.spec.image_size = j.at("image_size");
  ds.spec.min_shapes = j.at("min_shapes");
  ds.spec.max_shapes = j.at("max_shapes");
  ds.spec.num_classes = j.at("num_classes");
  ds.spec.background = j.at("background");
  ds.spec.contrast_min = j.at("contrast_min");
  ds.spec.contrast_max = j.at("contrast_max");
  ds.spec.grain = j.at("grain");
  ds.spec.rng_seed = j.at("rng_seed");
  ds.spec.validate();

  std::ifstream in(dir / "manifest.jsonl");
  if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.jsonl").string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto r = nlohmann::json::parse(line);
    MultiTaskSample s;
    s.image = io::from_raster(io::read_png(dir / r.at("file").get<std::string>(), 3));
    s.mask = io::read_png(dir / r.at("mask_file").get<std::string>(), 1).pixels;
    s.class_label = r.at("class");
    for (const auto& b : r.at("boxes")) s.boxes.push_back(box_from_json(b));
    (r.at("split") == "train" ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

std::vector<Tensor<float>> images_of(const std::vector<MultiTaskSample>& samples) {
  std::vector<Tensor<float>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.image);
  return out;
}

}  // namespace cta::data
