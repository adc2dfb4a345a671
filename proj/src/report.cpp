#include "cta/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cta/attack.hpp"
#include "cta/attention.hpp"
#include "cta/config.hpp"
#include "cta/training.hpp"

namespace cta::report {

namespace {

std::vector<double> foreground_mass(const models::TaskModel<float>& extractor, const Tensor<float>& images,
                                    const std::vector<data::MultiTaskSample>& samples) {
  constexpr int kChunk = 64;
  std::vector<double> out;
  for (int first = 0; first < images.n(); first += kChunk) {
    const int count = std::min(kChunk, images.n() - first);
    const auto a = attack::adversarial_attention(extractor, images.slice(first, count));
    for (int i = 0; i < count; ++i) {
      const auto& m = a.maps[i];
      double total = 0;
      for (float v : m.values) total += v;
      if (total <= 0) {
        out.push_back(std::nan(""));
        continue;
      }
      const auto& mask = samples[first + i].mask;
      std::vector<std::uint8_t> fg(mask.size());
      for (std::size_t p = 0; p < mask.size(); ++p) fg[p] = mask[p] > 0;
      out.push_back(attention::attention_mass_fraction<float>(m, fg));
    }
  }
  return out;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string seed_text(const std::optional<std::uint64_t>& s) { return s ? std::to_string(*s) : ""; }

}  // namespace

double round4(double v) {
  const double r = std::round(v * 1e4) / 1e4;
  return r == 0 ? 0.0 : r;  // no negative zero
}

AttentionShift attention_shift(const models::TaskModelBundle& bundle, const std::vector<data::MultiTaskSample>& samples,
                               const Tensor<float>& clean, const Tensor<float>& adversarial) {
  const auto c = foreground_mass(bundle.extractor(), clean, samples);
  const auto a = foreground_mass(bundle.extractor(), adversarial, samples);
  AttentionShift s;
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (std::isnan(c[i]) || std::isnan(a[i])) continue;
    s.clean += c[i];
    s.adversarial += a[i];
    ++s.images;
  }
  if (s.images > 0) {
    s.clean /= s.images;
    s.adversarial /= s.images;
  }
  return s;
}

AttentionShift attention_shift_report(const models::TaskModelBundle& bundle,
                                      const std::vector<data::MultiTaskSample>& samples, const AttackFn& attack_fn) {
  const Tensor<float> clean = models::stack_images(samples);
  return attention_shift(bundle, samples, clean, attack_fn ? attack_fn(clean) : clean);
}

const ReportRow* MetricsReport::find(const std::string& attack, double epsilon,
                                     std::optional<std::uint64_t> seed) const {
  for (const auto& r : rows) {
    if (r.attack == attack && std::abs(r.epsilon - epsilon) < 1e-9 && r.seed == seed) return &r;
  }
  return nullptr;
}

MetricsReport build_report(const models::TaskModelBundle& bundle, const std::vector<data::MultiTaskSample>& samples,
                           int num_classes, const std::vector<AttackSpec>& attacks, const ReportOptions& options) {
  if (samples.empty()) throw std::invalid_argument("report needs at least one evaluation image");
  MetricsReport rep;
  rep.dataset_id = options.dataset_id;
  rep.num_classes = num_classes;
  rep.images = static_cast<int>(samples.size());
  rep.seeds = options.seeds;
  const Tensor<float> clean = models::stack_images(samples);
  for (const auto& spec : attacks) {
    const Tensor<float> x = spec.fn ? spec.fn(clean) : clean;
    ReportRow row;
    row.attack = spec.name;
    row.epsilon = spec.epsilon;
    row.seed = spec.seed;
    row.top1 = models::evaluate_classifier(bundle.classifier(), x, samples);
    row.det = models::evaluate_detector(bundle.detector(), x, samples, options.decode);
    row.seg = models::evaluate_segmenter(bundle.segmenter(), x, samples, num_classes);
    row.shift = attention_shift(bundle, samples, clean, x);
    row.max_linf = attack::max_abs_diff(clean, x);
    if (spec.epsilon > 0) {
      bool seen = false;
      for (double e : rep.epsilons) seen = seen || std::abs(e - spec.epsilon) < 1e-12;
      if (!seen) rep.epsilons.push_back(spec.epsilon);
    }
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

nlohmann::json to_json(const MetricsReport& rep) {
  using nlohmann::json;
  json rows = json::array();
  for (const auto& r : rep.rows) {
    json det_ap = json::object();
    for (std::size_t i = 0; i < r.det.classes.size(); ++i) det_ap[std::to_string(r.det.classes[i])] = round4(r.det.ap[i]);
    json seg_iou = json::object();
    for (std::size_t i = 0; i < r.seg.classes.size(); ++i) seg_iou[std::to_string(r.seg.classes[i])] = round4(r.seg.iou[i]);
    rows.push_back({
        {"attack", r.attack},
        {"epsilon", round4(r.epsilon)},
        {"epsilon_tag", r.epsilon > 0 ? epsilon_tag(r.epsilon) : "0"},
        {"seed", r.seed ? json(*r.seed) : json(nullptr)},
        {"cls", {{"top1", round4(r.top1)}}},
        {"det", {{"map", round4(r.det.map)}, {"mar", round4(r.det.mar)}, {"ap_per_class", det_ap}}},
        {"seg", {{"gcr", round4(r.seg.gcr)}, {"miou", round4(r.seg.miou)}, {"iou_per_class", seg_iou}}},
        {"attention_shift",
         {{"clean", round4(r.shift.clean)}, {"adversarial", round4(r.shift.adversarial)}, {"images", r.shift.images}}},
        {"max_linf", round4(r.max_linf)},
    });
  }
  json eps = json::array();
  for (double e : rep.epsilons) eps.push_back(round4(e));
  return {{"dataset_id", rep.dataset_id}, {"num_classes", rep.num_classes}, {"images", rep.images},
          {"epsilons", eps},              {"seeds", rep.seeds},             {"rows", rows}};
}

std::string render_json(const MetricsReport& report) { return to_json(report).dump(2) + "\n"; }

std::string render_table(const MetricsReport& rep) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-8s %-5s | %8s | %8s %8s | %8s %8s | %9s %9s\n", "attack", "epsilon", "seed",
                "Top-1", "mAP", "mAR", "GCR", "mIoU", "fg-clean", "fg-adv");
  const std::string header = line;
  os << "Performance (%) of the task models on clean and attacked test images\n";
  os << "classification: cls-cnn4 | detection: det-grid | segmentation: seg-unet3\n\n";
  os << header << std::string(header.size() - 1, '-') << "\n";
  for (const auto& r : rep.rows) {
    std::snprintf(line, sizeof line, "%-10s %-8s %-5s | %8.2f | %8.2f %8.2f | %8.2f %8.2f | %9.2f %9.2f\n",
                  r.attack.c_str(), r.epsilon > 0 ? epsilon_tag(r.epsilon).c_str() : "-",
                  r.seed ? seed_text(r.seed).c_str() : "-", 100 * round4(r.top1), 100 * round4(r.det.map),
                  100 * round4(r.det.mar), 100 * round4(r.seg.gcr), 100 * round4(r.seg.miou),
                  100 * round4(r.shift.clean), 100 * round4(r.shift.adversarial));
    os << line;
  }
  os << "\nimages: " << rep.images << ", dataset: " << rep.dataset_id << "\n";
  os << "fg-clean / fg-adv: mean share of the extractor's attention on foreground pixels\n\n";
  os << "Reference (full-scale ImageNet / VOC, eps=16; not reproduced at this scale):\n";
  os << "  attack      VGG19 acc  YOLOv3 mAP/mAR  DeepLabv3 GCR/mIoU\n";
  os << "  clean         72.9       59.4 / 70.9      94.2 / 76.3\n";
  os << "  gaussian      65.7       53.7 / 65.5      92.4 / 71.2\n";
  os << "  dr            46.17      38.0 / 51.1      88.7 / 59.1\n";
  os << "  cta            7.47      19.5 / 32.4      77.8 / 32.1\n";
  return os.str();
}

std::string render_category_csv(const MetricsReport& rep) {
  std::ostringstream os;
  os << "attack,epsilon,seed,task,category,metric,value\n";
  for (const auto& r : rep.rows) {
    const std::string prefix = r.attack + "," + fmt("%.4f", round4(r.epsilon)) + "," + seed_text(r.seed) + ",";
    for (std::size_t i = 0; i < r.det.classes.size(); ++i) {
      os << prefix << "det," << r.det.classes[i] << ",ap," << fmt("%.4f", round4(r.det.ap[i])) << "\n";
    }
    for (std::size_t i = 0; i < r.seg.classes.size(); ++i) {
      os << prefix << "seg," << r.seg.classes[i] << ",iou," << fmt("%.4f", round4(r.seg.iou[i])) << "\n";
    }
  }
  return os.str();
}

void write_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::pair<const char*, std::string> files[] = {{"report.json", render_json(report)},
                                                       {"report.txt", render_table(report)},
                                                       {"per_category.csv", render_category_csv(report)}};
  for (const auto& [name, text] : files) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << text;
  }
}

}  // namespace cta::report
