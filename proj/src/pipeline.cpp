#include "cta/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cta/attention.hpp"
#include "cta/errors.hpp"
#include "cta/image_io.hpp"
#include "cta/training.hpp"

namespace cta::pipeline {

namespace fs = std::filesystem;
using models::Task;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* model_dir_name(Task t) { return t == Task::cls ? "cls" : t == Task::det ? "det" : "seg"; }

std::vector<int> snapshot_epochs(int epochs, int count) {
  std::vector<int> out;
  if (count <= 0) return out;
  for (int i = 1; i <= count; ++i) {
    const int e = static_cast<int>(std::lround(static_cast<double>(i) * epochs / count)) - 1;
    if (e >= 0 && (out.empty() || e > out.back())) out.push_back(e);
  }
  return out;
}

fs::path snapshot_path(const fs::path& gen_dir, int epoch, int image_id, const char* kind) {
  char name[64];
  std::snprintf(name, sizeof name, "epoch%03d_img%05d_%s.png", epoch, image_id, kind);
  return gen_dir / "snapshots" / name;
}

// Lays out equally sized RGB tiles in rows separated by a white gutter.
io::Raster tile_grid(const std::vector<std::vector<io::Raster>>& rows) {
  constexpr int kGap = 2;
  int cols = 0;
  for (const auto& r : rows) cols = std::max<int>(cols, static_cast<int>(r.size()));
  const int tw = rows.front().front().width;
  const int th = rows.front().front().height;
  io::Raster out;
  out.channels = 3;
  out.width = cols * tw + (cols + 1) * kGap;
  out.height = static_cast<int>(rows.size()) * th + (static_cast<int>(rows.size()) + 1) * kGap;
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * 3, 255);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const auto& t = rows[r][c];
      const int ox = kGap + static_cast<int>(c) * (tw + kGap);
      const int oy = kGap + static_cast<int>(r) * (th + kGap);
      for (int y = 0; y < th; ++y) {
        for (int x = 0; x < tw; ++x) {
          for (int ch = 0; ch < 3; ++ch) {
            const int src_ch = t.channels == 1 ? 0 : ch;
            out.pixels[(static_cast<std::size_t>(oy + y) * out.width + ox + x) * 3 + ch] =
                t.pixels[(static_cast<std::size_t>(y) * t.width + x) * t.channels + src_ch];
          }
        }
      }
    }
  }
  return out;
}

template <typename Map>
attention::AttentionMap<float> as_map(const Map& m) {
  return {m.height, m.width, m.values, true};
}

void check_models_match_dataset(const models::TaskModelBundle& b, const data::Dataset& ds) {
  if (b.classifier().num_classes() != ds.spec.num_classes) {
    throw ConfigError("trained models have " + std::to_string(b.classifier().num_classes()) +
                      " classes but the dataset has " + std::to_string(ds.spec.num_classes));
  }
}

}  // namespace

fs::path Layout::generator(double epsilon, std::uint64_t seed) const {
  return generators() / (epsilon_dirname(epsilon) + "_seed" + std::to_string(seed));
}

std::string epsilon_dirname(double epsilon) {
  const double v = epsilon * 255.0;
  char buf[32];
  if (std::abs(v - std::round(v)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "eps%d", static_cast<int>(std::round(v)));
  } else {
    std::snprintf(buf, sizeof buf, "eps%.4f", v);
  }
  return buf;
}

std::vector<GeneratorKey> generator_keys(const RunConfig& config) {
  std::vector<GeneratorKey> keys;
  const auto eps = config.epsilons();
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (i == 0) {
      for (auto s : config.attack.seeds) keys.push_back({eps[i], s});
    } else {
      keys.push_back({eps[i], config.attack.seeds.front()});
    }
  }
  return keys;
}

attack::AttackConfig attack_config(const RunConfig& config, const GeneratorKey& key) {
  attack::AttackConfig a;
  a.epsilon = key.epsilon;
  a.epochs = config.attack.epochs;
  a.batch_size = config.attack.batch_size;
  a.learning_rate = config.attack.learning_rate;
  a.adam_beta1 = config.attack.adam_beta1;
  a.adam_beta2 = config.attack.adam_beta2;
  a.generator_width = config.attack.generator_width;
  a.seed = stage_seed(config.seed_for("train-attack"), "seed-" + std::to_string(key.seed));
  return a;
}

data::Dataset require_dataset(const RunConfig& config) {
  const Layout L(config);
  if (!fs::exists(L.dataset() / "manifest.jsonl") || !fs::exists(L.dataset() / "dataset.json")) {
    throw MissingArtifact("dataset (" + L.dataset().string() + ")");
  }
  auto ds = data::load_dataset(L.dataset());
  if (ds.spec.rng_seed != config.scene().rng_seed || ds.spec.image_size != config.dataset.image_size ||
      ds.spec.num_classes != config.dataset.num_classes) {
    throw ConfigError("dataset at " + L.dataset().string() + " was generated with a different config; rerun datagen");
  }
  return ds;
}

models::TaskModelBundle require_models(const RunConfig& config) {
  const Layout L(config);
  auto cls = models::load_model(L.model("cls"));
  auto det = models::load_model(L.model("det"));
  auto seg = models::load_model(L.model("seg"));
  auto extractor = models::load_model(L.model("extractor"));
  if (extractor->weights_hash() != cls->weights_hash()) {
    throw std::runtime_error("frozen extractor does not match the trained classifier");
  }
  return models::TaskModelBundle(std::move(cls), std::move(det), std::move(seg));
}

attack::Generator<float> require_generator(const RunConfig& config, const GeneratorKey& key) {
  const fs::path dir = Layout(config).generator(key.epsilon, key.seed);
  if (!fs::exists(dir / "generator.json") || !fs::exists(dir / "weights.bin")) {
    throw MissingArtifact("generator(epsilon=" + epsilon_tag(key.epsilon) + ", seed=" + std::to_string(key.seed) +
                          ") at " + dir.string());
  }
  return attack::load_generator(dir);
}

std::string dataset_id(const RunConfig& config) {
  const std::string manifest = read_text(Layout(config).dataset() / "manifest.jsonl");
  return "shapes-" + hex64(fnv1a(manifest.data(), manifest.size()));
}

Tensor<float> quantize_within_ball(const Tensor<float>& x, const Tensor<float>& x_adv, double epsilon) {
  Tensor<float> out(x_adv.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lo = std::max(0.0, static_cast<double>(x[i]) - epsilon);
    const double hi = std::min(1.0, static_cast<double>(x[i]) + epsilon);
    const double lo_q = std::ceil(lo * 255.0 - 1e-9) / 255.0;
    const double hi_q = std::floor(hi * 255.0 + 1e-9) / 255.0;
    // No byte value inside the ball: keep the clean pixel.
    if (lo_q > hi_q) {
      out[i] = x[i];
      continue;
    }
    const double q = std::round(static_cast<double>(x_adv[i]) * 255.0) / 255.0;
    out[i] = static_cast<float>(std::clamp(q, lo_q, hi_q));
  }
  return out;
}

void verify_epsilon_ball(const Tensor<float>& x, const Tensor<float>& x_adv, double epsilon) {
  require_shape(x_adv.shape(), x.shape(), "adversarial batch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = std::abs(static_cast<double>(x_adv[i]) - x[i]);
    if (d > epsilon + 1e-6 || !(x_adv[i] >= 0.0f && x_adv[i] <= 1.0f)) {
      throw std::runtime_error("epsilon-ball verifier: element " + std::to_string(i) + " deviates by " +
                               std::to_string(d) + " (epsilon " + std::to_string(epsilon) + ")");
    }
  }
}

std::vector<report::AttackSpec> report_attacks(const RunConfig& config, const models::TaskModelBundle& bundle) {
  std::vector<report::AttackSpec> out;
  const auto& wanted = config.eval.attacks;
  auto want = [&](const char* name) { return std::find(wanted.begin(), wanted.end(), name) != wanted.end(); };
  out.push_back({"clean", 0, std::nullopt, {}});
  const auto eps = config.epsilons();
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double e = eps[i];
    if (want("gaussian")) {
      const auto seed = config.seed_for("gaussian-" + epsilon_dirname(e));
      out.push_back({"gaussian", e, std::nullopt,
                     [e, seed](const Tensor<float>& x) { return attack::gaussian_noise_attack(x, e, seed); }});
    }
    if (want("dr")) {
      attack::DrOptions dr;
      dr.steps = config.attack.dr_steps;
      dr.step_size = config.attack.dr_step_size_8bit > 0 ? config.attack.dr_step_size_8bit / 255.0 : -1;
      const auto* model = &bundle.classifier();
      out.push_back({"dr", e, std::nullopt,
                     [e, dr, model](const Tensor<float>& x) { return attack::dr_attack(x, *model, e, dr); }});
    }
    if (want("cta")) {
      for (const auto& key : generator_keys(config)) {
        if (std::abs(key.epsilon - e) > 1e-12) continue;
        auto g = std::make_shared<attack::Generator<float>>(require_generator(config, key));
        out.push_back({"cta", e, key.seed,
                       [g, e](const Tensor<float>& x) { return attack::apply_generator(*g, x, e); }});
      }
    }
  }
  return out;
}

void cmd_datagen(const RunConfig& config) {
  const Layout L(config);
  fs::remove_all(L.dataset());
  data::generate_dataset(config.scene(), config.dataset.n_train, config.dataset.n_test, L.dataset());
}

void cmd_train_models(const RunConfig& config) {
  const Layout L(config);
  const auto ds = require_dataset(config);
  models::TrainOptions base;
  base.batch_size = config.models.batch_size;
  base.learning_rate = config.models.learning_rate;
  base.widths = config.models.widths;
  base.enforce_gate = config.models.enforce_gates;
  base.seed = config.seed_for("train-models");

  struct Job {
    Task task;
    int epochs;
    models::TrainedModel (*train)(const data::Dataset&, const models::TrainOptions&, const models::LossLogger&);
  };
  const Job jobs[] = {{Task::cls, config.models.cls_epochs, &models::train_classifier},
                      {Task::det, config.models.det_epochs, &models::train_detector},
                      {Task::seg, config.models.seg_epochs, &models::train_segmenter}};
  std::vector<std::unique_ptr<models::TaskModel<float>>> trained;
  std::vector<models::ModelMetadata> metas;
  for (const auto& job : jobs) {
    auto opt = base;
    opt.epochs = job.epochs;
    std::ostringstream log;
    auto result = job.train(ds, opt, [&](int epoch, double loss) {
      log << nlohmann::json{{"epoch", epoch}, {"mean_loss", report::round4(loss)}}.dump() << "\n";
    });
    models::ModelMetadata meta;
    meta.tap_layer_id = result.model->tap(ds.spec.image_size, ds.spec.image_size).layer_id;
    meta.train_seed = opt.seed;
    meta.image_size = ds.spec.image_size;
    const char* metric = job.task == Task::cls ? "top1" : job.task == Task::det ? "map" : "miou";
    meta.clean_metrics = {{metric, report::round4(result.gate_metric)}};
    const fs::path dir = L.model(model_dir_name(job.task));
    fs::remove_all(dir);
    models::save_model(*result.model, meta, dir);
    write_text(dir / "train_log.jsonl", log.str());
    std::cerr << model_dir_name(job.task) << ": " << metric << " " << report::round4(result.gate_metric) << "\n";
    if (job.task == Task::cls) {
      fs::remove_all(L.model("extractor"));
      models::save_model(*result.model, meta, L.model("extractor"));
    }
  }
}

void cmd_train_attack(const RunConfig& config) {
  const Layout L(config);
  const auto ds = require_dataset(config);
  const auto bundle = require_models(config);
  check_models_match_dataset(bundle, ds);
  const auto hashes_before = bundle.weight_hashes();

  // Only images cross into the attack trainer.
  std::vector<Tensor<float>> pool = data::images_of(ds.train);
  pool.resize(std::min<std::size_t>(pool.size(), config.attack.train_images));
  const attack::UnlabeledImages images(std::move(pool));
  const attack::CtaModels cm{&bundle.classifier(), &bundle.detector(), &bundle.segmenter(), &bundle.extractor()};

  std::vector<int> vis_ids;
  for (int id : config.visualize.image_ids) {
    if (id < static_cast<int>(ds.test.size())) vis_ids.push_back(id);
  }
  std::vector<Tensor<float>> vis_list;
  for (int id : vis_ids) vis_list.push_back(ds.test[id].image);
  const Tensor<float> vis_images = vis_list.empty() ? Tensor<float>() : stack<float>(vis_list);

  for (const auto& key : generator_keys(config)) {
    const auto cfg = attack_config(config, key);
    const fs::path dir = L.generator(key.epsilon, key.seed);
    fs::remove_all(dir);
    fs::create_directories(dir / "snapshots");
    const auto snaps = snapshot_epochs(cfg.epochs, config.attack.snapshots);
    std::ostringstream log;
    nlohmann::json snapshot_index = nlohmann::json::array();
    auto on_epoch = [&](const attack::EpochRecord& r, const attack::Generator<float>& g) {
      log << nlohmann::json{{"epoch", r.epoch},
                            {"mean_loss", report::round4(r.mean_loss)},
                            {"mean_linf", report::round4(r.mean_linf)}}
                 .dump()
          << "\n";
      std::cerr << epsilon_dirname(key.epsilon) << " seed " << key.seed << " epoch " << r.epoch << " loss "
                << r.mean_loss << "\n";
      if (vis_ids.empty() || std::find(snaps.begin(), snaps.end(), r.epoch) == snaps.end()) return;
      const Tensor<float> adv = attack::apply_generator(g, vis_images, cfg.epsilon);
      const auto att = attack::adversarial_attention(bundle.extractor(), adv);
      for (std::size_t i = 0; i < vis_ids.size(); ++i) {
        const Tensor<float> one = adv.slice(static_cast<int>(i), 1);
        io::write_png(snapshot_path(dir, r.epoch, vis_ids[i], "adv"), io::to_raster(one));
        io::write_png(snapshot_path(dir, r.epoch, vis_ids[i], "att"), attention::overlay_raster(one, att.maps[i]));
      }
      snapshot_index.push_back(r.epoch);
    };
    const auto trained = attack::train_cta(images, cm, cfg, on_epoch);
    if (bundle.weight_hashes() != hashes_before) {
      throw std::runtime_error("frozen task models changed during attack training");
    }
    attack::save_generator(trained.generator, cfg, trained.history, dir);
    write_text(dir / "train_log.jsonl", log.str());
    write_json(dir / "snapshots.json", {{"epochs", snapshot_index}, {"image_ids", vis_ids}});
  }
}

void cmd_attack(const RunConfig& config, const AttackArgs& args) {
  const Layout L(config);
  GeneratorKey key{args.epsilon_8bit ? *args.epsilon_8bit / 255.0 : config.primary_epsilon(),
                   args.seed ? *args.seed : config.attack.seeds.front()};
  const auto g = require_generator(config, key);

  std::vector<std::string> names;
  std::vector<Tensor<float>> inputs;
  if (args.input.empty()) {
    const auto ds = require_dataset(config);
    char name[32];
    for (std::size_t i = 0; i < ds.test.size(); ++i) {
      std::snprintf(name, sizeof name, "test_%05zu.png", i);
      names.push_back(name);
      inputs.push_back(ds.test[i].image);
    }
  } else {
    if (!fs::is_directory(args.input)) throw MissingArtifact("input image directory " + args.input.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(args.input)) {
      if (e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      names.push_back(f.filename().string());
      inputs.push_back(io::from_raster(io::read_png(f, 3)));
    }
  }
  if (inputs.empty()) throw std::runtime_error("no input images to attack");

  const fs::path dir = L.adv() / (epsilon_dirname(key.epsilon) + "_seed" + std::to_string(key.seed));
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ostringstream manifest;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto& x = inputs[i];
    if (x.h() % 4 != 0 || x.w() % 4 != 0) {
      throw std::runtime_error("input " + names[i] + " must have sides divisible by 4");
    }
    const Tensor<float> adv = quantize_within_ball(x, attack::apply_generator(g, x, key.epsilon), key.epsilon);
    verify_epsilon_ball(x, adv, key.epsilon);
    io::write_png(dir / names[i], io::to_raster(adv));
    manifest << nlohmann::json{{"file", names[i]}, {"linf", report::round4(attack::max_abs_diff(x, adv))}}.dump()
             << "\n";
  }
  write_text(dir / "manifest.jsonl", manifest.str());
}

report::MetricsReport cmd_eval(const RunConfig& config) {
  const Layout L(config);
  const auto ds = require_dataset(config);
  const auto bundle = require_models(config);
  check_models_match_dataset(bundle, ds);
  const auto attacks = report_attacks(config, bundle);
  report::ReportOptions opt;
  opt.decode.score_threshold = config.eval.det_score_threshold;
  opt.decode.nms_iou = config.eval.det_nms_iou;
  opt.dataset_id = dataset_id(config);
  opt.seeds = config.attack.seeds;
  // Every emitted adversarial batch is checked against its epsilon ball.
  std::vector<report::AttackSpec> checked;
  for (auto spec : attacks) {
    if (spec.fn) {
      auto inner = spec.fn;
      const double e = spec.epsilon;
      spec.fn = [inner, e](const Tensor<float>& x) {
        auto adv = inner(x);
        verify_epsilon_ball(x, adv, e);
        return adv;
      };
    }
    checked.push_back(std::move(spec));
  }
  auto rep = report::build_report(bundle, ds.test, ds.spec.num_classes, checked, opt);
  report::write_report(rep, L.reports());
  return rep;
}

void cmd_visualize(const RunConfig& config, const std::vector<int>& requested) {
  const Layout L(config);
  const auto ds = require_dataset(config);
  const auto bundle = require_models(config);
  const GeneratorKey key{config.primary_epsilon(), config.attack.seeds.front()};
  const auto g = require_generator(config, key);
  const fs::path gen_dir = L.generator(key.epsilon, key.seed);
  std::vector<int> snaps;
  if (fs::exists(gen_dir / "snapshots.json")) {
    snaps = read_json(gen_dir / "snapshots.json").at("epochs").get<std::vector<int>>();
  }

  const auto ids = requested.empty() ? config.visualize.image_ids : requested;
  const models::TaskModel<float>* task_models[] = {&bundle.classifier(), &bundle.detector(), &bundle.segmenter()};
  fs::create_directories(L.figures());
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(ds.test.size())) {
      throw ConfigError("image id " + std::to_string(id) + " is outside the test split");
    }
    const Tensor<float>& x = ds.test[id].image;
    const auto fused = attack::fused_attention<float>(task_models, x).front();
    const Tensor<float> adv = attack::apply_generator(g, x, key.epsilon);
    const auto adv_att = attack::adversarial_attention(bundle.extractor(), adv);
    std::vector<std::vector<io::Raster>> rows(1);
    rows[0] = {io::to_raster(x), attention::overlay_raster(x, as_map(fused.co)),
               attention::overlay_raster(x, as_map(fused.anti)), io::to_raster(adv),
               attention::overlay_raster(adv, adv_att.maps.front())};
    std::vector<io::Raster> history;
    for (int e : snaps) {
      const auto adv_path = snapshot_path(gen_dir, e, id, "adv");
      const auto att_path = snapshot_path(gen_dir, e, id, "att");
      if (!fs::exists(adv_path) || !fs::exists(att_path)) continue;
      history.push_back(io::read_png(adv_path, 3));
      history.push_back(io::read_png(att_path, 3));
    }
    if (!history.empty()) rows.push_back(std::move(history));
    char name[32];
    std::snprintf(name, sizeof name, "grid_%05d.png", id);
    io::write_png(L.figures() / name, tile_grid(rows));
  }
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const MissingArtifact*>(&e) != nullptr) return 3;
  return 4;
}

std::string error_line(const std::exception& e) {
  const int code = exit_code(e);
  const char* kind = code == 2 ? "config" : code == 3 ? "missing_artifact" : "runtime";
  std::string msg = e.what();
  std::replace(msg.begin(), msg.end(), '\n', ' ');
  return std::string("error[") + std::to_string(code) + "] " + kind + ": " + msg;
}

}  // namespace cta::pipeline
