#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cta/errors.hpp"
#include "cta/pipeline.hpp"

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run config (omit for defaults)");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set attack.epochs=4")->allow_extra_args(false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-task attention-shift attack toolkit"};
  app.require_subcommand(1);

  Common common;
  cta::pipeline::AttackArgs attack_args;
  double attack_eps = -1;
  long long attack_seed = -1;
  std::string attack_input;
  std::vector<int> image_ids;

  auto* datagen = app.add_subcommand("datagen", "Generate the synthetic multi-task dataset");
  auto* train_models = app.add_subcommand("train-models", "Train the classifier, detector and segmenter");
  auto* train_attack = app.add_subcommand("train-attack", "Train perturbation generators");
  auto* attack = app.add_subcommand("attack", "Write adversarial PNGs with a trained generator");
  auto* eval = app.add_subcommand("eval", "Evaluate all attacks and write the report");
  auto* visualize = app.add_subcommand("visualize", "Write attention grids for test images");
  for (auto* cmd : {datagen, train_models, train_attack, attack, eval, visualize}) add_common(cmd, common);
  attack->add_option("--input", attack_input, "Directory of PNG images (default: test split)");
  attack->add_option("--epsilon", attack_eps, "Epsilon on the 0-255 scale (default: first configured)");
  attack->add_option("--seed", attack_seed, "Generator seed (default: first configured)");
  visualize->add_option("--images", image_ids, "Test image ids (default: visualize.image_ids)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error[2] config: " << e.what() << "\n";
    return 2;
  }

  try {
    const auto config = cta::load_config_file(common.config_path, common.sets);
    if (datagen->parsed()) {
      cta::pipeline::cmd_datagen(config);
    } else if (train_models->parsed()) {
      cta::pipeline::cmd_train_models(config);
    } else if (train_attack->parsed()) {
      cta::pipeline::cmd_train_attack(config);
    } else if (attack->parsed()) {
      attack_args.input = attack_input;
      if (attack_eps > 0) attack_args.epsilon_8bit = attack_eps;
      if (attack_seed >= 0) attack_args.seed = static_cast<std::uint64_t>(attack_seed);
      cta::pipeline::cmd_attack(config, attack_args);
    } else if (eval->parsed()) {
      const auto rep = cta::pipeline::cmd_eval(config);
      std::cout << cta::report::render_table(rep);
    } else if (visualize->parsed()) {
      cta::pipeline::cmd_visualize(config, image_ids);
    }
  } catch (const std::exception& e) {
    std::cerr << cta::pipeline::error_line(e) << "\n";
    return cta::pipeline::exit_code(e);
  }
  return 0;
}
