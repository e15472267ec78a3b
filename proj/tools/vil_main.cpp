#include "vil/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

namespace {

int run(const std::string& experiment, const std::string& config_path,
        const std::string& out_dir, long long seed,
        const std::string& grad_mode) {
  try {
    vil::ExperimentConfig cfg = vil::load_experiment_config(config_path);
    if (!experiment.empty() && experiment != cfg.experiment) {
      std::cerr << "config declares experiment '" << cfg.experiment
                << "' but '" << experiment << "' was requested\n";
      return 2;
    }
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (!grad_mode.empty()) cfg.grad_mode = grad_mode;
    const vil::ResultBundle bundle = vil::run_experiment(cfg);
    for (const std::string& f : bundle.files) {
      std::cout << bundle.out_dir << "/" << f << "\n";
    }
    if (bundle.exit_code != 0) {
      std::cerr << "experiment finished with errors (see error.json)\n";
    }
    return bundle.exit_code;
  } catch (const vil::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const vil::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "vil: equilibrium layers for routing games - solvers, equilibrium "
      "gradients, and the experiment suite"};
  app.require_subcommand(1);

  std::string config_path, out_dir, grad_mode;
  long long seed = -1;

  const std::vector<std::string> experiments{
      "solve",      "gradcheck",        "braess",
      "linear-city-learn", "linear-city-toll", "two-loop-bench"};
  for (const std::string& name : experiments) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name +
                                                 " experiment");
    sub->add_option("--config", config_path, "experiment config (TOML)")
        ->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--seed", seed, "seed override");
    sub->add_option("--grad-mode", grad_mode,
                    "gradient mode override (implicit|explicit|fd)");
    sub->callback([name, &config_path, &out_dir, &seed, &grad_mode] {
      std::exit(run(name, config_path, out_dir, seed, grad_mode));
    });
  }

  CLI::App* validate =
      app.add_subcommand("validate", "validate an experiment config");
  validate->add_option("--config", config_path, "experiment config (TOML)")
      ->required();
  validate->callback([&config_path] {
    const std::vector<std::string> diags = vil::validate_config(config_path);
    for (const std::string& d : diags) std::cout << d << "\n";
    std::exit(diags.empty() ? 0 : 2);
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}
