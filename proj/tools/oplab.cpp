// Experiment runner CLI: run / summarize / validate.
// Exit codes: 0 success, 2 configuration error, 3 partial failure.

#include <exception>
#include <iostream>

#include <CLI11.hpp>

#include "oplab/expcli.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitPartialFailure = 3;

int cmd_run(const std::string& config_path, int workers,
            std::uint64_t seed_offset) {
  const oplab::ExperimentConfig cfg =
      oplab::load_experiment_config(config_path);
  const oplab::ExperimentOutcome outcome =
      oplab::run_experiment(cfg, workers, seed_offset);
  std::cout << "family: " << oplab::family_name(cfg.family) << "\n"
            << "runs: " << outcome.records.size() << "\n"
            << "summary: " << (outcome.output_dir / "summary.csv").string()
            << "\n"
            << "manifest: " << (outcome.output_dir / "manifest.json").string()
            << "\n";
  if (!outcome.ok()) {
    for (const auto& cell : outcome.failed_cells)
      std::cerr << "failed cell: " << cell << "\n";
    return kExitPartialFailure;
  }
  return kExitOk;
}

int cmd_summarize(const std::string& dir, double ci) {
  const oplab::RunSummary summary = oplab::summarize_directory(dir, ci);
  oplab::write_summary_csv(summary, std::cout);
  return kExitOk;
}

int cmd_validate(const std::string& config_path) {
  const oplab::ExperimentConfig cfg =
      oplab::load_experiment_config(config_path);
  std::cout << "ok: " << oplab::family_name(cfg.family) << ", "
            << cfg.methods.size() << " methods x " << cfg.n_grid.size()
            << " grid points x " << cfg.seeds.size() << " seeds\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual ranking and off-policy bandit experiments"};
  app.require_subcommand(1);

  std::string config_path, dir;
  int workers = 1;
  std::uint64_t seed_offset = 0;
  double ci = 0.8;

  CLI::App* run = app.add_subcommand("run", "Execute an experiment config");
  run->add_option("--config", config_path, "Experiment config file")
      ->required();
  run->add_option("--workers", workers, "Concurrent cells");
  run->add_option("--seed-offset", seed_offset, "Offset added to every seed");

  CLI::App* summarize =
      app.add_subcommand("summarize", "Aggregate run CSVs from a directory");
  summarize->add_option("--dir", dir, "Experiment output directory")
      ->required();
  summarize->add_option("--ci", ci, "Confidence level (default 0.8)");

  CLI::App* validate =
      app.add_subcommand("validate", "Check a config without running");
  validate->add_option("--config", config_path, "Experiment config file")
      ->required();

  try {
    app.parse(argc, argv);
    if (run->parsed()) return cmd_run(config_path, workers, seed_offset);
    if (summarize->parsed()) return cmd_summarize(dir, ci);
    if (validate->parsed()) return cmd_validate(config_path);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? kExitConfigError : kExitOk;
  } catch (const oplab::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPartialFailure;
  }
  return kExitOk;
}
