// Command-line front end: run, validate and compare experiments.
//
//   svote run --config exp.cfg --out runs/a [--seed N]
//   svote validate --config exp.cfg
//   svote compare runs/a runs/b ...
//
// Exit status: 0 success, 1 validation error, 2 runtime error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "svote/experiment.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kValidationError = 1;
constexpr int kRuntimeError = 2;

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const svote::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decentralized federated learning simulator with vote-based client selection"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run one experiment and write metrics.csv and summary.json");
  run->add_option("--config", config_path, "Experiment config (key=value)")->required();
  run->add_option("--out", out_dir, "Output directory")->required();
  run->add_option("--seed", seed, "Override the config's master seed");

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a config without running it");
  validate->add_option("--config", validate_path, "Experiment config (key=value)")->required();

  std::vector<std::string> dirs;
  auto* compare = app.add_subcommand("compare", "Tabulate completed runs against the first");
  compare->add_option("dirs", dirs, "Run directories")->required()->expected(2, -1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidationError;
  }

  if (*run) {
    return guarded([&] {
      auto cfg = svote::parse_config(config_path);
      if (seed) cfg.seed = *seed;
      cfg.output_dir = out_dir;
      const auto outcome = svote::run_experiment(cfg, out_dir);
      const auto& s = outcome.summary;
      std::cout << "method " << s["method"].get<std::string>() << ": final F1 "
                << s["f1"]["mean"].get<double>() << " +/- " << s["f1"]["std"].get<double>()
                << ", bytes sent " << s["bytes"]["sent"].get<std::uint64_t>();
      if (s.contains("fedavg_reference"))
        std::cout << ", byte reduction vs fedavg "
                  << s["fedavg_reference"]["byte_reduction_pct"].get<double>() << "%";
      std::cout << "\nwrote " << (std::filesystem::path(out_dir) / svote::kMetricsFile).string()
                << " and " << svote::kSummaryFile << "\n";
      return kOk;
    });
  }
  if (*validate) {
    return guarded([&] {
      svote::parse_config(validate_path);
      std::cout << validate_path << ": ok\n";
      return kOk;
    });
  }
  return guarded([&] {
    try {
      std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
      std::cout << svote::compare(paths);
      return kOk;
    } catch (const svote::ComparisonError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kValidationError;
    }
  });
}
