// Experiment runner: one subcommand per pipeline stage.
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dmac/config.hpp"
#include "dmac/errors.hpp"
#include "dmac/pipeline.hpp"

namespace {

enum Exit { ok = 0, usage = 1, config_error = 2, dependency_error = 3, runtime_failure = 4 };

struct Options {
  std::string config;
  std::string out_dir = "run";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

int run(dmac::pipeline::Stage stage, const Options& o) {
  dmac::config::ExperimentConfig cfg;
  if (!o.config.empty()) cfg = dmac::config::load_config(o.config);
  cfg = dmac::config::apply_overrides(cfg, o.overrides);
  if (o.seed) cfg.seed = *o.seed;
  const auto entry = dmac::pipeline::run_stage(stage, cfg, o.out_dir);
  std::cout << entry.stage << " done in " << o.out_dir << " (config " << entry.config_digest.substr(0, 12) << ")\n";
  for (const auto& a : entry.outputs) std::cout << "  " << a.sha256.substr(0, 12) << "  " << a.path << '\n';
  if (stage == dmac::pipeline::Stage::report) {
    std::ifstream in(std::filesystem::path(o.out_dir) / "report.txt");
    std::cout << '\n' << in.rdbuf();
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dmac: channel-masking adversary and communication retraining"};
  app.require_subcommand(1);
  Options o;
  dmac::pipeline::Stage chosen = dmac::pipeline::Stage::train_team;
  for (auto stage : dmac::pipeline::all_stages()) {
    auto* sub = app.add_subcommand(dmac::pipeline::to_string(stage));
    sub->add_option("--config", o.config, "experiment config (JSON)");
    sub->add_option("--seed", o.seed, "overrides the config seed");
    sub->add_option("--out-dir", o.out_dir, "run directory")->capture_default_str();
    sub->add_option("--stage-override", o.overrides, "block.key=value, repeatable");
    sub->callback([&chosen, stage] { chosen = stage; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }
  try {
    return run(chosen, o);
  } catch (const dmac::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const dmac::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << '\n';
    return dependency_error;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << '\n';
    return runtime_failure;
  }
}
