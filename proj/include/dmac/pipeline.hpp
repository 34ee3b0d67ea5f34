#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dmac/config.hpp"

namespace dmac::pipeline {

enum class Stage { train_team, train_adversary, retrain, train_attack, evaluate, report };

std::string to_string(Stage stage);
Stage parse_stage(const std::string& name);
const std::vector<Stage>& all_stages();

struct Artifact {
  std::string path;  // relative to the run directory
  std::string sha256;

  bool operator==(const Artifact&) const = default;
};

struct StageEntry {
  std::string stage;
  std::string config_digest;
  std::uint64_t seed = 0;
  std::string started;  // UTC, ISO 8601
  std::string finished;
  std::vector<Artifact> outputs;
};

// manifest.json in the run directory. One entry per stage; a re-run replaces
// the stage's entry.
struct RunManifest {
  std::map<std::string, StageEntry> stages;

  const StageEntry* find(Stage stage) const;
};

RunManifest read_manifest(const std::filesystem::path& run_dir);
void write_manifest(const RunManifest& manifest, const std::filesystem::path& run_dir);

// Fails with DependencyError when a listed artifact is missing or its digest
// no longer matches.
void verify_artifacts(const StageEntry& entry, const std::filesystem::path& run_dir);

// Runs one stage in `run_dir`, records its entry in the manifest and returns
// it. Prerequisites: train-adversary, train-attack and evaluate need
// train-team; retrain needs train-team and train-adversary.
StageEntry run_stage(Stage stage, const config::ExperimentConfig& config, const std::filesystem::path& run_dir);

// Evaluation conditions, in table order.
const std::vector<std::string>& conditions();

struct ReportCell {
  double win_rate = 0.0;
  double mean_return = 0.0;
  double sd = 0.0;
  double average = 0.0;
  double high = 0.0;
  double low = 0.0;
};

// condition -> {"before", "after"} -> cell; absent cells are gaps.
struct Report {
  std::map<std::string, std::map<std::string, ReportCell>> cells;
  std::vector<std::string> gaps;  // "condition/column" pairs without data
};

Report build_report(const std::filesystem::path& run_dir);
std::string report_text(const Report& report);
std::string report_json(const Report& report);
Report parse_report_json(const std::string& text);
// Reads the numbers back out of report_text.
Report parse_report_text(const std::string& text);

}  // namespace dmac::pipeline
