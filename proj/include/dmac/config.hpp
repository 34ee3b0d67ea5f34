#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "dmac/adversary.hpp"
#include "dmac/attacks.hpp"
#include "dmac/env.hpp"
#include "dmac/retrain.hpp"
#include "dmac/team.hpp"

namespace dmac::config {

struct EvalSettings {
  int episodes = 500;
  int workers = 0;  // 0: hardware concurrency

  bool operator==(const EvalSettings&) const = default;
};

// Everything one run needs. Episode counts sit next to the learner settings
// they drive.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  env::EnvConfig env = env::default_config(env::Kind::traffic_junction);
  team::TeamConfig team;
  int team_episodes = 3000;
  adversary::AdversaryConfig adversary;
  int adversary_episodes = 600;
  retrain::RetrainSchedule retrain;
  attacks::AttackConfig attack;
  int attack_episodes = 600;
  EvalSettings eval;

  bool operator==(const ExperimentConfig&) const = default;
};

void validate(const ExperimentConfig& config);

// JSON document with blocks env, team, adversary, retrain, attack, eval. Keys
// left out keep their defaults (the env block starts from the defaults of its
// kind); unknown keys and mistyped values raise ConfigError naming the path.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical text: every key, fixed order, shortest round-trip doubles.
std::string serialize_config(const ExperimentConfig& config);

// "block.key=value" with a JSON value; bare words are taken as strings.
ExperimentConfig apply_overrides(const ExperimentConfig& config, std::span<const std::string> overrides);

// SHA-256 of the canonical text.
std::string config_digest(const ExperimentConfig& config);

}  // namespace dmac::config
