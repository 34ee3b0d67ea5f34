#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dmac/adversary.hpp"
#include "dmac/env.hpp"
#include "dmac/team.hpp"

namespace dmac::retrain {

struct RetrainSchedule {
  int rounds = 3;
  int adversary_episodes = 200;  // refresh budget per round
  int cp_episodes = 400;         // gate retraining per round
  double p_mask = 0.5;           // chance that a retraining step is masked
  bool refresh_adversary = true;
  bool joint = false;            // also retrain the policy network
  int metric_episodes = 100;     // evaluation episodes per round metric, 0 skips

  bool operator==(const RetrainSchedule&) const = default;
};

void validate(const RetrainSchedule& schedule);

struct RoundMetrics {
  int round = 0;
  double clean_win = 0.0;
  double masked_win = 0.0;
  double frequency_sd = 0.0;
  double frequency_average = 0.0;
  long long episodes = 0;  // training episodes consumed in this round
};

struct RetrainResult {
  team::TeamPolicy policy;
  adversary::Adversary adversary;
  std::vector<RoundMetrics> rounds;
  long long training_episodes = 0;
  std::string policy_digest_before;
  std::string policy_digest_after;
};

// Per round: refresh the adversary against the current gates, then retrain the
// gates while the adversary's greedy masks hit each step with probability
// p_mask. The policy network stays frozen unless the schedule is joint.
RetrainResult retrain_cp(const env::Environment& environment, team::TeamPolicy policy,
                         const team::TeamConfig& team_config, adversary::Adversary adversary,
                         const adversary::AdversaryConfig& adversary_config, const RetrainSchedule& schedule,
                         std::uint64_t seed);

// Seed used by round `round` for its gate retraining stream.
std::uint64_t cp_round_seed(std::uint64_t seed, int round);

void write_rounds(std::span<const RoundMetrics> rounds, std::ostream& out);

}  // namespace dmac::retrain
