#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "dmac/comm.hpp"
#include "dmac/env.hpp"
#include "dmac/graph.hpp"
#include "dmac/nn.hpp"
#include "dmac/replay.hpp"
#include "dmac/rng.hpp"
#include "dmac/team.hpp"

namespace dmac::attacks {

using nn::Matrix;
using nn::Vector;

// `budget` distinct channels chosen uniformly; budget 1 is the plain random masker.
comm::MaskMatrix random_masker(int agents, Rng& rng, int budget = 1);

// Masks the channel between the top-reward agent (ties to the lowest index) and
// a uniformly chosen graph neighbour; falls back to random_masker when the top
// agent has no neighbours.
comm::MaskMatrix reward_based_masker(std::span<const double> agent_rewards, const graph::AgentGraph& graph, Rng& rng);

// Channels whose messages reach both endpoints in `set`.
std::vector<int> open_channels(const comm::ObservationSet& set);

// Replaces the content of `budget` uniformly chosen open channels, at both
// endpoints, with independent uniform vectors in [-1, 1]. Returns the channels.
std::vector<int> heuristic_attack(comm::ObservationSet& set, int budget, Rng& rng);

class RandomMasker final : public team::Interferer {
 public:
  explicit RandomMasker(int budget = 1) : budget_(budget) {}
  std::unique_ptr<team::Interferer> clone() const override { return std::make_unique<RandomMasker>(*this); }
  void begin_episode(std::uint64_t seed) override { rng_ = Rng(seed); }
  std::optional<comm::MaskMatrix> mask(const team::StepView& view) override;

 private:
  int budget_;
  Rng rng_;
};

// Uses the per-agent rewards of the previous step (all zero on the first).
class RewardBasedMasker final : public team::Interferer {
 public:
  // A negative radius means the environment's visibility radius.
  explicit RewardBasedMasker(graph::GraphOptions graph = {-1.0, graph::kDefaultMinWeight, false}) : graph_(graph) {}
  std::unique_ptr<team::Interferer> clone() const override { return std::make_unique<RewardBasedMasker>(*this); }
  void begin_episode(std::uint64_t seed) override;
  std::optional<comm::MaskMatrix> mask(const team::StepView& view) override;
  void after_step(const team::StepView& view, const comm::MaskMatrix& applied,
                  const env::StepOutcome& outcome) override;

 private:
  graph::GraphOptions graph_;
  std::vector<double> last_rewards_;
  Rng rng_;
};

class HeuristicAttacker final : public team::Interferer {
 public:
  explicit HeuristicAttacker(int budget = 1) : budget_(budget) {}
  std::unique_ptr<team::Interferer> clone() const override { return std::make_unique<HeuristicAttacker>(*this); }
  void begin_episode(std::uint64_t seed) override { rng_ = Rng(seed); }
  void perturb(comm::ObservationSet& set, const team::StepView& view) override;

 private:
  int budget_;
  Rng rng_;
};

struct AttackConfig {
  int budget = 1;
  int codebook = 16;
  std::vector<int> hidden{64, 64};
  nn::OptimizerConfig optimizer;
  double code_learning_rate = 0.01;
  double gamma = 0.95;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_fraction = 0.5;
  int buffer_transitions = 50000;
  int batch = 64;
  int train_every = 1;
  int target_sync = 200;
  graph::FeatureOptions features{{-1.0, graph::kDefaultMinWeight, false}};

  bool operator==(const AttackConfig&) const = default;
};

void validate(const AttackConfig& config);

// [h_i, h_j] -> one Q value per codebook entry. Codebook columns are message
// vectors kept inside [-1, 1].
struct AttackerPolicy {
  nn::DenseNetwork net;
  Matrix codebook;  // message dim x M
  graph::FeatureOptions features;
  int budget = 1;
  double epsilon = 1.0;
};

AttackerPolicy make_attacker(const env::Environment& environment, const AttackConfig& config, std::uint64_t seed);

struct AttackChoice {
  int channel = 0;
  int code = 0;
};

// Greedy or epsilon-greedy choice of up to `budget` distinct open channels,
// each paired with its best code.
std::vector<AttackChoice> choose_attack(const AttackerPolicy& attacker, const Matrix& q,
                                        std::span<const int> open, bool explore, Rng& rng);

void apply_attack(comm::ObservationSet& set, const Matrix& codebook, std::span<const AttackChoice> choices);

struct AttackRecord {
  Matrix features;      // feature_dim x n
  Matrix observations;  // observation_dim x n
  std::vector<int> open;
  std::vector<bool> delivered;
  std::vector<AttackChoice> choices;
  double reward = 0.0;  // r_max - r_t
};

using AttackBuffer = EpisodicBuffer<AttackRecord>;

struct AttackCurvePoint {
  int episode = 0;
  double team_return = 0.0;
  double loss = 0.0;
  double attacked_fraction = 0.0;
};

// Value-based training against a frozen team with attacker reward r_max - r_t;
// the codebook follows the victim's gradient away from its clean greedy action.
std::vector<AttackCurvePoint> train_learned_attack(const env::Environment& environment, const team::TeamPolicy& team,
                                                   const AttackConfig& config, int episodes, std::uint64_t seed,
                                                   AttackerPolicy& attacker);

// Mean over the two endpoints of Q(a*) - max_{a != a*} Q(a) with the chosen
// code in the slot and a* the victim's clean greedy action. The gradient with
// respect to the code is written to `gradient` when given.
double code_margin(const team::TeamPolicy& team, const AttackRecord& record, const Matrix& codebook,
                   const AttackChoice& choice, Vector* gradient);

class LearnedAttacker final : public team::Interferer {
 public:
  explicit LearnedAttacker(std::shared_ptr<const AttackerPolicy> attacker);
  std::unique_ptr<team::Interferer> clone() const override { return std::make_unique<LearnedAttacker>(*this); }
  void begin_episode(std::uint64_t seed) override { rng_ = Rng(seed); }
  void perturb(comm::ObservationSet& set, const team::StepView& view) override;

 private:
  std::shared_ptr<const AttackerPolicy> attacker_;
  Rng rng_;
};

void save_attacker(const AttackerPolicy& attacker, std::ostream& out);
AttackerPolicy load_attacker(std::istream& in);

void write_curve(std::span<const AttackCurvePoint> curve, std::ostream& out);

}  // namespace dmac::attacks
