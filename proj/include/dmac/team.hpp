#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmac/comm.hpp"
#include "dmac/env.hpp"
#include "dmac/nn.hpp"
#include "dmac/replay.hpp"
#include "dmac/rng.hpp"

namespace dmac::team {

using nn::Matrix;
using nn::Vector;

enum class CommMode { learned, full, none };

std::string to_string(CommMode mode);
CommMode parse_comm_mode(const std::string& name);

struct TeamConfig {
  std::vector<int> hidden{64, 64};
  std::vector<int> gate_hidden{64, 64};
  nn::OptimizerConfig q_optimizer;
  nn::OptimizerConfig gate_optimizer;
  double gamma = 0.95;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_fraction = 0.5;  // share of episodes over which epsilon anneals
  int buffer_transitions = 50000;
  int batch = 64;
  int train_every = 1;   // environment steps per gradient update
  int target_sync = 200;  // gradient updates between target refreshes
  double comm_cost = 0.005;
  int cp_batch = 8;  // episodes per gate-policy update
  // Added to the learners' reward for each agent that finishes its own task in
  // a step. The environment's team reward is left untouched.
  double completion_bonus = 0.0;
  // Subtracted from the learners' reward for each active agent in a step.
  double step_penalty = 0.0;
  // Initial open probability of every gate, set through the output bias.
  // Unset keeps the random initialization.
  std::optional<double> gate_open_init;
  // Fraction of team-training episodes that run before gate updates start.
  double gate_delay = 0.0;
  CommMode mode = CommMode::learned;

  bool operator==(const TeamConfig&) const = default;
};

void validate(const TeamConfig& config);

// Linear anneal from start to end over the first `fraction` of `episodes`.
double epsilon_at(int episode, int episodes, double start, double end, double fraction);

// Shared per-agent Q network over (o_i, message slots) plus the gate network.
struct TeamPolicy {
  nn::DenseNetwork q;
  nn::DenseNetwork gate;
  comm::MessageEncoder encoder;
  CommMode mode = CommMode::learned;
  int agents = 0;
  int observation_dim = 0;
  int action_count = 0;
};

TeamPolicy make_team_policy(const env::Environment& environment, const TeamConfig& config, std::uint64_t seed);

// Gate decision for the current observations; fills `pairs` with the gate
// inputs when requested (learned mode only).
comm::CommDecision gate_decision(const TeamPolicy& policy, std::span<const Vector> observations, comm::GateMode mode,
                                 Rng& rng, Matrix* pairs = nullptr);

// Greedy (ties to the lowest action) or epsilon-greedy actions, one per column.
std::vector<int> act(const TeamPolicy& policy, const Matrix& inputs, double epsilon, Rng& rng);

struct StepView {
  const env::Environment& env;
  std::span<const Vector> observations;
  const comm::CommDecision& decision;
  int t = 0;
};

// Hook into the per-step message flow: an optional mask before delivery, an
// optional rewrite of delivered content, and a notification after the step.
class Interferer {
 public:
  virtual ~Interferer() = default;
  virtual std::unique_ptr<Interferer> clone() const = 0;
  virtual void begin_episode(std::uint64_t /*seed*/) {}
  virtual std::optional<comm::MaskMatrix> mask(const StepView& /*view*/) { return std::nullopt; }
  virtual void perturb(comm::ObservationSet& /*set*/, const StepView& /*view*/) {}
  virtual void after_step(const StepView& /*view*/, const comm::MaskMatrix& /*applied*/,
                          const env::StepOutcome& /*outcome*/) {}
};

struct StepRecord {
  Matrix observations;  // observation_dim x n
  std::vector<bool> sampled;    // gate decision
  std::vector<bool> delivered;  // open, both endpoints active, not masked
  std::vector<int> actions;
  std::vector<bool> active;
  double reward = 0.0;
  int completed = 0;
  int masks = 0;
  Matrix gate_pairs;  // learned mode, only when recording
};

struct EpisodeResult {
  double team_return = 0.0;
  bool win = false;
  int steps = 0;
  int masks = 0;
  std::vector<int> delivered;  // per channel
  std::vector<StepRecord> records;
};

struct RolloutOptions {
  comm::GateMode gate = comm::GateMode::greedy;
  double epsilon = 0.0;
  bool record = false;
};

// One full episode. Every random draw derives from `seed`: the environment
// reset, the gate and exploration stream, and the interferer's stream.
EpisodeResult run_episode(env::Environment& environment, const TeamPolicy& policy, std::uint64_t seed,
                          const RolloutOptions& options, Interferer* interferer = nullptr);

// Policy inputs of a recorded step, rebuilt from raw observations and the
// delivered channels.
Matrix record_inputs(const TeamPolicy& policy, const StepRecord& record);

using ReplayBuffer = EpisodicBuffer<StepRecord>;

// Mean squared error between the unit-weight sum of chosen Q values and
// r + gamma * (sum of next greedy target values). Inactive agents are left out.
nn::Gradients q_gradients(const TeamPolicy& policy, const nn::DenseNetwork& target, std::span<const ReplayBuffer::Ref> batch,
                          double gamma, double* loss = nullptr);

struct CurvePoint {
  int episode = 0;
  double team_return = 0.0;
  bool win = false;
  double q_loss = 0.0;
  double open_fraction = 0.0;
};

struct TrainResult {
  TeamPolicy policy;
  std::vector<CurvePoint> curve;
  int episodes = 0;
};

// Joint training of the Q network and, in learned mode, the gate policy.
TrainResult train_team(const env::Environment& environment, const TeamConfig& config, int episodes, std::uint64_t seed);

struct CpTrainOptions {
  int episodes = 0;
  bool train_policy = false;  // also update the Q network
  Interferer* interferer = nullptr;
};

// Gate-policy training with the given policy network frozen unless asked
// otherwise. Returns one curve point per episode.
std::vector<CurvePoint> train_cp(const env::Environment& environment, TeamPolicy& policy, const TeamConfig& config,
                                 const CpTrainOptions& options, std::uint64_t seed);

// SHA-256 of the Q network parameters, hex encoded.
std::string policy_digest(const TeamPolicy& policy);
std::string gate_digest(const TeamPolicy& policy);

void save_team(const TeamPolicy& policy, std::ostream& out);
TeamPolicy load_team(std::istream& in);

void write_curve(std::span<const CurvePoint> curve, std::ostream& out);

}  // namespace dmac::team
