#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dmac/comm.hpp"
#include "dmac/env.hpp"
#include "dmac/graph.hpp"
#include "dmac/nn.hpp"
#include "dmac/replay.hpp"
#include "dmac/rng.hpp"
#include "dmac/team.hpp"

namespace dmac::adversary {

using nn::Matrix;
using nn::Vector;

enum class MixerKind { linear, vdn };

std::string to_string(MixerKind kind);
MixerKind parse_mixer(const std::string& name);

struct AdversaryConfig {
  double w1 = 1.0;
  double w2 = 0.1;
  double xi = 0.001;
  double gamma = 0.95;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_fraction = 0.5;
  int buffer_transitions = 50000;
  int batch = 64;
  int train_every = 1;
  int target_sync = 200;
  std::vector<int> hidden{64, 64};
  nn::OptimizerConfig optimizer;
  MixerKind mixer = MixerKind::linear;
  int budget = 1;  // masks per step; 0 lets every channel decide on its own
  // A negative radius means the environment's visibility radius.
  graph::FeatureOptions features{{-1.0, graph::kDefaultMinWeight, false}};

  bool operator==(const AdversaryConfig&) const = default;
};

void validate(const AdversaryConfig& config);

// Shared per-channel network: [h_i, h_j] -> (Q keep, Q mask).
struct MaskingPolicy {
  nn::DenseNetwork net;
  double epsilon = 0.0;
};

// Q_tot = sum_c omega_c Q_c + bias with omega >= 0. The unit-weight mode keeps
// omega = 1 and bias = 0 fixed.
struct MixingCritic {
  Vector omega;
  double bias = 0.0;
  MixerKind kind = MixerKind::linear;

  static MixingCritic unit(int channels, MixerKind kind = MixerKind::linear);
  double mix(const Vector& chosen_q) const;
  void project();
  bool operator==(const MixingCritic& other) const;
};

int count_masks(const comm::MaskMatrix& mask);

// 1 / (w1 * shifted + w2 * masks + xi). Rejects a negative shifted reward.
double adversary_reward(double shifted_reward, int masks, const AdversaryConfig& config);

// Columns [h_i; h_j] for every channel, in channel order.
Matrix channel_inputs(std::span<const Vector> features);

enum class SelectMode { greedy, explore };

struct Selection {
  comm::MaskMatrix mask;
  Vector chosen_q;  // per channel, Q of the chosen action
  Matrix q;         // 2 x channels
};

// Budget 0: per-channel argmax (ties keep), epsilon-greedy per channel when
// exploring. Budget k > 0: exactly k masks on the channels whose own agents
// prefer masking the most, by Q_c(mask) - Q_c(keep) with ties to the lower
// channel; exploring replaces the choice by k uniform channels. Only the
// per-channel networks take part, so execution stays decentralized.
Selection select_from_q(const Matrix& q, SelectMode mode, double epsilon, int budget, Rng& rng);
Selection select_masks(const MaskingPolicy& policy, std::span<const Vector> features, SelectMode mode, int budget,
                       Rng& rng);

// sum_c omega_c Q_c(a_c) at the greedy joint action of select_from_q. With
// budget 0 this is the unconstrained maximum of the mixed value.
double best_joint_value(const Matrix& q, const Vector& omega, int budget);

struct Transition {
  Matrix features;  // feature_dim x n, before the step
  std::vector<bool> mask;
  double reward = 0.0;  // adversary reward
};

using TransitionBuffer = EpisodicBuffer<Transition>;

struct TdResult {
  nn::Gradients net;
  Vector omega;
  double bias = 0.0;
  double loss = 0.0;
};

// Gradient of mean (y - Q_tot)^2 with y = r + gamma * max Q_tot from the target
// network and target critic; the last record of an episode does not bootstrap.
TdResult td_gradients(const MaskingPolicy& policy, const MixingCritic& critic, const nn::DenseNetwork& target_net,
                      const MixingCritic& target_critic, std::span<const TransitionBuffer::Ref> batch, double gamma,
                      int budget);

struct CriticOptimizer {
  nn::Optimizer net;
  nn::VectorOptimizer mixer;
};

// One TD step; omega is projected onto the non-negative orthant afterwards.
double td_update(MaskingPolicy& policy, MixingCritic& critic, CriticOptimizer& optimizer,
                 const nn::DenseNetwork& target_net, const MixingCritic& target_critic,
                 std::span<const TransitionBuffer::Ref> batch, double gamma, int budget);

struct AdversaryCurvePoint {
  int episode = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double mean_masks = 0.0;
  double team_return = 0.0;
};

struct Adversary {
  MaskingPolicy policy;
  MixingCritic critic;
  graph::FeatureOptions features;
  int budget = 1;
  std::vector<AdversaryCurvePoint> curve;
};

Adversary make_adversary(const env::Environment& environment, const AdversaryConfig& config, std::uint64_t seed);

// Feature options with the radius resolved against the environment.
graph::FeatureOptions resolve_features(const graph::FeatureOptions& options, const env::Environment& environment);

// Continues training `adversary` for `episodes` episodes against the frozen
// team (policy and gates act greedily). Curve points are appended.
void train_adversary(const env::Environment& environment, const team::TeamPolicy& team, const AdversaryConfig& config,
                     int episodes, std::uint64_t seed, Adversary& adversary);
Adversary train_adversary(const env::Environment& environment, const team::TeamPolicy& team,
                          const AdversaryConfig& config, int episodes, std::uint64_t seed);

// Greedy masks from a trained adversary. With `probability` below 1 the masks
// are applied on a random subset of steps drawn from the episode stream.
class AdversaryMasker final : public team::Interferer {
 public:
  AdversaryMasker(std::shared_ptr<const Adversary> adversary, double probability = 1.0);
  std::unique_ptr<team::Interferer> clone() const override;
  void begin_episode(std::uint64_t seed) override;
  std::optional<comm::MaskMatrix> mask(const team::StepView& view) override;

 private:
  std::shared_ptr<const Adversary> adversary_;
  double probability_;
  Rng rng_;
};

void save_adversary(const Adversary& adversary, std::ostream& out);
Adversary load_adversary(std::istream& in);

void write_curve(std::span<const AdversaryCurvePoint> curve, std::ostream& out);

}  // namespace dmac::adversary
