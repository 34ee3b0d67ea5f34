#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "dmac/nn.hpp"
#include "dmac/rng.hpp"

namespace dmac::comm {

using nn::Matrix;
using nn::Vector;

inline constexpr int kMessageDim = 8;

constexpr int channel_count(int agents) { return agents * (agents - 1) / 2; }

// Unordered agent pair, stored with i < j (zero-based).
struct ChannelId {
  int i = 0;
  int j = 1;
  bool operator==(const ChannelId&) const = default;
};

// Lexicographic enumeration of the channels of an n-agent team.
class ChannelSet {
 public:
  explicit ChannelSet(int agents);

  int agents() const { return agents_; }
  int size() const { return static_cast<int>(pairs_.size()); }
  const ChannelId& operator[](int c) const { return pairs_[c]; }
  // Order-insensitive lookup; i != j.
  int index(int i, int j) const;
  auto begin() const { return pairs_.begin(); }
  auto end() const { return pairs_.end(); }

 private:
  int agents_;
  std::vector<ChannelId> pairs_;
};

// A message slot: fixed-size content or the null value. The null value is a
// zero vector with the flag raised.
struct MessageSlot {
  Vector content = Vector::Zero(kMessageDim);
  bool masked = true;

  bool is_null() const { return masked; }
  static MessageSlot null() { return {}; }
  static MessageSlot carrying(Vector content);
  bool operator==(const MessageSlot& other) const;
};

// One agent's raw observation plus a slot per partner (own slot stays null).
struct AgentView {
  Vector observation;
  std::vector<MessageSlot> slots;
};

struct ObservationSet {
  std::vector<AgentView> agents;

  int size() const { return static_cast<int>(agents.size()); }
  const MessageSlot& slot(int receiver, int sender) const { return agents[receiver].slots[sender]; }
  MessageSlot& slot(int receiver, int sender) { return agents[receiver].slots[sender]; }
  bool operator==(const ObservationSet& other) const;
};

// Per-channel gate; true means the two endpoints exchange messages.
struct CommDecision {
  std::vector<bool> open;
  int open_count() const;
};

// Per-channel mask action: true (1) closes the channel.
struct MaskMatrix {
  std::vector<bool> mask;

  static MaskMatrix zeros(int channels) { return {std::vector<bool>(channels, false)}; }
  bool operator==(const MaskMatrix&) const = default;
};

// Fixed linear encoding of an observation into a message, squashed to [-1, 1].
// The default map keeps the leading observation entries, which every task
// orders so that the sender's own state comes first.
class MessageEncoder {
 public:
  MessageEncoder() = default;
  explicit MessageEncoder(int observation_dim);
  MessageEncoder(Matrix weights);

  Vector encode(const Vector& observation) const;
  const Matrix& weights() const { return weights_; }

 private:
  Matrix weights_;
};

ObservationSet exchange(std::span<const Vector> observations, const CommDecision& decision,
                        const MessageEncoder& encoder);

// Nulls slot (i,j) at both i and j wherever the channel's mask action is 1.
ObservationSet apply_mask(ObservationSet set, const MaskMatrix& mask);

// o_i followed by [content, null flag] for every partner in index order.
int policy_input_dim(int observation_dim, int agents);
Vector policy_input(const ObservationSet& set, int agent);
Matrix policy_inputs(const ObservationSet& set);

// Per-agent features seen by the gate network: o_i followed by a one-hot of i.
std::vector<Vector> gate_features(std::span<const Vector> observations);
int gate_feature_dim(int observation_dim, int agents);

// Columns are [f_i; f_j] for every channel, in ChannelSet order.
Matrix pair_inputs(std::span<const Vector> features, const ChannelSet& channels);

// Gate probabilities stay inside [kGateFloor, 1 - kGateFloor].
inline constexpr double kGateFloor = 0.01;
Vector gate_probabilities(const nn::DenseNetwork& gate, const Matrix& pairs);

enum class GateMode { sample, greedy };

// Greedy mode opens every channel with probability >= 0.5.
CommDecision decide(const Vector& probabilities, GateMode mode, Rng& rng);
CommDecision cp_decide(const nn::DenseNetwork& gate, std::span<const Vector> features, GateMode mode, Rng& rng);

// One step of a gate-policy episode as seen by the policy-gradient update.
struct GateStep {
  Matrix pairs;                 // gate inputs, one column per channel
  std::vector<bool> sampled;    // gate actually drawn by the policy
  std::vector<bool> delivered;  // open and not masked
  double team_reward = 0.0;
};

struct GateEpisode {
  std::vector<GateStep> steps;
};

// REINFORCE on discounted team return minus a per-message cost. The team part
// of the advantage uses the batch-mean return at the same time step as the
// baseline; each delivered message is charged to its own gate. Returns the
// surrogate loss. Throws std::invalid_argument on an empty batch.
double train_cp_step(nn::DenseNetwork& gate, nn::Optimizer& optimizer, std::span<const GateEpisode> batch,
                     double comm_cost, double gamma);

// Surrogate-loss gradient used by train_cp_step, exposed for checking.
nn::Gradients cp_gradients(const nn::DenseNetwork& gate, std::span<const GateEpisode> batch, double comm_cost,
                           double gamma, double* loss = nullptr);

struct CommEvent {
  int episode = 0;
  int t = 0;
  ChannelId channel;
  bool opened = true;
  bool masked = false;
};

// Gate events of opened channels. A delivered message is an opened event that
// was not masked.
class CommLog {
 public:
  void append_step(int episode, int t, const ChannelSet& channels, const CommDecision& decision,
                   const MaskMatrix* mask);
  const std::vector<CommEvent>& events() const { return events_; }
  std::size_t delivered() const;
  void clear() { events_.clear(); }

  // One JSON object per line: episode, t, channel [i, j], opened, masked.
  void write_lines(std::ostream& out) const;
  static CommLog read_lines(std::istream& in);

 private:
  std::vector<CommEvent> events_;
};

}  // namespace dmac::comm
