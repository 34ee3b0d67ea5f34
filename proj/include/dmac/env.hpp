#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmac/nn.hpp"
#include "dmac/rng.hpp"

namespace dmac::env {

using nn::Matrix;
using nn::Vector;

enum class Kind { traffic_junction, predator_prey, relay };

std::string to_string(Kind kind);
Kind parse_kind(const std::string& name);

struct EnvConfig {
  Kind kind = Kind::traffic_junction;
  int agents = 10;
  int width = 14;
  int height = 14;
  int horizon = 40;
  double radius = 1.0;  // visibility radius, in the environment's own metric
  std::uint64_t seed = 0;

  // predator-prey
  int capture_threshold = 3;
  int prey_speed = 1;  // prey moves per step; 2 makes predators the slower side

  // relay
  int signals = 4;
  int scouts = 1;
  double win_fraction = 0.8;

  bool operator==(const EnvConfig&) const = default;
};

// Defaults for each task: TJ 10 cars on a 14x14 two-road junction with a
// 40-step horizon; PP 8 predators on 10x10 with 60 steps and 3 captures.
EnvConfig default_config(Kind kind);
void validate(const EnvConfig& config);

struct GridPos {
  int x = 0;
  int y = 0;
  bool operator==(const GridPos&) const = default;
};

struct EnvState {
  int width = 0;
  int height = 0;
  std::vector<GridPos> positions;
  std::vector<Vector> attributes;  // per-agent kinematic / route attributes
  int t = 0;
  bool terminal = false;
};

struct StepOutcome {
  double team_reward = 0.0;
  std::vector<double> agent_rewards;
  bool terminal = false;
  std::optional<bool> win;  // set only when terminal
  int completed = 0;        // agents that finished their own task this step
};

// Symmetric n x n, zero diagonal.
using DistanceTable = Matrix;

// A cooperative multi-agent task. Instances are copyable through clone() and
// are stepped by one caller at a time.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::unique_ptr<Environment> clone() const = 0;
  const EnvConfig& config() const { return config_; }
  int agent_count() const { return config_.agents; }

  virtual int observation_dim() const = 0;
  virtual int action_count() const = 0;
  virtual int attribute_dim() const = 0;

  virtual void reset(std::uint64_t seed) = 0;
  virtual StepOutcome step(std::span<const int> actions) = 0;
  virtual std::vector<Vector> observe() const = 0;
  virtual DistanceTable distances() const = 0;

  // Agents whose actions still affect the task.
  virtual bool is_active(int /*agent*/) const { return true; }
  std::vector<bool> active() const;

  // Analytic bounds of the per-step team reward.
  virtual double reward_min() const = 0;
  virtual double reward_max() const = 0;

  const EnvState& state() const { return state_; }
  bool terminal() const { return state_.terminal; }

  // Visibility predicate shared by observe() and the graph builder.
  bool visible(int i, int j) const;

  // Hash of the complete internal state, including the RNG.
  virtual std::uint64_t digest() const = 0;

 protected:
  explicit Environment(EnvConfig config) : config_(std::move(config)) {}
  void check_actions(std::span<const int> actions) const;
  void refresh_attributes();
  virtual Vector attributes_of(int agent) const = 0;

  EnvConfig config_;
  EnvState state_;
};

// Throws std::logic_error when the outcome is not terminal.
bool is_win(const StepOutcome& outcome);

std::unique_ptr<Environment> make_environment(const EnvConfig& config);

// Traffic junction: cars follow fixed straight routes through a junction of
// two two-lane roads. Actions: 0 gas, 1 brake. Cars that collide are removed.
class TrafficJunction final : public Environment {
 public:
  static constexpr int kGas = 0;
  static constexpr int kBrake = 1;
  static constexpr double kCollisionReward = -10.0;
  static constexpr double kTimeReward = -0.01;

  explicit TrafficJunction(EnvConfig config);

  std::unique_ptr<Environment> clone() const override;
  int observation_dim() const override { return 13; }
  int action_count() const override { return 2; }
  int attribute_dim() const override { return 5; }
  void reset(std::uint64_t seed) override;
  StepOutcome step(std::span<const int> actions) override;
  std::vector<Vector> observe() const override;
  DistanceTable distances() const override;
  bool is_active(int agent) const override { return !exited_[agent] && !crashed_[agent]; }
  double reward_min() const override;
  double reward_max() const override { return 0.0; }
  std::uint64_t digest() const override;

  int route(int agent) const { return route_[agent]; }
  bool exited(int agent) const { return exited_[agent]; }
  bool crashed(int agent) const { return crashed_[agent]; }
  int collisions() const { return collisions_; }
  bool in_intersection(GridPos p) const;
  // Cell the car would occupy after gas, or nullopt if it would leave the grid.
  std::optional<GridPos> next_cell(int agent) const;
  // Places cars explicitly; used by scripted scenarios.
  void place(int agent, GridPos pos);

 private:
  Vector attributes_of(int agent) const override;
  GridPos heading(int agent) const;

  std::vector<int> route_;
  std::vector<int> prev_action_;
  std::vector<bool> exited_;
  std::vector<bool> crashed_;
  int collisions_ = 0;
  Rng rng_;
};

// Predator-prey: predators chase a single evasive prey; a capture happens when
// at least two predators are within distance 1 of it. Actions: 0 stay,
// 1 up, 2 down, 3 left, 4 right.
class PredatorPrey final : public Environment {
 public:
  explicit PredatorPrey(EnvConfig config);

  std::unique_ptr<Environment> clone() const override;
  int observation_dim() const override { return 11; }
  int action_count() const override { return 5; }
  int attribute_dim() const override { return 5; }
  void reset(std::uint64_t seed) override;
  StepOutcome step(std::span<const int> actions) override;
  std::vector<Vector> observe() const override;
  DistanceTable distances() const override;
  double reward_min() const override { return 0.0; }
  double reward_max() const override { return 1.0; }
  std::uint64_t digest() const override;

  GridPos prey() const { return prey_; }
  int captures() const { return captures_; }
  void place_prey(GridPos pos) { prey_ = pos; }
  void place(int agent, GridPos pos);
  static GridPos apply_move(GridPos p, int action, int width, int height);

 private:
  Vector attributes_of(int agent) const override;
  void move_prey();
  void respawn_prey();

  GridPos prey_;
  std::vector<GridPos> last_move_;
  int captures_ = 0;
  Rng rng_;
};

// Constructed diagnostic. Each step a fresh goal is drawn; scouts observe it
// as a one-hot, every other agent observes an independent random one-hot.
// Only the runner's action is scored. Agents sit at fixed cells, so the only
// thing distinguishing scouts and the runner is where they are.
class Relay final : public Environment {
 public:
  static constexpr int kRunner = 1;

  explicit Relay(EnvConfig config);

  std::unique_ptr<Environment> clone() const override;
  int observation_dim() const override { return config_.signals; }
  int action_count() const override { return config_.signals; }
  int attribute_dim() const override { return 2; }
  void reset(std::uint64_t seed) override;
  StepOutcome step(std::span<const int> actions) override;
  std::vector<Vector> observe() const override;
  DistanceTable distances() const override;
  double reward_min() const override { return 0.0; }
  double reward_max() const override { return 1.0; }
  std::uint64_t digest() const override;

  bool is_scout(int agent) const;
  int goal() const { return goal_; }
  int correct_steps() const { return correct_; }

 private:
  Vector attributes_of(int agent) const override;
  void draw_signals();

  int goal_ = 0;
  std::vector<int> signal_;
  int correct_ = 0;
  Rng rng_;
};

}  // namespace dmac::env
