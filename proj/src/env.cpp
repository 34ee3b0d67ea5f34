#include "dmac/env.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dmac/errors.hpp"

namespace dmac::env {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

class Hasher {
 public:
  template <typename T>
  void add(const T& value) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(&value);
    for (std::size_t k = 0; k < sizeof(T); ++k) h_ = (h_ ^ bytes[k]) * kFnvPrime;
  }
  void add_rng(const Rng& rng) {
    Rng copy = rng;
    // Two draws from a copy pin the stream without exposing engine internals.
    add(copy());
    add(copy());
  }
  void add_positions(const std::vector<GridPos>& ps) {
    for (const auto& p : ps) {
      add(p.x);
      add(p.y);
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = kFnvOffset;
};

double euclid(GridPos a, GridPos b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

int manhattan(GridPos a, GridPos b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

double norm_coord(int v, int extent) { return extent > 1 ? static_cast<double>(v) / (extent - 1) : 0.0; }

}  // namespace

std::string to_string(Kind kind) {
  switch (kind) {
    case Kind::traffic_junction: return "traffic_junction";
    case Kind::predator_prey: return "predator_prey";
    case Kind::relay: return "relay";
  }
  return "unknown";
}

Kind parse_kind(const std::string& name) {
  if (name == "traffic_junction" || name == "tj") return Kind::traffic_junction;
  if (name == "predator_prey" || name == "pp") return Kind::predator_prey;
  if (name == "relay") return Kind::relay;
  throw ConfigError("unknown environment kind '" + name + "'");
}

EnvConfig default_config(Kind kind) {
  EnvConfig c;
  c.kind = kind;
  switch (kind) {
    case Kind::traffic_junction:
      c.agents = 10;
      c.width = c.height = 14;
      c.horizon = 40;
      c.radius = 1.0;
      break;
    case Kind::predator_prey:
      c.agents = 8;
      c.width = c.height = 10;
      c.horizon = 60;
      c.radius = 2.0;
      c.capture_threshold = 3;
      break;
    case Kind::relay:
      c.agents = 4;
      c.width = c.height = 4;
      c.horizon = 5;
      c.radius = 10.0;
      c.signals = 4;
      c.scouts = 1;
      c.win_fraction = 0.8;
      break;
  }
  return c;
}

void validate(const EnvConfig& c) {
  auto fail = [](const std::string& what) { throw ConfigError("environment: " + what); };
  if (c.agents < 2) fail("at least two agents are required");
  if (c.width <= 0 || c.height <= 0) fail("grid dimensions must be positive");
  if (c.horizon < 1) fail("horizon must be at least 1");
  if (!(c.radius >= 0.0) || !std::isfinite(c.radius)) fail("radius must be a finite non-negative number");
  switch (c.kind) {
    case Kind::traffic_junction: {
      if (c.width < 6 || c.height < 6 || c.width % 2 != 0 || c.height % 2 != 0)
        fail("traffic junction needs even grid sides of at least 6");
      const int lane = std::min(c.width, c.height) / 2 - 1;
      const int ranks = (c.agents + 3) / 4;
      if (1 + 2 * (ranks - 1) + 1 > lane) fail("too many cars for the approach lanes");
      break;
    }
    case Kind::predator_prey:
      if (c.capture_threshold < 1) fail("capture threshold must be at least 1");
      if (c.prey_speed < 1 || c.prey_speed > 2) fail("prey speed must be 1 or 2");
      if (c.width < 3 || c.height < 3) fail("predator-prey grid must be at least 3x3");
      if (c.agents > c.width * c.height / 2) fail("too many predators for the grid");
      break;
    case Kind::relay:
      if (c.agents > 6) fail("relay supports at most 6 agents");
      if (c.signals < 2) fail("relay needs at least 2 signals");
      if (c.scouts < 1 || c.scouts > c.agents - 1) fail("relay scouts must be in [1, agents-1]");
      if (!(c.win_fraction > 0.0 && c.win_fraction <= 1.0)) fail("relay win fraction must be in (0, 1]");
      if (c.width < 4 || c.height < 4) fail("relay grid must be at least 4x4");
      break;
  }
}

bool is_win(const StepOutcome& outcome) {
  if (!outcome.terminal || !outcome.win.has_value())
    throw std::logic_error("is_win called on a non-terminal outcome");
  return *outcome.win;
}

std::vector<bool> Environment::active() const {
  std::vector<bool> a(agent_count());
  for (int i = 0; i < agent_count(); ++i) a[i] = is_active(i);
  return a;
}

bool Environment::visible(int i, int j) const {
  if (i == j) return false;
  if (!is_active(i) || !is_active(j)) return false;
  const auto& p = state_.positions;
  const double d = config_.kind == Kind::traffic_junction ? manhattan(p[i], p[j]) : euclid(p[i], p[j]);
  return d <= config_.radius + 1e-9;
}

void Environment::check_actions(std::span<const int> actions) const {
  if (state_.terminal) throw std::logic_error("step called on a terminal state");
  if (static_cast<int>(actions.size()) != agent_count())
    throw ShapeError("joint action has " + std::to_string(actions.size()) + " entries, expected " +
                     std::to_string(agent_count()));
  for (int a : actions)
    if (a < 0 || a >= action_count())
      throw std::out_of_range("action " + std::to_string(a) + " outside [0, " +
                              std::to_string(action_count()) + ")");
}

void Environment::refresh_attributes() {
  state_.attributes.resize(agent_count());
  for (int i = 0; i < agent_count(); ++i) state_.attributes[i] = attributes_of(i);
}

std::unique_ptr<Environment> make_environment(const EnvConfig& config) {
  validate(config);
  std::unique_ptr<Environment> env;
  switch (config.kind) {
    case Kind::traffic_junction: env = std::make_unique<TrafficJunction>(config); break;
    case Kind::predator_prey: env = std::make_unique<PredatorPrey>(config); break;
    case Kind::relay: env = std::make_unique<Relay>(config); break;
  }
  env->reset(config.seed);
  return env;
}

// ---------------------------------------------------------------- traffic junction

TrafficJunction::TrafficJunction(EnvConfig config) : Environment(std::move(config)) {
  validate(config_);
  reset(config_.seed);
}

std::unique_ptr<Environment> TrafficJunction::clone() const { return std::make_unique<TrafficJunction>(*this); }

GridPos TrafficJunction::heading(int agent) const {
  switch (route_[agent]) {
    case 0: return {1, 0};
    case 1: return {-1, 0};
    case 2: return {0, 1};
    default: return {0, -1};
  }
}

bool TrafficJunction::in_intersection(GridPos p) const {
  const int hr = config_.height / 2 - 1;
  const int vc = config_.width / 2 - 1;
  return (p.x == vc || p.x == vc + 1) && (p.y == hr || p.y == hr + 1);
}

void TrafficJunction::reset(std::uint64_t seed) {
  const int n = agent_count();
  const int hr = config_.height / 2 - 1;
  const int vc = config_.width / 2 - 1;
  rng_ = Rng(seed);
  state_ = EnvState{};
  state_.width = config_.width;
  state_.height = config_.height;
  state_.positions.resize(n);
  route_.assign(n, 0);
  prev_action_.assign(n, kBrake);
  exited_.assign(n, false);
  crashed_.assign(n, false);
  collisions_ = 0;
  for (int i = 0; i < n; ++i) {
    route_[i] = i % 4;
    const int rank = i / 4;
    const int d = 1 + 2 * rank + static_cast<int>(rng_.index(2));
    switch (route_[i]) {
      case 0: state_.positions[i] = {vc - d, hr}; break;
      case 1: state_.positions[i] = {vc + 1 + d, hr + 1}; break;
      case 2: state_.positions[i] = {vc, hr - d}; break;
      default: state_.positions[i] = {vc + 1, hr + 1 + d}; break;
    }
  }
  refresh_attributes();
}

void TrafficJunction::place(int agent, GridPos pos) {
  state_.positions.at(agent) = pos;
  refresh_attributes();
}

std::optional<GridPos> TrafficJunction::next_cell(int agent) const {
  const GridPos h = heading(agent);
  const GridPos p{state_.positions[agent].x + h.x, state_.positions[agent].y + h.y};
  if (p.x < 0 || p.y < 0 || p.x >= config_.width || p.y >= config_.height) return std::nullopt;
  return p;
}

StepOutcome TrafficJunction::step(std::span<const int> actions) {
  check_actions(actions);
  const int n = agent_count();
  const auto was_active = active();
  for (int i = 0; i < n; ++i) {
    if (!was_active[i]) continue;
    prev_action_[i] = actions[i];
    if (actions[i] != kGas) continue;
    if (auto next = next_cell(i)) {
      state_.positions[i] = *next;
    } else {
      exited_[i] = true;
    }
  }

  StepOutcome out;
  for (int i = 0; i < n; ++i) out.completed += was_active[i] && exited_[i] ? 1 : 0;
  out.agent_rewards.assign(n, 0.0);
  int pairs = 0;
  int at_intersection = 0;
  std::vector<bool> crash_now(n, false);
  for (int i = 0; i < n; ++i) {
    if (!was_active[i] || exited_[i]) continue;
    if (in_intersection(state_.positions[i])) {
      ++at_intersection;
      out.agent_rewards[i] += kTimeReward;
    }
    for (int j = i + 1; j < n; ++j) {
      if (!was_active[j] || exited_[j]) continue;
      if (state_.positions[i] == state_.positions[j]) {
        ++pairs;
        crash_now[i] = crash_now[j] = true;
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    if (crash_now[i]) {
      crashed_[i] = true;
      out.agent_rewards[i] += kCollisionReward;
    }
  }
  collisions_ += pairs;
  out.team_reward = kCollisionReward * pairs + kTimeReward * at_intersection;

  ++state_.t;
  state_.terminal = state_.t >= config_.horizon;
  out.terminal = state_.terminal;
  if (out.terminal) {
    const bool all_exited = std::all_of(exited_.begin(), exited_.end(), [](bool e) { return e; });
    out.win = collisions_ == 0 && all_exited;
  }
  refresh_attributes();
  return out;
}

std::vector<Vector> TrafficJunction::observe() const {
  const int n = agent_count();
  const auto act = active();
  std::vector<Vector> obs(n, Vector::Zero(observation_dim()));
  for (int i = 0; i < n; ++i) {
    Vector& o = obs[i];
    const GridPos p = state_.positions[i];
    o(0) = norm_coord(p.x, config_.width);
    o(1) = norm_coord(p.y, config_.height);
    o(2 + route_[i]) = 1.0;
    o(6) = prev_action_[i];
    o(7) = act[i] ? 1.0 : 0.0;
    if (!act[i]) continue;
    const GridPos h = heading(i);
    for (int j = 0; j < n; ++j) {
      if (!visible(i, j)) continue;
      const int rx = state_.positions[j].x - p.x;
      const int ry = state_.positions[j].y - p.y;
      const int along = rx * h.x + ry * h.y;
      const int across = rx * h.y - ry * h.x;
      if (rx == 0 && ry == 0) o(8) += 1.0;
      else if (along > 0) o(9) += 1.0;
      else if (along < 0) o(10) += 1.0;
      else if (across > 0) o(11) += 1.0;
      else o(12) += 1.0;
    }
  }
  return obs;
}

DistanceTable TrafficJunction::distances() const {
  const int n = agent_count();
  DistanceTable d = DistanceTable::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) d(i, j) = d(j, i) = manhattan(state_.positions[i], state_.positions[j]);
  return d;
}

double TrafficJunction::reward_min() const {
  // Cars start every step in distinct cells, so an intersection cell holds at
  // most 3 cars afterwards (one stayer, one arrival per lane) and any other
  // lane cell at most 2.
  const int n = agent_count();
  const int triples = std::min(4, n / 3);
  const int max_pairs = 3 * triples + (n - 3 * triples) / 2;
  return kCollisionReward * max_pairs + kTimeReward * std::min(n, 12);
}

Vector TrafficJunction::attributes_of(int agent) const {
  Vector a(attribute_dim());
  a << norm_coord(state_.positions[agent].x, config_.width), norm_coord(state_.positions[agent].y, config_.height),
      route_[agent] / 3.0, static_cast<double>(prev_action_[agent]),
      (!exited_[agent] && !crashed_[agent]) ? 1.0 : 0.0;
  return a;
}

std::uint64_t TrafficJunction::digest() const {
  Hasher h;
  h.add_positions(state_.positions);
  for (int i = 0; i < agent_count(); ++i) {
    h.add(route_[i]);
    h.add(prev_action_[i]);
    h.add(static_cast<int>(exited_[i]));
    h.add(static_cast<int>(crashed_[i]));
  }
  h.add(collisions_);
  h.add(state_.t);
  h.add(static_cast<int>(state_.terminal));
  h.add_rng(rng_);
  return h.value();
}

// ---------------------------------------------------------------- predator-prey

PredatorPrey::PredatorPrey(EnvConfig config) : Environment(std::move(config)) {
  validate(config_);
  reset(config_.seed);
}

std::unique_ptr<Environment> PredatorPrey::clone() const { return std::make_unique<PredatorPrey>(*this); }

GridPos PredatorPrey::apply_move(GridPos p, int action, int width, int height) {
  switch (action) {
    case 1: p.y -= 1; break;
    case 2: p.y += 1; break;
    case 3: p.x -= 1; break;
    case 4: p.x += 1; break;
    default: break;
  }
  p.x = std::clamp(p.x, 0, width - 1);
  p.y = std::clamp(p.y, 0, height - 1);
  return p;
}

void PredatorPrey::reset(std::uint64_t seed) {
  const int n = agent_count();
  const int w = config_.width;
  const int hgt = config_.height;
  rng_ = Rng(seed);
  state_ = EnvState{};
  state_.width = w;
  state_.height = hgt;
  state_.positions.resize(n);
  last_move_.assign(n, GridPos{0, 0});
  captures_ = 0;

  // Predators start spread around the border, each near its own anchor.
  std::vector<GridPos> perimeter;
  for (int x = 0; x < w; ++x) perimeter.push_back({x, 0});
  for (int y = 1; y < hgt; ++y) perimeter.push_back({w - 1, y});
  for (int x = w - 2; x >= 0; --x) perimeter.push_back({x, hgt - 1});
  for (int y = hgt - 2; y >= 1; --y) perimeter.push_back({0, y});
  const int per = static_cast<int>(perimeter.size());
  for (int i = 0; i < n; ++i) {
    const int anchor = static_cast<int>(static_cast<long>(i) * per / n);
    const int jitter = static_cast<int>(rng_.index(3)) - 1;
    state_.positions[i] = perimeter[((anchor + jitter) % per + per) % per];
  }
  respawn_prey();
  refresh_attributes();
}

void PredatorPrey::place(int agent, GridPos pos) {
  state_.positions.at(agent) = pos;
  refresh_attributes();
}

void PredatorPrey::respawn_prey() {
  std::vector<GridPos> far;
  std::vector<GridPos> all;
  for (int y = 0; y < config_.height; ++y)
    for (int x = 0; x < config_.width; ++x) {
      const GridPos c{x, y};
      all.push_back(c);
      bool ok = true;
      for (const auto& p : state_.positions)
        if (euclid(p, c) <= config_.radius + 1e-9) ok = false;
      if (ok) far.push_back(c);
    }
  const auto& pool = far.empty() ? all : far;
  prey_ = pool[rng_.index(pool.size())];
}

void PredatorPrey::move_prey() {
  double best = -1.0;
  std::vector<GridPos> choices;
  for (int a = 0; a < 5; ++a) {
    const GridPos c = apply_move(prey_, a, config_.width, config_.height);
    double nearest = 1e18;
    for (const auto& p : state_.positions) nearest = std::min(nearest, euclid(p, c));
    if (nearest > best + 1e-12) {
      best = nearest;
      choices.assign(1, c);
    } else if (std::abs(nearest - best) <= 1e-12 &&
               std::find(choices.begin(), choices.end(), c) == choices.end()) {
      choices.push_back(c);
    }
  }
  prey_ = choices[rng_.index(choices.size())];
}

StepOutcome PredatorPrey::step(std::span<const int> actions) {
  check_actions(actions);
  const int n = agent_count();
  for (int i = 0; i < n; ++i) {
    const GridPos before = state_.positions[i];
    state_.positions[i] = apply_move(before, actions[i], config_.width, config_.height);
    last_move_[i] = {state_.positions[i].x - before.x, state_.positions[i].y - before.y};
  }

  StepOutcome out;
  out.agent_rewards.assign(n, 0.0);
  int adjacent = 0;
  for (int i = 0; i < n; ++i)
    if (euclid(state_.positions[i], prey_) <= 1.0 + 1e-9) ++adjacent;
  if (adjacent >= 2) {
    out.team_reward = 1.0;
    for (int i = 0; i < n; ++i)
      if (euclid(state_.positions[i], prey_) <= 1.0 + 1e-9) out.agent_rewards[i] = 1.0;
    ++captures_;
    respawn_prey();
  } else {
    for (int k = 0; k < config_.prey_speed; ++k) move_prey();
  }

  ++state_.t;
  state_.terminal = state_.t >= config_.horizon;
  out.terminal = state_.terminal;
  if (out.terminal) out.win = captures_ >= config_.capture_threshold;
  refresh_attributes();
  return out;
}

std::vector<Vector> PredatorPrey::observe() const {
  const int n = agent_count();
  const double r = std::max(config_.radius, 1.0);
  std::vector<Vector> obs(n, Vector::Zero(observation_dim()));
  for (int i = 0; i < n; ++i) {
    Vector& o = obs[i];
    const GridPos p = state_.positions[i];
    o(0) = norm_coord(p.x, config_.width);
    o(1) = norm_coord(p.y, config_.height);
    if (euclid(p, prey_) <= config_.radius + 1e-9) {
      o(2) = 1.0;
      o(3) = norm_coord(prey_.x, config_.width);
      o(4) = norm_coord(prey_.y, config_.height);
      o(5) = (prey_.x - p.x) / r;
      o(6) = (prey_.y - p.y) / r;
    }
    int seen = 0;
    double best = 1e18;
    for (int j = 0; j < n; ++j) {
      if (!visible(i, j)) continue;
      ++seen;
      const double d = euclid(p, state_.positions[j]);
      if (d < best) {
        best = d;
        o(8) = (state_.positions[j].x - p.x) / r;
        o(9) = (state_.positions[j].y - p.y) / r;
      }
    }
    o(7) = static_cast<double>(seen) / (n - 1);
    o(10) = std::min(1.0, static_cast<double>(captures_) / config_.capture_threshold);
  }
  return obs;
}

DistanceTable PredatorPrey::distances() const {
  const int n = agent_count();
  DistanceTable d = DistanceTable::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) d(i, j) = d(j, i) = euclid(state_.positions[i], state_.positions[j]);
  return d;
}

Vector PredatorPrey::attributes_of(int agent) const {
  const GridPos p = state_.positions[agent];
  Vector a(attribute_dim());
  a << norm_coord(p.x, config_.width), norm_coord(p.y, config_.height), static_cast<double>(last_move_[agent].x),
      static_cast<double>(last_move_[agent].y), euclid(p, prey_) <= config_.radius + 1e-9 ? 1.0 : 0.0;
  return a;
}

std::uint64_t PredatorPrey::digest() const {
  Hasher h;
  h.add_positions(state_.positions);
  h.add_positions(last_move_);
  h.add(prey_.x);
  h.add(prey_.y);
  h.add(captures_);
  h.add(state_.t);
  h.add(static_cast<int>(state_.terminal));
  h.add_rng(rng_);
  return h.value();
}

// ---------------------------------------------------------------- relay

namespace {
constexpr GridPos kRelayLayout[] = {{0, 0}, {1, 0}, {3, 3}, {0, 3}, {3, 0}, {2, 2}};
}

Relay::Relay(EnvConfig config) : Environment(std::move(config)) {
  validate(config_);
  reset(config_.seed);
}

std::unique_ptr<Environment> Relay::clone() const { return std::make_unique<Relay>(*this); }

bool Relay::is_scout(int agent) const {
  if (agent == kRunner) return false;
  // Scouts are the first `scouts` agents in index order, skipping the runner.
  const int rank = agent < kRunner ? agent : agent - 1;
  return rank < config_.scouts;
}

void Relay::draw_signals() {
  goal_ = static_cast<int>(rng_.index(config_.signals));
  signal_.resize(agent_count());
  for (int i = 0; i < agent_count(); ++i)
    signal_[i] = is_scout(i) ? goal_ : static_cast<int>(rng_.index(config_.signals));
}

void Relay::reset(std::uint64_t seed) {
  rng_ = Rng(seed);
  state_ = EnvState{};
  state_.width = config_.width;
  state_.height = config_.height;
  state_.positions.assign(kRelayLayout, kRelayLayout + agent_count());
  correct_ = 0;
  draw_signals();
  refresh_attributes();
}

StepOutcome Relay::step(std::span<const int> actions) {
  check_actions(actions);
  StepOutcome out;
  out.agent_rewards.assign(agent_count(), 0.0);
  if (actions[kRunner] == goal_) {
    ++correct_;
    out.team_reward = 1.0;
    out.agent_rewards[kRunner] = 1.0;
  }
  ++state_.t;
  state_.terminal = state_.t >= config_.horizon;
  out.terminal = state_.terminal;
  if (out.terminal) {
    const int needed = static_cast<int>(std::ceil(config_.win_fraction * config_.horizon - 1e-9));
    out.win = correct_ >= needed;
  }
  draw_signals();
  return out;
}

std::vector<Vector> Relay::observe() const {
  std::vector<Vector> obs(agent_count(), Vector::Zero(observation_dim()));
  for (int i = 0; i < agent_count(); ++i) obs[i](signal_[i]) = 1.0;
  return obs;
}

DistanceTable Relay::distances() const {
  const int n = agent_count();
  DistanceTable d = DistanceTable::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) d(i, j) = d(j, i) = euclid(state_.positions[i], state_.positions[j]);
  return d;
}

Vector Relay::attributes_of(int agent) const {
  Vector a(attribute_dim());
  a << norm_coord(state_.positions[agent].x, config_.width), norm_coord(state_.positions[agent].y, config_.height);
  return a;
}

std::uint64_t Relay::digest() const {
  Hasher h;
  h.add(goal_);
  for (int s : signal_) h.add(s);
  h.add(correct_);
  h.add(state_.t);
  h.add(static_cast<int>(state_.terminal));
  h.add_rng(rng_);
  return h.value();
}

}  // namespace dmac::env
