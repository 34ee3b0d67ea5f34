#include "dmac/team.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "dmac/digest.hpp"
#include "dmac/errors.hpp"
#include "text_io.hpp"

namespace dmac::team {

namespace {

struct LoopOptions {
  int episodes = 0;
  bool train_q = true;
  bool train_gate = true;
  int gate_start = 0;  // first episode that updates the gates
  Interferer* interferer = nullptr;
};

std::vector<CurvePoint> train_loop(const env::Environment& prototype, TeamPolicy& policy, const TeamConfig& config,
                                   const LoopOptions& options, std::uint64_t seed) {
  auto environment = prototype.clone();
  nn::Optimizer q_optimizer(config.q_optimizer);
  nn::Optimizer gate_optimizer(config.gate_optimizer);
  nn::DenseNetwork target = policy.q;
  ReplayBuffer buffer(static_cast<std::size_t>(config.buffer_transitions));
  std::vector<comm::GateEpisode> gate_batch;
  Rng sample_rng(derive_seed(seed, 20));
  const bool gates = options.train_gate && policy.mode == CommMode::learned;
  const int channels = comm::channel_count(policy.agents);

  std::vector<CurvePoint> curve;
  curve.reserve(options.episodes);
  long long pending_steps = 0;
  long long updates = 0;
  for (int ep = 0; ep < options.episodes; ++ep) {
    RolloutOptions rollout;
    rollout.gate = gates ? comm::GateMode::sample : comm::GateMode::greedy;
    rollout.epsilon = options.train_q ? epsilon_at(ep, options.episodes, config.epsilon_start, config.epsilon_end,
                                                   config.epsilon_fraction)
                                      : 0.0;
    rollout.record = true;
    EpisodeResult result = run_episode(*environment, policy, derive_seed(seed, 21, ep), rollout, options.interferer);
    if (config.completion_bonus != 0.0 || config.step_penalty != 0.0)
      for (auto& r : result.records)
        r.reward += config.completion_bonus * r.completed -
                    config.step_penalty * static_cast<double>(std::count(r.active.begin(), r.active.end(), true));

    CurvePoint point;
    point.episode = ep;
    point.team_return = result.team_return;
    point.win = result.win;
    long long opened = 0;
    for (const auto& r : result.records)
      for (bool o : r.sampled) opened += o ? 1 : 0;
    point.open_fraction = result.steps > 0 ? static_cast<double>(opened) / (result.steps * channels) : 0.0;

    if (gates && ep >= options.gate_start) {
      comm::GateEpisode episode;
      episode.steps.reserve(result.records.size());
      for (auto& r : result.records)
        episode.steps.push_back({std::move(r.gate_pairs), r.sampled, r.delivered, r.reward});
      gate_batch.push_back(std::move(episode));
      if (static_cast<int>(gate_batch.size()) == config.cp_batch) {
        comm::train_cp_step(policy.gate, gate_optimizer, gate_batch, config.comm_cost, config.gamma);
        gate_batch.clear();
      }
    }

    if (options.train_q) {
      for (auto& r : result.records) r.gate_pairs.resize(0, 0);
      pending_steps += result.steps;
      buffer.add_episode(std::move(result.records));
      double loss_sum = 0.0;
      int loss_count = 0;
      while (pending_steps >= config.train_every && buffer.size() >= static_cast<std::size_t>(config.batch)) {
        pending_steps -= config.train_every;
        const auto refs = buffer.sample(config.batch, sample_rng);
        double loss = 0.0;
        nn::Gradients g = q_gradients(policy, target, refs, config.gamma, &loss);
        if (!std::isfinite(loss) || !g.all_finite())
          throw NumericError("team Q loss diverged at episode " + std::to_string(ep));
        q_optimizer.apply(policy.q, std::move(g));
        loss_sum += loss;
        ++loss_count;
        if (++updates % config.target_sync == 0) target = policy.q;
      }
      if (buffer.size() < static_cast<std::size_t>(config.batch)) pending_steps = 0;
      point.q_loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
    }
    curve.push_back(point);
  }
  return curve;
}

}  // namespace

std::string to_string(CommMode mode) {
  switch (mode) {
    case CommMode::learned:
      return "learned";
    case CommMode::full:
      return "full";
    case CommMode::none:
      return "none";
  }
  return "unknown";
}

CommMode parse_comm_mode(const std::string& name) {
  if (name == "learned") return CommMode::learned;
  if (name == "full") return CommMode::full;
  if (name == "none") return CommMode::none;
  throw ConfigError("unknown communication mode '" + name + "'");
}

void validate(const TeamConfig& c) {
  auto fail = [](const std::string& what) { throw ConfigError("team: " + what); };
  for (int h : c.hidden)
    if (h <= 0) fail("hidden sizes must be positive");
  for (int h : c.gate_hidden)
    if (h <= 0) fail("gate hidden sizes must be positive");
  if (!(c.gamma >= 0.0 && c.gamma < 1.0)) fail("gamma must be in [0, 1)");
  if (!(c.epsilon_start >= 0.0 && c.epsilon_start <= 1.0 && c.epsilon_end >= 0.0 && c.epsilon_end <= 1.0))
    fail("epsilon values must be in [0, 1]");
  if (!(c.epsilon_fraction > 0.0 && c.epsilon_fraction <= 1.0)) fail("epsilon fraction must be in (0, 1]");
  if (c.buffer_transitions < 1 || c.batch < 1 || c.train_every < 1 || c.target_sync < 1 || c.cp_batch < 1)
    fail("buffer, batch, train_every, target_sync and cp_batch must be positive");
  if (!(c.comm_cost >= 0.0)) fail("comm_cost must be non-negative");
  if (!std::isfinite(c.completion_bonus)) fail("completion_bonus must be finite");
  if (!std::isfinite(c.step_penalty)) fail("step_penalty must be finite");
  if (c.gate_open_init && !(*c.gate_open_init > comm::kGateFloor && *c.gate_open_init < 1.0 - comm::kGateFloor))
    fail("gate_open_init must lie strictly inside the gate probability range");
  if (!(c.gate_delay >= 0.0 && c.gate_delay < 1.0)) fail("gate_delay must be in [0, 1)");
  if (!(c.q_optimizer.learning_rate > 0.0) || !(c.gate_optimizer.learning_rate > 0.0))
    fail("learning rates must be positive");
}

double epsilon_at(int episode, int episodes, double start, double end, double fraction) {
  if (episodes <= 0) return end;
  const double span = std::max(1.0, fraction * episodes);
  const double progress = std::min(1.0, episode / span);
  return start + (end - start) * progress;
}

TeamPolicy make_team_policy(const env::Environment& environment, const TeamConfig& config, std::uint64_t seed) {
  validate(config);
  TeamPolicy p;
  p.agents = environment.agent_count();
  p.observation_dim = environment.observation_dim();
  p.action_count = environment.action_count();
  p.mode = config.mode;
  p.encoder = comm::MessageEncoder(p.observation_dim);

  std::vector<int> q_sizes{comm::policy_input_dim(p.observation_dim, p.agents)};
  q_sizes.insert(q_sizes.end(), config.hidden.begin(), config.hidden.end());
  q_sizes.push_back(p.action_count);
  p.q = nn::DenseNetwork(q_sizes, derive_seed(seed, 11));

  std::vector<int> g_sizes{2 * comm::gate_feature_dim(p.observation_dim, p.agents)};
  g_sizes.insert(g_sizes.end(), config.gate_hidden.begin(), config.gate_hidden.end());
  g_sizes.push_back(1);
  p.gate = nn::DenseNetwork(g_sizes, derive_seed(seed, 12));
  if (config.gate_open_init) {
    const double s = (*config.gate_open_init - comm::kGateFloor) / (1.0 - 2.0 * comm::kGateFloor);
    p.gate.layers().back().bias.setConstant(std::log(s / (1.0 - s)));
  }
  return p;
}

comm::CommDecision gate_decision(const TeamPolicy& policy, std::span<const Vector> observations, comm::GateMode mode,
                                 Rng& rng, Matrix* pairs) {
  const int channels = comm::channel_count(static_cast<int>(observations.size()));
  switch (policy.mode) {
    case CommMode::full:
      return {std::vector<bool>(channels, true)};
    case CommMode::none:
      return {std::vector<bool>(channels, false)};
    case CommMode::learned:
      break;
  }
  const auto features = comm::gate_features(observations);
  const comm::ChannelSet set(static_cast<int>(observations.size()));
  Matrix x = comm::pair_inputs(features, set);
  comm::CommDecision d = comm::decide(comm::gate_probabilities(policy.gate, x), mode, rng);
  if (pairs) *pairs = std::move(x);
  return d;
}

std::vector<int> act(const TeamPolicy& policy, const Matrix& inputs, double epsilon, Rng& rng) {
  const Matrix q = policy.q.forward_batch(inputs);
  std::vector<int> actions(q.cols());
  for (Eigen::Index c = 0; c < q.cols(); ++c) {
    if (epsilon > 0.0 && rng.bernoulli(epsilon)) {
      actions[c] = static_cast<int>(rng.index(q.rows()));
      continue;
    }
    Eigen::Index best = 0;
    for (Eigen::Index a = 1; a < q.rows(); ++a)
      if (q(a, c) > q(best, c)) best = a;
    actions[c] = static_cast<int>(best);
  }
  return actions;
}

EpisodeResult run_episode(env::Environment& environment, const TeamPolicy& policy, std::uint64_t seed,
                          const RolloutOptions& options, Interferer* interferer) {
  environment.reset(derive_seed(seed, 0));
  Rng rng(derive_seed(seed, 1));
  if (interferer) interferer->begin_episode(derive_seed(seed, 2));
  const int n = environment.agent_count();
  if (n != policy.agents || environment.observation_dim() != policy.observation_dim)
    throw ShapeError("policy was built for a different environment shape");
  const int channels = comm::channel_count(n);
  const comm::ChannelSet channel_set(n);

  EpisodeResult result;
  result.delivered.assign(channels, 0);
  int t = 0;
  while (!environment.terminal()) {
    const std::vector<Vector> observations = environment.observe();
    Matrix pairs;
    const comm::CommDecision sampled = gate_decision(policy, observations, options.gate, rng,
                                                     options.record ? &pairs : nullptr);
    std::vector<bool> active = environment.active();
    // Agents that left the episode neither send nor receive.
    comm::CommDecision decision = sampled;
    for (int c = 0; c < channels; ++c) {
      const auto [i, j] = channel_set[c];
      if (!active[i] || !active[j]) decision.open[c] = false;
    }
    const StepView view{environment, observations, decision, t};
    comm::MaskMatrix mask = comm::MaskMatrix::zeros(channels);
    if (interferer) {
      if (auto m = interferer->mask(view)) {
        if (static_cast<int>(m->mask.size()) != channels) throw ShapeError("interferer mask has the wrong size");
        mask = std::move(*m);
      }
    }
    comm::ObservationSet set = comm::apply_mask(comm::exchange(observations, decision, policy.encoder), mask);
    std::vector<bool> delivered(channels);
    int masks = 0;
    for (int c = 0; c < channels; ++c) {
      delivered[c] = decision.open[c] && !mask.mask[c];
      result.delivered[c] += delivered[c] ? 1 : 0;
      masks += mask.mask[c] ? 1 : 0;
    }
    if (interferer) interferer->perturb(set, view);
    const Matrix inputs = comm::policy_inputs(set);
    std::vector<int> actions = act(policy, inputs, options.epsilon, rng);
    const env::StepOutcome outcome = environment.step(actions);
    if (interferer) interferer->after_step(view, mask, outcome);

    result.team_return += outcome.team_reward;
    result.masks += masks;
    ++result.steps;
    if (options.record) {
      StepRecord r;
      r.observations.resize(policy.observation_dim, n);
      for (int i = 0; i < n; ++i) r.observations.col(i) = observations[i];
      r.sampled = sampled.open;
      r.delivered = std::move(delivered);
      r.actions = std::move(actions);
      r.active = std::move(active);
      r.reward = outcome.team_reward;
      r.completed = outcome.completed;
      r.masks = masks;
      r.gate_pairs = std::move(pairs);
      result.records.push_back(std::move(r));
    }
    if (outcome.terminal) result.win = env::is_win(outcome);
    ++t;
  }
  return result;
}

// Same result as policy_inputs(exchange(...)) without building the slot table.
Matrix record_inputs(const TeamPolicy& policy, const StepRecord& record) {
  const int n = policy.agents;
  const int od = policy.observation_dim;
  const int slot = comm::kMessageDim + 1;
  const comm::ChannelSet channels(n);
  Matrix messages(comm::kMessageDim, n);
  for (int j = 0; j < n; ++j) messages.col(j) = policy.encoder.encode(record.observations.col(j));
  Matrix x = Matrix::Zero(comm::policy_input_dim(od, n), n);
  x.topRows(od) = record.observations;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const int at = od + (j < i ? j : j - 1) * slot;
      if (record.delivered[channels.index(i, j)])
        x.col(i).segment(at, comm::kMessageDim) = messages.col(j);
      else
        x(at + comm::kMessageDim, i) = 1.0;
    }
  return x;
}

nn::Gradients q_gradients(const TeamPolicy& policy, const nn::DenseNetwork& target,
                          std::span<const ReplayBuffer::Ref> batch, double gamma, double* loss) {
  const Eigen::Index b_count = static_cast<Eigen::Index>(batch.size());
  if (b_count == 0) throw std::invalid_argument("empty Q batch");
  const int n = policy.agents;
  const Eigen::Index d = policy.q.input_dim();
  Matrix x(d, b_count * n);
  Matrix xn = Matrix::Zero(d, b_count * n);
  for (Eigen::Index b = 0; b < b_count; ++b) {
    x.middleCols(b * n, n) = record_inputs(policy, *batch[b].step);
    if (batch[b].next) xn.middleCols(b * n, n) = record_inputs(policy, *batch[b].next);
  }
  const nn::ForwardTrace trace = policy.q.trace(x);
  const Matrix qn = target.forward_batch(xn);
  const Matrix& q = trace.output();

  Matrix dz = Matrix::Zero(q.rows(), q.cols());
  double total = 0.0;
  for (Eigen::Index b = 0; b < b_count; ++b) {
    const StepRecord& s = *batch[b].step;
    double q_tot = 0.0;
    for (int i = 0; i < n; ++i)
      if (s.active[i]) q_tot += q(s.actions[i], b * n + i);
    double bootstrap = 0.0;
    if (const StepRecord* nx = batch[b].next) {
      for (int i = 0; i < n; ++i)
        if (nx->active[i]) bootstrap += qn.col(b * n + i).maxCoeff();
    }
    const double diff = q_tot - (s.reward + gamma * bootstrap);
    total += diff * diff;
    for (int i = 0; i < n; ++i)
      if (s.active[i]) dz(s.actions[i], b * n + i) = 2.0 * diff / static_cast<double>(b_count);
  }
  if (loss) *loss = total / static_cast<double>(b_count);
  return policy.q.backward(trace, dz);
}

TrainResult train_team(const env::Environment& environment, const TeamConfig& config, int episodes,
                       std::uint64_t seed) {
  if (episodes < 0) throw std::invalid_argument("episode count must be non-negative");
  TrainResult r;
  r.policy = make_team_policy(environment, config, derive_seed(seed, 10));
  LoopOptions o;
  o.episodes = episodes;
  o.train_q = true;
  o.train_gate = true;
  o.gate_start = static_cast<int>(config.gate_delay * episodes);
  r.curve = train_loop(environment, r.policy, config, o, derive_seed(seed, 13));
  r.episodes = episodes;
  return r;
}

std::vector<CurvePoint> train_cp(const env::Environment& environment, TeamPolicy& policy, const TeamConfig& config,
                                 const CpTrainOptions& options, std::uint64_t seed) {
  if (policy.mode != CommMode::learned) throw std::invalid_argument("gate training needs the learned mode");
  if (options.episodes < 0) throw std::invalid_argument("episode count must be non-negative");
  LoopOptions o;
  o.episodes = options.episodes;
  o.train_q = options.train_policy;
  o.train_gate = true;
  o.interferer = options.interferer;
  return train_loop(environment, policy, config, o, seed);
}

std::string policy_digest(const TeamPolicy& policy) { return network_digest(policy.q); }
std::string gate_digest(const TeamPolicy& policy) { return network_digest(policy.gate); }

void save_team(const TeamPolicy& policy, std::ostream& out) {
  out << "dmac-team 1\n";
  out << "mode " << to_string(policy.mode) << '\n';
  out << "shape " << policy.agents << ' ' << policy.observation_dim << ' ' << policy.action_count << '\n';
  nn::save_network(out, policy.q);
  nn::save_network(out, policy.gate);
  out << "encoder ";
  detail::write_matrix(out, policy.encoder.weights());
  out << "end-team\n";
}

TeamPolicy load_team(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "dmac-team" || version != 1) throw IoError("not a team checkpoint");
  TeamPolicy p;
  std::string mode;
  if (!(in >> tag >> mode) || tag != "mode") throw IoError("team checkpoint missing mode");
  try {
    p.mode = parse_comm_mode(mode);
  } catch (const ConfigError& e) {
    throw IoError(e.what());
  }
  if (!(in >> tag >> p.agents >> p.observation_dim >> p.action_count) || tag != "shape")
    throw IoError("team checkpoint missing shape");
  p.q = nn::load_network(in);
  p.gate = nn::load_network(in);
  if (!(in >> tag) || tag != "encoder") throw IoError("team checkpoint missing encoder");
  p.encoder = comm::MessageEncoder(detail::read_matrix(in));
  if (!(in >> tag) || tag != "end-team") throw IoError("team checkpoint not terminated");
  if (p.q.input_dim() != comm::policy_input_dim(p.observation_dim, p.agents) || p.q.output_dim() != p.action_count)
    throw IoError("team checkpoint shapes disagree");
  return p;
}

void write_curve(std::span<const CurvePoint> curve, std::ostream& out) {
  out << "episode,team_return,win,q_loss,open_fraction\n";
  const auto flags = out.flags();
  const auto precision = out.precision();
  out << std::setprecision(17);
  for (const auto& p : curve)
    out << p.episode << ',' << p.team_return << ',' << (p.win ? 1 : 0) << ',' << p.q_loss << ',' << p.open_fraction
        << '\n';
  out.flags(flags);
  out.precision(precision);
}

}  // namespace dmac::team
