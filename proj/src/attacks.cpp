#include "dmac/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "dmac/errors.hpp"
#include "text_io.hpp"

namespace dmac::attacks {

namespace {

std::vector<Vector> columns_of(const Matrix& m) {
  std::vector<Vector> out(m.cols());
  for (Eigen::Index c = 0; c < m.cols(); ++c) out[c] = m.col(c);
  return out;
}

Matrix stack_columns(std::span<const Vector> v) {
  Matrix m(v.front().size(), static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

// First k entries of a partial Fisher-Yates shuffle of 0..n-1.
std::vector<int> draw_distinct(int n, int k, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, n);
  for (int i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(n - i)]);
  idx.resize(k);
  return idx;
}

Matrix open_pairs(std::span<const Vector> features, std::span<const int> open) {
  const comm::ChannelSet set(static_cast<int>(features.size()));
  const Eigen::Index d = features.front().size();
  Matrix x(2 * d, static_cast<Eigen::Index>(open.size()));
  for (std::size_t k = 0; k < open.size(); ++k) {
    const auto [i, j] = set[open[k]];
    x.col(k).head(d) = features[i];
    x.col(k).tail(d) = features[j];
  }
  return x;
}

// Sum over the best `budget` open channels of their best code value.
double best_value(const Matrix& q, int budget) {
  if (q.cols() == 0) return 0.0;
  Vector best = q.colwise().maxCoeff().transpose();
  std::sort(best.data(), best.data() + best.size(), std::greater<double>());
  return best.head(std::min<Eigen::Index>(budget, best.size())).sum();
}

int slot_offset(int observation_dim, int receiver, int sender) {
  return observation_dim + (sender < receiver ? sender : sender - 1) * (comm::kMessageDim + 1);
}

class Trainer final : public team::Interferer {
 public:
  explicit Trainer(const AttackerPolicy& attacker) : attacker_(attacker) {}
  std::unique_ptr<team::Interferer> clone() const override { return std::make_unique<Trainer>(*this); }
  void begin_episode(std::uint64_t seed) override {
    rng_ = Rng(seed);
    records_.clear();
  }
  void perturb(comm::ObservationSet& set, const team::StepView& view) override {
    AttackRecord r;
    const auto h = graph::extract(view.env, view.observations, attacker_.features);
    r.features = stack_columns(h);
    r.observations = stack_columns(view.observations);
    r.open = open_channels(set);
    r.delivered.assign(comm::channel_count(set.size()), false);
    for (int c : r.open) r.delivered[c] = true;
    if (!r.open.empty()) {
      const Matrix q = attacker_.net.forward_batch(open_pairs(h, r.open));
      r.choices = choose_attack(attacker_, q, r.open, true, rng_);
      apply_attack(set, attacker_.codebook, r.choices);
      attacked_ += 1;
    }
    records_.push_back(std::move(r));
  }
  void after_step(const team::StepView& view, const comm::MaskMatrix&, const env::StepOutcome& outcome) override {
    records_.back().reward = view.env.reward_max() - outcome.team_reward;
  }
  std::vector<AttackRecord> take() { return std::move(records_); }
  int attacked_ = 0;

 private:
  const AttackerPolicy& attacker_;
  Rng rng_;
  std::vector<AttackRecord> records_;
};

}  // namespace

comm::MaskMatrix random_masker(int agents, Rng& rng, int budget) {
  if (agents < 2) throw std::invalid_argument("random masker needs at least two agents");
  const int channels = comm::channel_count(agents);
  if (budget < 1 || budget > channels) throw std::invalid_argument("masker budget out of range");
  comm::MaskMatrix m = comm::MaskMatrix::zeros(channels);
  if (budget == 1) {
    m.mask[rng.index(channels)] = true;
    return m;
  }
  for (int c : draw_distinct(channels, budget, rng)) m.mask[c] = true;
  return m;
}

comm::MaskMatrix reward_based_masker(std::span<const double> agent_rewards, const graph::AgentGraph& graph, Rng& rng) {
  const int n = graph.size();
  if (static_cast<int>(agent_rewards.size()) != n) throw ShapeError("reward count != agent count");
  int top = 0;
  for (int i = 1; i < n; ++i)
    if (agent_rewards[i] > agent_rewards[top]) top = i;
  const auto& nb = graph.neighbors[top];
  if (nb.empty()) return random_masker(n, rng);
  const int partner = nb[rng.index(nb.size())].to;
  comm::MaskMatrix m = comm::MaskMatrix::zeros(comm::channel_count(n));
  m.mask[comm::ChannelSet(n).index(top, partner)] = true;
  return m;
}

std::vector<int> open_channels(const comm::ObservationSet& set) {
  const comm::ChannelSet channels(set.size());
  std::vector<int> out;
  for (int c = 0; c < channels.size(); ++c) {
    const auto [i, j] = channels[c];
    if (!set.slot(i, j).is_null() && !set.slot(j, i).is_null()) out.push_back(c);
  }
  return out;
}

std::vector<int> heuristic_attack(comm::ObservationSet& set, int budget, Rng& rng) {
  if (budget < 1) throw std::invalid_argument("attack budget must be positive");
  const auto open = open_channels(set);
  if (open.empty()) return {};
  const comm::ChannelSet channels(set.size());
  std::vector<int> chosen;
  for (int k : draw_distinct(static_cast<int>(open.size()), budget, rng)) chosen.push_back(open[k]);
  for (int c : chosen) {
    const auto [i, j] = channels[c];
    for (auto [r, s] : {std::pair{i, j}, std::pair{j, i}}) {
      auto& content = set.slot(r, s).content;
      for (Eigen::Index k = 0; k < content.size(); ++k) content(k) = rng.uniform(-1.0, 1.0);
    }
  }
  return chosen;
}

std::optional<comm::MaskMatrix> RandomMasker::mask(const team::StepView& view) {
  return random_masker(view.env.agent_count(), rng_, budget_);
}

void RewardBasedMasker::begin_episode(std::uint64_t seed) {
  rng_ = Rng(seed);
  last_rewards_.clear();
}

std::optional<comm::MaskMatrix> RewardBasedMasker::mask(const team::StepView& view) {
  graph::GraphOptions g = graph_;
  if (g.radius < 0.0) g.radius = view.env.config().radius;
  const graph::AgentGraph ag = graph::build_graph(view.env, g);
  if (last_rewards_.empty()) last_rewards_.assign(view.env.agent_count(), 0.0);
  return reward_based_masker(last_rewards_, ag, rng_);
}

void RewardBasedMasker::after_step(const team::StepView&, const comm::MaskMatrix&, const env::StepOutcome& outcome) {
  last_rewards_ = outcome.agent_rewards;
}

void HeuristicAttacker::perturb(comm::ObservationSet& set, const team::StepView&) {
  heuristic_attack(set, budget_, rng_);
}

void validate(const AttackConfig& c) {
  auto fail = [](const std::string& what) { throw ConfigError("attack: " + what); };
  if (c.budget < 1) fail("budget must be positive");
  if (c.codebook < 1) fail("codebook size must be positive");
  for (int h : c.hidden)
    if (h <= 0) fail("hidden sizes must be positive");
  if (!(c.code_learning_rate > 0.0)) fail("code learning rate must be positive");
  if (!(c.gamma >= 0.0 && c.gamma < 1.0)) fail("gamma must be in [0, 1)");
  if (!(c.epsilon_start >= 0.0 && c.epsilon_start <= 1.0 && c.epsilon_end >= 0.0 && c.epsilon_end <= 1.0))
    fail("epsilon values must be in [0, 1]");
  if (!(c.epsilon_fraction > 0.0 && c.epsilon_fraction <= 1.0)) fail("epsilon fraction must be in (0, 1]");
  if (c.buffer_transitions < 1 || c.batch < 1 || c.train_every < 1 || c.target_sync < 1)
    fail("buffer, batch, train_every and target_sync must be positive");
  if (c.features.embedding_dim < 1 || c.features.iterations < 0) fail("bad feature options");
  if (!(c.optimizer.learning_rate > 0.0)) fail("learning rate must be positive");
}

AttackerPolicy make_attacker(const env::Environment& environment, const AttackConfig& config, std::uint64_t seed) {
  validate(config);
  const int channels = comm::channel_count(environment.agent_count());
  if (config.budget > channels) throw ConfigError("attack: budget exceeds the channel count");
  AttackerPolicy a;
  a.features = config.features;
  if (a.features.graph.radius < 0.0) a.features.graph.radius = environment.config().radius;
  a.budget = config.budget;
  a.epsilon = 1.0;
  const int fd = graph::feature_dim(environment.observation_dim(), a.features.embedding_dim, a.features.use_embedding);
  std::vector<int> sizes{2 * fd};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(config.codebook);
  a.net = nn::DenseNetwork(sizes, derive_seed(seed, 50));
  Rng rng(derive_seed(seed, 51));
  a.codebook.resize(comm::kMessageDim, config.codebook);
  for (Eigen::Index m = 0; m < a.codebook.cols(); ++m)
    for (Eigen::Index k = 0; k < a.codebook.rows(); ++k) a.codebook(k, m) = rng.uniform(-1.0, 1.0);
  return a;
}

std::vector<AttackChoice> choose_attack(const AttackerPolicy& attacker, const Matrix& q, std::span<const int> open,
                                        bool explore, Rng& rng) {
  if (q.cols() != static_cast<Eigen::Index>(open.size())) throw ShapeError("attacker Q columns != open channels");
  std::vector<AttackChoice> out;
  if (open.empty()) return out;
  const int k = std::min<int>(attacker.budget, static_cast<int>(open.size()));
  if (explore && attacker.epsilon > 0.0 && rng.bernoulli(attacker.epsilon)) {
    for (int idx : draw_distinct(static_cast<int>(open.size()), k, rng))
      out.push_back({open[idx], static_cast<int>(rng.index(q.rows()))});
    return out;
  }
  std::vector<int> order(open.size());
  std::vector<int> code(open.size());
  Vector value(static_cast<Eigen::Index>(open.size()));
  for (std::size_t c = 0; c < open.size(); ++c) {
    Eigen::Index m = 0;
    value(c) = q.col(c).maxCoeff(&m);
    code[c] = static_cast<int>(m);
  }
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return value(a) > value(b); });
  for (int i = 0; i < k; ++i) out.push_back({open[order[i]], code[order[i]]});
  return out;
}

void apply_attack(comm::ObservationSet& set, const Matrix& codebook, std::span<const AttackChoice> choices) {
  const comm::ChannelSet channels(set.size());
  for (const auto& ch : choices) {
    const auto [i, j] = channels[ch.channel];
    set.slot(i, j).content = codebook.col(ch.code);
    set.slot(j, i).content = codebook.col(ch.code);
  }
}

double code_margin(const team::TeamPolicy& team, const AttackRecord& record, const Matrix& codebook,
                   const AttackChoice& choice, Vector* gradient) {
  const auto obs = columns_of(record.observations);
  const Matrix clean = comm::policy_inputs(comm::exchange(obs, comm::CommDecision{record.delivered}, team.encoder));
  const auto [i, j] = comm::ChannelSet(team.agents)[choice.channel];
  const int receivers[2] = {i, j};
  const int senders[2] = {j, i};
  Matrix x(clean.rows(), 2), xc(clean.rows(), 2);
  for (int k = 0; k < 2; ++k) {
    xc.col(k) = clean.col(receivers[k]);
    x.col(k) = xc.col(k);
    x.col(k).segment(slot_offset(team.observation_dim, receivers[k], senders[k]), comm::kMessageDim) =
        codebook.col(choice.code);
  }
  const Matrix q_clean = team.q.forward_batch(xc);
  const nn::ForwardTrace trace = team.q.trace(x);
  const Matrix& q = trace.output();
  Matrix dz = Matrix::Zero(q.rows(), 2);
  double margin = 0.0;
  for (int k = 0; k < 2; ++k) {
    Eigen::Index star = 0;
    q_clean.col(k).maxCoeff(&star);
    Eigen::Index other = star == 0 ? 1 : 0;
    for (Eigen::Index a = 0; a < q.rows(); ++a)
      if (a != star && q(a, k) > q(other, k)) other = a;
    margin += 0.5 * (q(star, k) - q(other, k));
    dz(star, k) = 0.5;
    dz(other, k) = -0.5;
  }
  if (gradient) {
    const nn::Gradients g = team.q.backward(trace, dz);
    *gradient = Vector::Zero(comm::kMessageDim);
    for (int k = 0; k < 2; ++k)
      *gradient += g.input.col(k).segment(slot_offset(team.observation_dim, receivers[k], senders[k]),
                                          comm::kMessageDim);
  }
  return margin;
}

std::vector<AttackCurvePoint> train_learned_attack(const env::Environment& environment, const team::TeamPolicy& team,
                                                   const AttackConfig& config, int episodes, std::uint64_t seed,
                                                   AttackerPolicy& attacker) {
  validate(config);
  if (episodes < 0) throw std::invalid_argument("episode count must be non-negative");
  if (attacker.codebook.cols() != config.codebook || attacker.budget != config.budget)
    throw std::invalid_argument("attacker does not match the attack config");
  auto env_copy = environment.clone();
  nn::Optimizer optimizer(config.optimizer);
  nn::OptimizerConfig code_config = config.optimizer;
  code_config.learning_rate = config.code_learning_rate;
  code_config.max_grad_norm = 0.0;
  nn::VectorOptimizer code_optimizer(code_config);
  nn::DenseNetwork target = attacker.net;
  AttackBuffer buffer(static_cast<std::size_t>(config.buffer_transitions));
  Rng sample_rng(derive_seed(seed, 60));
  Trainer trainer(attacker);
  const int m_count = config.codebook;

  std::vector<AttackCurvePoint> curve;
  long long pending = 0;
  long long updates = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    attacker.epsilon = team::epsilon_at(ep, episodes, config.epsilon_start, config.epsilon_end, config.epsilon_fraction);
    trainer.attacked_ = 0;
    const team::EpisodeResult result =
        team::run_episode(*env_copy, team, derive_seed(seed, 61, ep), team::RolloutOptions{}, &trainer);
    buffer.add_episode(trainer.take());
    AttackCurvePoint point;
    point.episode = ep;
    point.team_return = result.team_return;
    point.attacked_fraction = static_cast<double>(trainer.attacked_) / std::max(1, result.steps);

    pending += result.steps;
    double loss_sum = 0.0;
    int loss_count = 0;
    while (pending >= config.train_every && buffer.size() >= static_cast<std::size_t>(config.batch)) {
      pending -= config.train_every;
      std::vector<AttackBuffer::Ref> refs;
      for (const auto& r : buffer.sample(config.batch, sample_rng))
        if (!r.step->choices.empty()) refs.push_back(r);
      if (refs.empty()) continue;

      // TD step on the summed value of the chosen (channel, code) pairs.
      Eigen::Index cols = 0;
      for (const auto& r : refs) cols += static_cast<Eigen::Index>(r.step->choices.size());
      const Eigen::Index d = attacker.net.input_dim();
      Matrix x(d, cols);
      std::vector<double> y(refs.size());
      Eigen::Index at = 0;
      for (std::size_t b = 0; b < refs.size(); ++b) {
        const auto h = columns_of(refs[b].step->features);
        std::vector<int> chosen;
        for (const auto& ch : refs[b].step->choices) chosen.push_back(ch.channel);
        x.middleCols(at, static_cast<Eigen::Index>(chosen.size())) = open_pairs(h, chosen);
        at += static_cast<Eigen::Index>(chosen.size());
        double boot = 0.0;
        if (const AttackRecord* nx = refs[b].next; nx && !nx->open.empty())
          boot = best_value(target.forward_batch(open_pairs(columns_of(nx->features), nx->open)), attacker.budget);
        y[b] = refs[b].step->reward + config.gamma * boot;
      }
      const nn::ForwardTrace trace = attacker.net.trace(x);
      Matrix dz = Matrix::Zero(m_count, cols);
      double loss = 0.0;
      at = 0;
      const double scale = 1.0 / static_cast<double>(refs.size());
      for (std::size_t b = 0; b < refs.size(); ++b) {
        const auto& choices = refs[b].step->choices;
        double q_sum = 0.0;
        for (std::size_t k = 0; k < choices.size(); ++k) q_sum += trace.output()(choices[k].code, at + k);
        const double diff = q_sum - y[b];
        loss += scale * diff * diff;
        for (std::size_t k = 0; k < choices.size(); ++k) dz(choices[k].code, at + k) = 2.0 * scale * diff;
        at += static_cast<Eigen::Index>(choices.size());
      }
      nn::Gradients g = attacker.net.backward(trace, dz);
      if (!std::isfinite(loss) || !g.all_finite()) throw NumericError("attacker TD loss is not finite");
      optimizer.apply(attacker.net, std::move(g));

      // Codebook step: push the victim away from its clean greedy action.
      Vector code_grad = Vector::Zero(comm::kMessageDim * m_count);
      std::vector<int> uses(m_count, 0);
      for (const auto& r : refs)
        for (const auto& ch : r.step->choices) {
          Vector gc;
          code_margin(team, *r.step, attacker.codebook, ch, &gc);
          code_grad.segment(ch.code * comm::kMessageDim, comm::kMessageDim) += gc;
          ++uses[ch.code];
        }
      for (int m = 0; m < m_count; ++m)
        if (uses[m] > 0) code_grad.segment(m * comm::kMessageDim, comm::kMessageDim) /= uses[m];
      Vector flat = Eigen::Map<const Vector>(attacker.codebook.data(), attacker.codebook.size());
      code_optimizer.apply(flat, code_grad);
      attacker.codebook = Eigen::Map<const Matrix>(flat.data(), comm::kMessageDim, m_count).cwiseMax(-1.0).cwiseMin(1.0);

      loss_sum += loss;
      ++loss_count;
      if (++updates % config.target_sync == 0) target = attacker.net;
    }
    if (buffer.size() < static_cast<std::size_t>(config.batch)) pending = 0;
    point.loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
    curve.push_back(point);
  }
  if (episodes > 0) attacker.epsilon = 0.0;
  return curve;
}

LearnedAttacker::LearnedAttacker(std::shared_ptr<const AttackerPolicy> attacker) : attacker_(std::move(attacker)) {
  if (!attacker_) throw std::invalid_argument("learned attacker needs a policy");
}

void LearnedAttacker::perturb(comm::ObservationSet& set, const team::StepView& view) {
  const auto open = open_channels(set);
  if (open.empty()) return;
  const auto h = graph::extract(view.env, view.observations, attacker_->features);
  const Matrix q = attacker_->net.forward_batch(open_pairs(h, open));
  const auto choices = choose_attack(*attacker_, q, open, true, rng_);
  apply_attack(set, attacker_->codebook, choices);
}

void save_attacker(const AttackerPolicy& a, std::ostream& out) {
  out << "dmac-attacker 1\n";
  out << "budget " << a.budget << "\nepsilon ";
  detail::write_double(out, a.epsilon);
  out << "\nfeatures ";
  detail::write_double(out, a.features.graph.radius);
  out << ' ';
  detail::write_double(out, a.features.graph.min_weight);
  out << ' ' << (a.features.graph.fully_connected ? 1 : 0) << ' ' << a.features.embedding_dim << ' '
      << a.features.iterations << ' ' << (a.features.use_embedding ? 1 : 0) << "\ncodebook ";
  detail::write_matrix(out, a.codebook);
  nn::save_network(out, a.net);
  out << "end-attacker\n";
}

AttackerPolicy load_attacker(std::istream& in) {
  detail::expect(in, "dmac-attacker");
  detail::expect(in, "1");
  AttackerPolicy a;
  detail::expect(in, "budget");
  if (!(in >> a.budget) || a.budget < 1) throw IoError("bad attacker budget");
  detail::expect(in, "epsilon");
  a.epsilon = detail::read_double(in);
  detail::expect(in, "features");
  a.features.graph.radius = detail::read_double(in);
  a.features.graph.min_weight = detail::read_double(in);
  int fc = 0, ue = 0;
  if (!(in >> fc >> a.features.embedding_dim >> a.features.iterations >> ue)) throw IoError("bad feature options");
  a.features.graph.fully_connected = fc != 0;
  a.features.use_embedding = ue != 0;
  detail::expect(in, "codebook");
  a.codebook = detail::read_matrix(in);
  a.net = nn::load_network(in);
  detail::expect(in, "end-attacker");
  if (a.codebook.rows() != comm::kMessageDim || a.codebook.cols() != a.net.output_dim())
    throw IoError("attacker codebook does not match its network");
  return a;
}

void write_curve(std::span<const AttackCurvePoint> curve, std::ostream& out) {
  out << "episode,team_return,loss,attacked_fraction\n";
  const auto precision = out.precision();
  out << std::setprecision(17);
  for (const auto& p : curve)
    out << p.episode << ',' << p.team_return << ',' << p.loss << ',' << p.attacked_fraction << '\n';
  out.precision(precision);
}

}  // namespace dmac::attacks
