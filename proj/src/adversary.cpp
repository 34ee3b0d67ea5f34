#include "dmac/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "dmac/errors.hpp"
#include "text_io.hpp"

namespace dmac::adversary {

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

// Indices of the k largest scores, ties to the lower index.
std::vector<int> top_k(const Vector& score, int k) {
  std::vector<int> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return score(a) > score(b); });
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(k)));
  return idx;
}

// Collects transitions while training; masks come from the current networks.
class Collector final : public team::Interferer {
 public:
  Collector(const Adversary& adversary, const graph::FeatureOptions& features, const AdversaryConfig& config)
      : adversary_(adversary), features_(features), config_(config) {}

  std::unique_ptr<team::Interferer> clone() const override { return std::make_unique<Collector>(*this); }
  void begin_episode(std::uint64_t seed) override {
    rng_ = Rng(seed);
    records_.clear();
  }
  std::optional<comm::MaskMatrix> mask(const team::StepView& view) override {
    const auto h = graph::extract(view.env, view.observations, features_);
    Selection s = select_masks(adversary_.policy, h, SelectMode::explore, adversary_.budget, rng_);
    records_.push_back({stack_columns(h), s.mask.mask, 0.0});
    return s.mask;
  }
  void after_step(const team::StepView& view, const comm::MaskMatrix& applied,
                  const env::StepOutcome& outcome) override {
    double shifted = outcome.team_reward - view.env.reward_min();
    // Sums of per-agent terms can land a rounding error below the bound.
    if (shifted < 0.0 && shifted > -1e-9) shifted = 0.0;
    const int m = count_masks(applied);
    records_.back().reward = adversary_reward(shifted, m, config_);
    reward_sum_ += records_.back().reward;
    mask_sum_ += m;
  }
  std::vector<Transition> take() { return std::move(records_); }
  double reward_sum_ = 0.0;
  double mask_sum_ = 0.0;

 private:
  const Adversary& adversary_;
  graph::FeatureOptions features_;
  AdversaryConfig config_;
  Rng rng_;
  std::vector<Transition> records_;
};

}  // namespace

std::string to_string(MixerKind kind) { return kind == MixerKind::linear ? "linear" : "vdn"; }

MixerKind parse_mixer(const std::string& name) {
  if (name == "linear") return MixerKind::linear;
  if (name == "vdn") return MixerKind::vdn;
  throw ConfigError("unknown mixer '" + name + "'");
}

void validate(const AdversaryConfig& c) {
  auto fail = [](const std::string& what) { throw ConfigError("adversary: " + what); };
  if (!(c.w1 >= 0.0) || !(c.w2 >= 0.0)) fail("w1 and w2 must be non-negative");
  if (!(c.w1 + c.w2 > 0.0)) fail("w1 + w2 must be positive");
  if (!(c.xi > 0.0) || !std::isfinite(c.xi)) fail("xi must be positive");
  if (!(c.gamma > 0.0 && c.gamma < 1.0)) fail("gamma must be in (0, 1)");
  if (!(c.epsilon_start >= 0.0 && c.epsilon_start <= 1.0 && c.epsilon_end >= 0.0 && c.epsilon_end <= 1.0))
    fail("epsilon values must be in [0, 1]");
  if (!(c.epsilon_fraction > 0.0 && c.epsilon_fraction <= 1.0)) fail("epsilon fraction must be in (0, 1]");
  if (c.buffer_transitions < 1 || c.batch < 1 || c.train_every < 1 || c.target_sync < 1)
    fail("buffer, batch, train_every and target_sync must be positive");
  if (c.budget < 0) fail("budget must be non-negative");
  for (int h : c.hidden)
    if (h <= 0) fail("hidden sizes must be positive");
  if (c.features.embedding_dim < 1) fail("embedding dimension must be positive");
  if (c.features.iterations < 0) fail("iteration count must be non-negative");
  if (!(c.features.graph.min_weight > 0.0)) fail("min_weight must be positive");
  if (!(c.optimizer.learning_rate > 0.0)) fail("learning rate must be positive");
}

MixingCritic MixingCritic::unit(int channels, MixerKind kind) {
  return {Vector::Ones(channels), 0.0, kind};
}

double MixingCritic::mix(const Vector& chosen_q) const {
  if (chosen_q.size() != omega.size()) throw ShapeError("mixer input length != channel count");
  return omega.dot(chosen_q) + bias;
}

void MixingCritic::project() { omega = omega.cwiseMax(0.0); }

bool MixingCritic::operator==(const MixingCritic& other) const {
  return kind == other.kind && bias == other.bias && omega.size() == other.omega.size() && omega == other.omega;
}

int count_masks(const comm::MaskMatrix& mask) {
  return static_cast<int>(std::count(mask.mask.begin(), mask.mask.end(), true));
}

double adversary_reward(double shifted_reward, int masks, const AdversaryConfig& config) {
  if (shifted_reward < 0.0) throw std::invalid_argument("shifted team reward is negative; check the reward shift");
  if (masks < 0) throw std::invalid_argument("mask count is negative");
  return 1.0 / (config.w1 * shifted_reward + config.w2 * masks + config.xi);
}

Matrix channel_inputs(std::span<const Vector> features) {
  const comm::ChannelSet set(static_cast<int>(features.size()));
  return comm::pair_inputs(features, set);
}

Selection select_from_q(const Matrix& q, SelectMode mode, double epsilon, int budget, Rng& rng) {
  const int channels = static_cast<int>(q.cols());
  if (q.rows() != 2) throw ShapeError("masking Q table must have two rows");
  if (budget < 0) throw std::invalid_argument("budget must be non-negative");
  Selection s;
  s.q = q;
  s.mask = comm::MaskMatrix::zeros(channels);
  const bool explore = mode == SelectMode::explore;
  if (budget == 0) {
    for (int c = 0; c < channels; ++c) {
      if (explore && epsilon > 0.0 && rng.bernoulli(epsilon))
        s.mask.mask[c] = rng.index(2) == 1;
      else
        s.mask.mask[c] = q(1, c) > q(0, c);
    }
  } else {
    const int k = std::min(budget, channels);
    if (explore && epsilon > 0.0 && rng.bernoulli(epsilon)) {
      std::vector<int> idx(channels);
      std::iota(idx.begin(), idx.end(), 0);
      for (int i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(channels - i)]);
      for (int i = 0; i < k; ++i) s.mask.mask[idx[i]] = true;
    } else {
      const Vector gain = q.row(1).transpose() - q.row(0).transpose();
      for (int c : top_k(gain, k)) s.mask.mask[c] = true;
    }
  }
  s.chosen_q.resize(channels);
  for (int c = 0; c < channels; ++c) s.chosen_q(c) = q(s.mask.mask[c] ? 1 : 0, c);
  return s;
}

Selection select_masks(const MaskingPolicy& policy, std::span<const Vector> features, SelectMode mode, int budget,
                       Rng& rng) {
  const Matrix q = policy.net.forward_batch(channel_inputs(features));
  return select_from_q(q, mode, policy.epsilon, budget, rng);
}

double best_joint_value(const Matrix& q, const Vector& omega, int budget) {
  if (omega.size() != q.cols()) throw ShapeError("mixer weights do not match channel count");
  if (budget == 0) return omega.dot(q.colwise().maxCoeff().transpose());
  const Vector gain = q.row(1).transpose() - q.row(0).transpose();
  double v = omega.dot(q.row(0).transpose());
  for (int c : top_k(gain, budget)) v += omega(c) * gain(c);
  return v;
}

TdResult td_gradients(const MaskingPolicy& policy, const MixingCritic& critic, const nn::DenseNetwork& target_net,
                      const MixingCritic& target_critic, std::span<const TransitionBuffer::Ref> batch, double gamma,
                      int budget) {
  const Eigen::Index b_count = static_cast<Eigen::Index>(batch.size());
  if (b_count == 0) throw std::invalid_argument("empty TD batch");
  const Eigen::Index channels = critic.omega.size();
  const Eigen::Index d = policy.net.input_dim();
  Matrix x(d, b_count * channels);
  Matrix xn = Matrix::Zero(d, b_count * channels);
  for (Eigen::Index b = 0; b < b_count; ++b) {
    const Matrix pairs = channel_inputs(columns_of(batch[b].step->features));
    if (pairs.cols() != channels) throw ShapeError("transition channel count differs from the critic");
    x.middleCols(b * channels, channels) = pairs;
    if (batch[b].next) xn.middleCols(b * channels, channels) = channel_inputs(columns_of(batch[b].next->features));
  }
  const nn::ForwardTrace trace = policy.net.trace(x);
  const Matrix& q = trace.output();
  const Matrix qn = target_net.forward_batch(xn);

  TdResult r;
  r.omega = Vector::Zero(channels);
  Matrix dz = Matrix::Zero(2, b_count * channels);
  for (Eigen::Index b = 0; b < b_count; ++b) {
    const Transition& t = *batch[b].step;
    double q_tot = critic.bias;
    for (Eigen::Index c = 0; c < channels; ++c) q_tot += critic.omega(c) * q(t.mask[c] ? 1 : 0, b * channels + c);
    double y = t.reward;
    if (batch[b].next)
      y += gamma * (best_joint_value(qn.middleCols(b * channels, channels), target_critic.omega, budget) +
                    target_critic.bias);
    const double diff = q_tot - y;
    r.loss += diff * diff / static_cast<double>(b_count);
    const double g = 2.0 * diff / static_cast<double>(b_count);
    for (Eigen::Index c = 0; c < channels; ++c) {
      const int a = t.mask[c] ? 1 : 0;
      dz(a, b * channels + c) = g * critic.omega(c);
      r.omega(c) += g * q(a, b * channels + c);
    }
    r.bias += g;
  }
  r.net = policy.net.backward(trace, dz);
  return r;
}

double td_update(MaskingPolicy& policy, MixingCritic& critic, CriticOptimizer& optimizer,
                 const nn::DenseNetwork& target_net, const MixingCritic& target_critic,
                 std::span<const TransitionBuffer::Ref> batch, double gamma, int budget) {
  TdResult r = td_gradients(policy, critic, target_net, target_critic, batch, gamma, budget);
  if (!std::isfinite(r.loss) || !r.net.all_finite() || !r.omega.allFinite() || !std::isfinite(r.bias)) {
    std::ostringstream os;
    os << "adversary TD loss is not finite (loss " << r.loss << ", mixer bias " << critic.bias << ", max |omega| "
       << critic.omega.cwiseAbs().maxCoeff() << ")";
    throw NumericError(os.str());
  }
  optimizer.net.apply(policy.net, std::move(r.net));
  if (critic.kind == MixerKind::linear) {
    const Eigen::Index c = critic.omega.size();
    Vector params(c + 1), grad(c + 1);
    params << critic.omega, critic.bias;
    grad << r.omega, r.bias;
    optimizer.mixer.apply(params, grad);
    critic.omega = params.head(c);
    critic.bias = params(c);
    critic.project();
  }
  return r.loss;
}

graph::FeatureOptions resolve_features(const graph::FeatureOptions& options, const env::Environment& environment) {
  graph::FeatureOptions f = options;
  if (f.graph.radius < 0.0) f.graph.radius = environment.config().radius;
  return f;
}

Adversary make_adversary(const env::Environment& environment, const AdversaryConfig& config, std::uint64_t seed) {
  validate(config);
  Adversary a;
  a.features = resolve_features(config.features, environment);
  a.budget = config.budget;
  const int fd = graph::feature_dim(environment.observation_dim(), a.features.embedding_dim, a.features.use_embedding);
  std::vector<int> sizes{2 * fd};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(2);
  a.policy.net = nn::DenseNetwork(sizes, derive_seed(seed, 40));
  a.policy.epsilon = config.epsilon_start;
  a.critic = MixingCritic::unit(comm::channel_count(environment.agent_count()), config.mixer);
  return a;
}

void train_adversary(const env::Environment& environment, const team::TeamPolicy& team, const AdversaryConfig& config,
                     int episodes, std::uint64_t seed, Adversary& adversary) {
  validate(config);
  if (episodes < 0) throw std::invalid_argument("episode count must be non-negative");
  if (adversary.budget != config.budget) throw std::invalid_argument("adversary budget differs from the config");
  auto env_copy = environment.clone();
  const graph::FeatureOptions features = resolve_features(adversary.features, *env_copy);
  CriticOptimizer optimizer{nn::Optimizer(config.optimizer), nn::VectorOptimizer(config.optimizer)};
  nn::DenseNetwork target_net = adversary.policy.net;
  MixingCritic target_critic = adversary.critic;
  TransitionBuffer buffer(static_cast<std::size_t>(config.buffer_transitions));
  Rng sample_rng(derive_seed(seed, 30));
  Collector collector(adversary, features, config);

  long long pending = 0;
  long long updates = 0;
  for (int ep = 0; ep < episodes; ++ep) {
    adversary.policy.epsilon =
        team::epsilon_at(ep, episodes, config.epsilon_start, config.epsilon_end, config.epsilon_fraction);
    collector.reward_sum_ = collector.mask_sum_ = 0.0;
    const team::EpisodeResult result =
        team::run_episode(*env_copy, team, derive_seed(seed, 31, ep), team::RolloutOptions{}, &collector);
    buffer.add_episode(collector.take());

    AdversaryCurvePoint point;
    point.episode = static_cast<int>(adversary.curve.size());
    point.team_return = result.team_return;
    point.mean_reward = collector.reward_sum_ / std::max(1, result.steps);
    point.mean_masks = collector.mask_sum_ / std::max(1, result.steps);

    pending += result.steps;
    double loss_sum = 0.0;
    int loss_count = 0;
    while (pending >= config.train_every && buffer.size() >= static_cast<std::size_t>(config.batch)) {
      pending -= config.train_every;
      const auto refs = buffer.sample(config.batch, sample_rng);
      loss_sum += td_update(adversary.policy, adversary.critic, optimizer, target_net, target_critic, refs,
                            config.gamma, adversary.budget);
      ++loss_count;
      if (++updates % config.target_sync == 0) {
        target_net = adversary.policy.net;
        target_critic = adversary.critic;
      }
    }
    if (buffer.size() < static_cast<std::size_t>(config.batch)) pending = 0;
    point.loss = loss_count > 0 ? loss_sum / loss_count : 0.0;
    adversary.curve.push_back(point);
  }
  adversary.policy.epsilon = 0.0;
}

Adversary train_adversary(const env::Environment& environment, const team::TeamPolicy& team,
                          const AdversaryConfig& config, int episodes, std::uint64_t seed) {
  Adversary a = make_adversary(environment, config, derive_seed(seed, 41));
  train_adversary(environment, team, config, episodes, derive_seed(seed, 42), a);
  return a;
}

AdversaryMasker::AdversaryMasker(std::shared_ptr<const Adversary> adversary, double probability)
    : adversary_(std::move(adversary)), probability_(probability) {
  if (!adversary_) throw std::invalid_argument("adversary masker needs an adversary");
  if (!(probability >= 0.0 && probability <= 1.0)) throw std::invalid_argument("mask probability must be in [0, 1]");
}

std::unique_ptr<team::Interferer> AdversaryMasker::clone() const { return std::make_unique<AdversaryMasker>(*this); }

void AdversaryMasker::begin_episode(std::uint64_t seed) { rng_ = Rng(seed); }

std::optional<comm::MaskMatrix> AdversaryMasker::mask(const team::StepView& view) {
  if (probability_ < 1.0 && !rng_.bernoulli(probability_)) return std::nullopt;
  const auto h = graph::extract(view.env, view.observations, adversary_->features);
  return select_masks(adversary_->policy, h, SelectMode::greedy, adversary_->budget, rng_).mask;
}

void save_adversary(const Adversary& a, std::ostream& out) {
  out << "dmac-adversary 1\n";
  out << "budget " << a.budget << '\n';
  out << "features ";
  detail::write_double(out, a.features.graph.radius);
  out << ' ';
  detail::write_double(out, a.features.graph.min_weight);
  out << ' ' << (a.features.graph.fully_connected ? 1 : 0) << ' ' << a.features.embedding_dim << ' '
      << a.features.iterations << ' ' << (a.features.use_embedding ? 1 : 0) << '\n';
  out << "mixer " << to_string(a.critic.kind) << ' ';
  detail::write_double(out, a.critic.bias);
  out << ' ';
  detail::write_matrix(out, a.critic.omega);
  nn::save_network(out, a.policy.net);
  out << "end-adversary\n";
}

Adversary load_adversary(std::istream& in) {
  detail::expect(in, "dmac-adversary");
  detail::expect(in, "1");
  Adversary a;
  detail::expect(in, "budget");
  if (!(in >> a.budget) || a.budget < 0) throw IoError("bad adversary budget");
  detail::expect(in, "features");
  a.features.graph.radius = detail::read_double(in);
  a.features.graph.min_weight = detail::read_double(in);
  int fc = 0, ue = 0;
  if (!(in >> fc >> a.features.embedding_dim >> a.features.iterations >> ue)) throw IoError("bad feature options");
  a.features.graph.fully_connected = fc != 0;
  a.features.use_embedding = ue != 0;
  detail::expect(in, "mixer");
  std::string kind;
  in >> kind;
  try {
    a.critic.kind = parse_mixer(kind);
  } catch (const ConfigError& e) {
    throw IoError(e.what());
  }
  a.critic.bias = detail::read_double(in);
  const Matrix omega = detail::read_matrix(in);
  if (omega.cols() != 1) throw IoError("mixer weights must be a column");
  a.critic.omega = omega.col(0);
  a.policy.net = nn::load_network(in);
  detail::expect(in, "end-adversary");
  if (a.policy.net.output_dim() != 2) throw IoError("masking network must have two outputs");
  return a;
}

void write_curve(std::span<const AdversaryCurvePoint> curve, std::ostream& out) {
  out << "episode,mean_reward,loss,mean_masks,team_return\n";
  const auto precision = out.precision();
  out << std::setprecision(17);
  for (const auto& p : curve)
    out << p.episode << ',' << p.mean_reward << ',' << p.loss << ',' << p.mean_masks << ',' << p.team_return << '\n';
  out.precision(precision);
}

}  // namespace dmac::adversary
