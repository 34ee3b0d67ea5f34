#include "dmac/comm.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "dmac/errors.hpp"

namespace dmac::comm {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

ChannelSet::ChannelSet(int agents) : agents_(agents) {
  if (agents < 2) throw std::invalid_argument("a channel set needs at least two agents");
  pairs_.reserve(channel_count(agents));
  for (int i = 0; i < agents; ++i)
    for (int j = i + 1; j < agents; ++j) pairs_.push_back({i, j});
}

int ChannelSet::index(int i, int j) const {
  if (i == j || i < 0 || j < 0 || i >= agents_ || j >= agents_)
    throw std::out_of_range("no channel between " + std::to_string(i) + " and " + std::to_string(j));
  if (i > j) std::swap(i, j);
  // Channels before row i: sum_{r<i} (n-1-r).
  return i * (2 * agents_ - i - 1) / 2 + (j - i - 1);
}

MessageSlot MessageSlot::carrying(Vector content) {
  if (content.size() != kMessageDim) throw ShapeError("message content must have the message dimension");
  return {std::move(content), false};
}

bool MessageSlot::operator==(const MessageSlot& other) const {
  return masked == other.masked && content == other.content;
}

bool ObservationSet::operator==(const ObservationSet& other) const {
  if (agents.size() != other.agents.size()) return false;
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const auto& a = agents[i];
    const auto& b = other.agents[i];
    if (a.observation.size() != b.observation.size() || a.observation != b.observation) return false;
    if (a.slots != b.slots) return false;
  }
  return true;
}

int CommDecision::open_count() const {
  int n = 0;
  for (bool o : open) n += o ? 1 : 0;
  return n;
}

MessageEncoder::MessageEncoder(int observation_dim) : weights_(Matrix::Zero(kMessageDim, observation_dim)) {
  for (int k = 0; k < std::min(kMessageDim, observation_dim); ++k) weights_(k, k) = 1.0;
}

MessageEncoder::MessageEncoder(Matrix weights) : weights_(std::move(weights)) {
  if (weights_.rows() != kMessageDim) throw ShapeError("encoder must produce message-dimension outputs");
}

Vector MessageEncoder::encode(const Vector& observation) const {
  if (observation.size() != weights_.cols()) throw ShapeError("encoder input dimension mismatch");
  return (weights_ * observation).array().tanh().matrix();
}

ObservationSet exchange(std::span<const Vector> observations, const CommDecision& decision,
                        const MessageEncoder& encoder) {
  const int n = static_cast<int>(observations.size());
  const ChannelSet channels(n);
  if (static_cast<int>(decision.open.size()) != channels.size())
    throw ShapeError("decision does not cover every channel");
  ObservationSet set;
  set.agents.resize(n);
  for (int i = 0; i < n; ++i) {
    set.agents[i].observation = observations[i];
    set.agents[i].slots.assign(n, MessageSlot::null());
  }
  for (int c = 0; c < channels.size(); ++c) {
    if (!decision.open[c]) continue;
    const auto [i, j] = channels[c];
    set.slot(i, j) = MessageSlot::carrying(encoder.encode(observations[j]));
    set.slot(j, i) = MessageSlot::carrying(encoder.encode(observations[i]));
  }
  return set;
}

ObservationSet apply_mask(ObservationSet set, const MaskMatrix& mask) {
  const ChannelSet channels(set.size());
  if (static_cast<int>(mask.mask.size()) != channels.size()) throw ShapeError("mask does not cover every channel");
  for (int c = 0; c < channels.size(); ++c) {
    if (!mask.mask[c]) continue;
    const auto [i, j] = channels[c];
    set.slot(i, j) = MessageSlot::null();
    set.slot(j, i) = MessageSlot::null();
  }
  return set;
}

int policy_input_dim(int observation_dim, int agents) {
  return observation_dim + (agents - 1) * (kMessageDim + 1);
}

Vector policy_input(const ObservationSet& set, int agent) {
  const auto& view = set.agents[agent];
  const int n = set.size();
  Vector x(policy_input_dim(static_cast<int>(view.observation.size()), n));
  x.head(view.observation.size()) = view.observation;
  int at = static_cast<int>(view.observation.size());
  for (int j = 0; j < n; ++j) {
    if (j == agent) continue;
    const auto& s = view.slots[j];
    x.segment(at, kMessageDim) = s.content;
    x(at + kMessageDim) = s.masked ? 1.0 : 0.0;
    at += kMessageDim + 1;
  }
  return x;
}

Matrix policy_inputs(const ObservationSet& set) {
  const int n = set.size();
  Matrix x(policy_input_dim(static_cast<int>(set.agents.front().observation.size()), n), n);
  for (int i = 0; i < n; ++i) x.col(i) = policy_input(set, i);
  return x;
}

int gate_feature_dim(int observation_dim, int agents) { return observation_dim + agents; }

std::vector<Vector> gate_features(std::span<const Vector> observations) {
  const int n = static_cast<int>(observations.size());
  std::vector<Vector> out(n);
  for (int i = 0; i < n; ++i) {
    Vector f = Vector::Zero(observations[i].size() + n);
    f.head(observations[i].size()) = observations[i];
    f(observations[i].size() + i) = 1.0;
    out[i] = std::move(f);
  }
  return out;
}

Matrix pair_inputs(std::span<const Vector> features, const ChannelSet& channels) {
  if (static_cast<int>(features.size()) != channels.agents()) throw ShapeError("feature count != agent count");
  const Eigen::Index d = features.front().size();
  Matrix x(2 * d, channels.size());
  for (int c = 0; c < channels.size(); ++c) {
    x.col(c).head(d) = features[channels[c].i];
    x.col(c).tail(d) = features[channels[c].j];
  }
  return x;
}

Vector gate_probabilities(const nn::DenseNetwork& gate, const Matrix& pairs) {
  if (gate.output_dim() != 1) throw ShapeError("gate network must have a single output");
  const Matrix z = gate.forward_batch(pairs);
  Vector p(z.cols());
  for (Eigen::Index c = 0; c < z.cols(); ++c) p(c) = kGateFloor + (1.0 - 2.0 * kGateFloor) * sigmoid(z(0, c));
  return p;
}

CommDecision decide(const Vector& probabilities, GateMode mode, Rng& rng) {
  CommDecision d;
  d.open.resize(probabilities.size());
  for (Eigen::Index c = 0; c < probabilities.size(); ++c)
    d.open[c] = mode == GateMode::greedy ? probabilities(c) >= 0.5 : rng.bernoulli(probabilities(c));
  return d;
}

CommDecision cp_decide(const nn::DenseNetwork& gate, std::span<const Vector> features, GateMode mode, Rng& rng) {
  const ChannelSet channels(static_cast<int>(features.size()));
  const Matrix pairs = pair_inputs(features, channels);
  return decide(gate_probabilities(gate, pairs), mode, rng);
}

nn::Gradients cp_gradients(const nn::DenseNetwork& gate, std::span<const GateEpisode> batch, double comm_cost,
                           double gamma, double* loss) {
  if (batch.empty()) throw std::invalid_argument("policy-gradient batch is empty");
  std::size_t horizon = 0;
  for (const auto& ep : batch) horizon = std::max(horizon, ep.steps.size());

  std::vector<std::vector<double>> returns(batch.size());
  std::vector<double> baseline(horizon, 0.0);
  std::vector<int> present(horizon, 0);
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const auto& steps = batch[e].steps;
    returns[e].assign(steps.size(), 0.0);
    double g = 0.0;
    for (std::size_t t = steps.size(); t-- > 0;) {
      g = steps[t].team_reward + gamma * g;
      returns[e][t] = g;
      baseline[t] += g;
      ++present[t];
    }
  }
  for (std::size_t t = 0; t < horizon; ++t)
    if (present[t] > 0) baseline[t] /= present[t];

  Eigen::Index columns = 0;
  for (const auto& ep : batch)
    for (const auto& s : ep.steps) columns += s.pairs.cols();
  const Eigen::Index rows = gate.input_dim();
  Matrix all(rows, columns);
  std::vector<double> advantage(columns);
  std::vector<bool> sampled(columns);
  Eigen::Index at = 0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    const auto& steps = batch[e].steps;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& s = steps[t];
      if (s.pairs.rows() != rows || s.sampled.size() != static_cast<std::size_t>(s.pairs.cols()) ||
          s.delivered.size() != s.sampled.size())
        throw ShapeError("gate step records disagree on channel count");
      all.middleCols(at, s.pairs.cols()) = s.pairs;
      const double team_adv = returns[e][t] - baseline[t];
      for (Eigen::Index c = 0; c < s.pairs.cols(); ++c) {
        advantage[at + c] = team_adv - (s.delivered[c] ? comm_cost : 0.0);
        sampled[at + c] = s.sampled[c];
      }
      at += s.pairs.cols();
    }
  }

  const double scale = 1.0 / static_cast<double>(batch.size());
  const nn::ForwardTrace trace = gate.trace(all);
  Matrix dz(1, columns);
  double surrogate = 0.0;
  for (Eigen::Index c = 0; c < columns; ++c) {
    const double sg = sigmoid(trace.output()(0, c));
    const double p = kGateFloor + (1.0 - 2.0 * kGateFloor) * sg;
    const double dp = (1.0 - 2.0 * kGateFloor) * sg * (1.0 - sg);
    const double adv = advantage[c];
    if (sampled[c]) {
      surrogate -= scale * adv * std::log(p);
      dz(0, c) = -scale * adv * dp / p;
    } else {
      surrogate -= scale * adv * std::log(1.0 - p);
      dz(0, c) = scale * adv * dp / (1.0 - p);
    }
  }
  nn::Gradients total = gate.backward(trace, dz);
  if (loss) *loss = surrogate;
  return total;
}

double train_cp_step(nn::DenseNetwork& gate, nn::Optimizer& optimizer, std::span<const GateEpisode> batch,
                     double comm_cost, double gamma) {
  double loss = 0.0;
  nn::Gradients g = cp_gradients(gate, batch, comm_cost, gamma, &loss);
  if (!std::isfinite(loss)) throw NumericError("gate policy loss is not finite");
  optimizer.apply(gate, std::move(g));
  return loss;
}

void CommLog::append_step(int episode, int t, const ChannelSet& channels, const CommDecision& decision,
                          const MaskMatrix* mask) {
  for (int c = 0; c < channels.size(); ++c) {
    if (!decision.open[c]) continue;
    events_.push_back({episode, t, channels[c], true, mask != nullptr && mask->mask[c]});
  }
}

std::size_t CommLog::delivered() const {
  std::size_t n = 0;
  for (const auto& e : events_) n += (e.opened && !e.masked) ? 1 : 0;
  return n;
}

void CommLog::write_lines(std::ostream& out) const {
  for (const auto& e : events_) {
    nlohmann::json j = {{"episode", e.episode},
                        {"t", e.t},
                        {"channel", {e.channel.i, e.channel.j}},
                        {"opened", e.opened},
                        {"masked", e.masked}};
    out << j.dump() << '\n';
  }
}

CommLog CommLog::read_lines(std::istream& in) {
  CommLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      CommEvent e;
      e.episode = j.at("episode").get<int>();
      e.t = j.at("t").get<int>();
      e.channel = {j.at("channel").at(0).get<int>(), j.at("channel").at(1).get<int>()};
      e.opened = j.at("opened").get<bool>();
      e.masked = j.at("masked").get<bool>();
      log.events_.push_back(e);
    } catch (const nlohmann::json::exception& ex) {
      throw IoError(std::string("malformed communication log line: ") + ex.what());
    }
  }
  return log;
}

}  // namespace dmac::comm
