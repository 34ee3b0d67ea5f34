#pragma once

// Independent reference implementations. They use plain loops over std::vector
// and do not call back into the library code they check.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "dmac/comm.hpp"
#include "dmac/nn.hpp"
#include "dmac/rng.hpp"

namespace oracle {

using Table = std::vector<std::vector<double>>;

// Straight-line forward pass: y = W x + b, rectifier on hidden layers.
inline std::vector<double> forward(const dmac::nn::DenseNetwork& net, std::vector<double> x) {
  const auto& layers = net.layers();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& w = layers[k].weight;
    std::vector<double> y(static_cast<std::size_t>(w.rows()), 0.0);
    for (int r = 0; r < w.rows(); ++r) {
      double acc = 0.0;
      for (int c = 0; c < w.cols(); ++c) acc += w(r, c) * x[c];
      acc += layers[k].bias(r);
      if (layers[k].activation == dmac::nn::Activation::relu) acc = std::max(0.0, acc);
      y[r] = acc;
    }
    x = std::move(y);
  }
  return x;
}

// 0.5 * sum over samples of |f(x) - y|^2, columns are samples.
inline double squared_loss(const dmac::nn::DenseNetwork& net, const dmac::nn::Matrix& xs,
                           const dmac::nn::Matrix& ys) {
  double loss = 0.0;
  for (int s = 0; s < xs.cols(); ++s) {
    std::vector<double> x(xs.rows());
    for (int r = 0; r < xs.rows(); ++r) x[r] = xs(r, s);
    const auto out = forward(net, x);
    for (std::size_t r = 0; r < out.size(); ++r) loss += 0.5 * (out[r] - ys(r, s)) * (out[r] - ys(r, s));
  }
  return loss;
}

struct GradientCheck {
  double worst_relative = 0.0;
  std::size_t compared = 0;
};

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  if (scale == 0.0) return 0.0;
  return std::abs(a - b) / scale;
}

// Central differences of squared_loss against the analytic parameter and input
// gradients (flattened in flat_parameters order). Entries whose analytic and
// numeric values are both below `floor` in magnitude are counted as agreeing.
inline GradientCheck check_gradients(const dmac::nn::DenseNetwork& net, const dmac::nn::Matrix& xs,
                                     const dmac::nn::Matrix& ys, double step = 1e-6, double floor = 1e-9) {
  const auto trace = net.trace(xs);
  const auto g = net.backward(trace, trace.output() - ys);
  std::vector<double> analytic;
  for (std::size_t k = 0; k < g.weight.size(); ++k) {
    analytic.insert(analytic.end(), g.weight[k].data(), g.weight[k].data() + g.weight[k].size());
    analytic.insert(analytic.end(), g.bias[k].data(), g.bias[k].data() + g.bias[k].size());
  }
  GradientCheck out;
  auto probe = net;
  auto params = net.flat_parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const double keep = params[p];
    params[p] = keep + step;
    probe.set_flat_parameters(params);
    const double up = squared_loss(probe, xs, ys);
    params[p] = keep - step;
    probe.set_flat_parameters(params);
    const double down = squared_loss(probe, xs, ys);
    params[p] = keep;
    const double numeric = (up - down) / (2 * step);
    if (std::abs(numeric) >= floor || std::abs(analytic[p]) >= floor)
      out.worst_relative = std::max(out.worst_relative, relative_error(analytic[p], numeric));
    ++out.compared;
  }
  probe.set_flat_parameters(params);
  auto xs_probe = xs;
  for (int r = 0; r < xs.rows(); ++r)
    for (int s = 0; s < xs.cols(); ++s) {
      const double keep = xs_probe(r, s);
      xs_probe(r, s) = keep + step;
      const double up = squared_loss(net, xs_probe, ys);
      xs_probe(r, s) = keep - step;
      const double down = squared_loss(net, xs_probe, ys);
      xs_probe(r, s) = keep;
      const double numeric = (up - down) / (2 * step);
      const double a = g.input(r, s);
      if (std::abs(numeric) >= floor || std::abs(a) >= floor)
        out.worst_relative = std::max(out.worst_relative, relative_error(a, numeric));
      ++out.compared;
    }
  return out;
}

// Edge weights; nullopt marks a missing edge. Symmetric, empty diagonal.
using WeightTable = std::vector<std::vector<std::optional<double>>>;

// K rounds of e_v <- e_v + (1/|N(v)|) sum_u e_u / w(u, v), all vertices
// updated from the previous round's table.
inline Table aggregate(const WeightTable& w, Table e, int rounds) {
  const std::size_t n = e.size();
  for (int k = 0; k < rounds; ++k) {
    Table next = e;
    for (std::size_t v = 0; v < n; ++v) {
      std::vector<double> acc(e[v].size(), 0.0);
      int count = 0;
      for (std::size_t u = 0; u < n; ++u) {
        if (u == v || !w[v][u]) continue;
        ++count;
        for (std::size_t d = 0; d < acc.size(); ++d) acc[d] += e[u][d] / *w[v][u];
      }
      if (count == 0) continue;
      for (std::size_t d = 0; d < acc.size(); ++d) next[v][d] = e[v][d] + acc[d] / count;
    }
    e = std::move(next);
  }
  return e;
}

// Slot-wise masking rule: slot (i, j) at agent i and slot (j, i) at agent j
// become null when the mask bit of channel {i, j} is set, and are otherwise
// left exactly as they were.
inline dmac::comm::ObservationSet mask_slots(const dmac::comm::ObservationSet& in, const std::vector<bool>& bits) {
  auto out = in;
  const int n = in.size();
  int c = 0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j, ++c) {
      if (!bits[c]) continue;
      out.agents[i].slots[j].content = dmac::nn::Vector::Zero(dmac::comm::kMessageDim);
      out.agents[i].slots[j].masked = true;
      out.agents[j].slots[i].content = dmac::nn::Vector::Zero(dmac::comm::kMessageDim);
      out.agents[j].slots[i].masked = true;
    }
  return out;
}

// Bitwise equality of two observation sets, down to the double bit patterns.
inline bool identical(const dmac::comm::ObservationSet& a, const dmac::comm::ObservationSet& b) {
  if (a.size() != b.size()) return false;
  auto same = [](const dmac::nn::Vector& x, const dmac::nn::Vector& y) {
    if (x.size() != y.size()) return false;
    for (int k = 0; k < x.size(); ++k)
      if (std::bit_cast<std::uint64_t>(x(k)) != std::bit_cast<std::uint64_t>(y(k))) return false;
    return true;
  };
  for (int i = 0; i < a.size(); ++i) {
    if (!same(a.agents[i].observation, b.agents[i].observation)) return false;
    if (a.agents[i].slots.size() != b.agents[i].slots.size()) return false;
    for (std::size_t j = 0; j < a.agents[i].slots.size(); ++j) {
      if (a.agents[i].slots[j].masked != b.agents[i].slots[j].masked) return false;
      if (!same(a.agents[i].slots[j].content, b.agents[i].slots[j].content)) return false;
    }
  }
  return true;
}

struct JointMax {
  double value = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<int>> maximizers;  // every joint action reaching the max
};

// Enumerates all 2^C joint actions of Q_tot = sum_c omega_c q[c][a_c] + bias.
inline JointMax enumerate_joint(const std::vector<std::array<double, 2>>& q, const std::vector<double>& omega,
                                double bias) {
  const std::size_t c = q.size();
  JointMax out;
  std::vector<double> values;
  for (std::uint64_t bits = 0; bits < (1ULL << c); ++bits) {
    double v = bias;
    for (std::size_t k = 0; k < c; ++k) v += omega[k] * q[k][(bits >> k) & 1];
    values.push_back(v);
    out.value = std::max(out.value, v);
  }
  for (std::uint64_t bits = 0; bits < (1ULL << c); ++bits) {
    if (values[bits] != out.value) continue;
    std::vector<int> a(c);
    for (std::size_t k = 0; k < c; ++k) a[k] = static_cast<int>((bits >> k) & 1);
    out.maximizers.push_back(a);
  }
  return out;
}

// Population mean and standard deviation.
inline std::pair<double, double> mean_sd(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace oracle
