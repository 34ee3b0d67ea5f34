#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace dmac::nn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Activation { relu, identity };

struct Layer {
  Matrix weight;  // out x in
  Vector bias;
  Activation activation = Activation::identity;

  bool operator==(const Layer& other) const;
};

// Parameter gradients laid out like the network's layers. `input` holds the
// gradient with respect to the network input, one column per sample.
struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  Matrix input;

  Gradients& operator+=(const Gradients& other);
  Gradients& operator*=(double factor);
  double squared_norm() const;
  bool all_finite() const;
};

// Post-activation values for every layer; values[0] is the input batch.
struct ForwardTrace {
  std::vector<Matrix> values;
  const Matrix& output() const { return values.back(); }
};

// Fully connected feed-forward network. Hidden layers use the rectifier, the
// output layer is linear. Samples are columns in all batched calls.
class DenseNetwork {
 public:
  DenseNetwork() = default;

  // Weights and biases drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  DenseNetwork(std::vector<int> sizes, std::uint64_t seed);

  // Builds a network from explicit layers; the shapes must chain.
  static DenseNetwork from_layers(std::vector<Layer> layers, std::uint64_t seed = 0);

  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  const std::vector<int>& sizes() const { return sizes_; }
  std::uint64_t seed() const { return seed_; }
  bool empty() const { return layers_.empty(); }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  Vector forward(const Vector& input) const;
  Matrix forward_batch(const Matrix& inputs) const;
  ForwardTrace trace(const Matrix& inputs) const;

  // Backpropagates `output_grad` (output_dim x batch) through the trace.
  Gradients backward(const ForwardTrace& trace, const Matrix& output_grad) const;

  Gradients zero_gradients() const;
  std::size_t parameter_count() const;
  std::vector<double> flat_parameters() const;
  void set_flat_parameters(std::span<const double> values);
  bool all_finite() const;

  bool operator==(const DenseNetwork& other) const;

 private:
  void check_input(Eigen::Index rows) const;

  std::vector<int> sizes_;
  std::vector<Layer> layers_;
  std::uint64_t seed_ = 0;
};

Gradients backward(const DenseNetwork& net, const Vector& input, const Vector& output_gradient);

enum class UpdateRule { adam, sgd };

struct OptimizerConfig {
  UpdateRule rule = UpdateRule::adam;
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping

  bool operator==(const OptimizerConfig&) const = default;
};

// Moment accumulators for one network. Clipping, when enabled, rescales the
// whole gradient by its global norm before the step.
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerConfig config) : config_(config) {}

  void apply(DenseNetwork& net, Gradients gradients);

  const OptimizerConfig& config() const { return config_; }
  std::uint64_t steps() const { return steps_; }

 private:
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  std::vector<Matrix> m_weight_, v_weight_;
  std::vector<Vector> m_bias_, v_bias_;
};

// Same update rules for a free-standing parameter vector.
class VectorOptimizer {
 public:
  VectorOptimizer() = default;
  explicit VectorOptimizer(OptimizerConfig config) : config_(config) {}

  void apply(Vector& params, const Vector& gradient);
  std::uint64_t steps() const { return steps_; }

 private:
  OptimizerConfig config_;
  std::uint64_t steps_ = 0;
  Vector m_, v_;
};

struct TargetCopy {
  DenseNetwork snapshot;
  std::uint64_t staleness = 0;
};

void sync_target(const DenseNetwork& net, TargetCopy& target);

// Text checkpoint: version, seed, layer sizes, activations and the flat
// parameters as hexadecimal floats so a round trip is bit exact.
void save_network(std::ostream& out, const DenseNetwork& net);
DenseNetwork load_network(std::istream& in);

inline constexpr int kCheckpointVersion = 1;

}  // namespace dmac::nn
