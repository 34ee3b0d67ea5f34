#include "dmac/nn.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "dmac/errors.hpp"
#include "dmac/rng.hpp"

namespace dmac::nn {

namespace {

std::string shape_message(const char* what, Eigen::Index expected, Eigen::Index got) {
  std::ostringstream os;
  os << what << ": expected " << expected << ", got " << got;
  return os.str();
}

const char* activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "identity";
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw IoError("unknown activation '" + s + "'");
}

void adam_update(Eigen::Ref<Matrix> param, const Matrix& grad, Matrix& m, Matrix& v,
                 std::uint64_t step, const OptimizerConfig& cfg) {
  if (cfg.rule == UpdateRule::sgd) {
    param -= cfg.learning_rate * grad;
    return;
  }
  if (m.size() == 0) {
    m = Matrix::Zero(grad.rows(), grad.cols());
    v = Matrix::Zero(grad.rows(), grad.cols());
  }
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  param.array() -= cfg.learning_rate * (m.array() / c1) /
                   ((v.array() / c2).sqrt() + cfg.epsilon);
}

}  // namespace

bool Layer::operator==(const Layer& other) const {
  return activation == other.activation && weight.rows() == other.weight.rows() &&
         weight.cols() == other.weight.cols() && weight == other.weight &&
         bias == other.bias;
}

Gradients& Gradients::operator+=(const Gradients& other) {
  if (other.weight.size() != weight.size()) throw ShapeError("gradient layer count mismatch");
  for (std::size_t k = 0; k < weight.size(); ++k) {
    weight[k] += other.weight[k];
    bias[k] += other.bias[k];
  }
  return *this;
}

Gradients& Gradients::operator*=(double factor) {
  for (std::size_t k = 0; k < weight.size(); ++k) {
    weight[k] *= factor;
    bias[k] *= factor;
  }
  return *this;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (std::size_t k = 0; k < weight.size(); ++k)
    s += weight[k].squaredNorm() + bias[k].squaredNorm();
  return s;
}

bool Gradients::all_finite() const {
  for (std::size_t k = 0; k < weight.size(); ++k)
    if (!weight[k].allFinite() || !bias[k].allFinite()) return false;
  return true;
}

DenseNetwork::DenseNetwork(std::vector<int> sizes, std::uint64_t seed)
    : sizes_(std::move(sizes)), seed_(seed) {
  if (sizes_.size() < 2) throw ShapeError("a network needs at least input and output sizes");
  for (int s : sizes_)
    if (s <= 0) throw ShapeError("layer sizes must be positive");
  Rng rng(seed);
  for (std::size_t k = 0; k + 1 < sizes_.size(); ++k) {
    Layer layer;
    const int in = sizes_[k];
    const int out = sizes_[k + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    layer.weight.resize(out, in);
    layer.bias.resize(out);
    for (int c = 0; c < in; ++c)
      for (int r = 0; r < out; ++r) layer.weight(r, c) = rng.uniform(-bound, bound);
    for (int r = 0; r < out; ++r) layer.bias(r) = rng.uniform(-bound, bound);
    layer.activation = k + 2 == sizes_.size() ? Activation::identity : Activation::relu;
    layers_.push_back(std::move(layer));
  }
}

DenseNetwork DenseNetwork::from_layers(std::vector<Layer> layers, std::uint64_t seed) {
  if (layers.empty()) throw ShapeError("a network needs at least one layer");
  DenseNetwork net;
  net.seed_ = seed;
  net.sizes_.push_back(static_cast<int>(layers.front().weight.cols()));
  for (const auto& layer : layers) {
    if (layer.weight.cols() != net.sizes_.back())
      throw ShapeError(shape_message("layer input", net.sizes_.back(), layer.weight.cols()));
    if (layer.bias.size() != layer.weight.rows())
      throw ShapeError(shape_message("bias length", layer.weight.rows(), layer.bias.size()));
    net.sizes_.push_back(static_cast<int>(layer.weight.rows()));
  }
  net.layers_ = std::move(layers);
  return net;
}

void DenseNetwork::check_input(Eigen::Index rows) const {
  if (layers_.empty()) throw ShapeError("forward on an empty network");
  if (rows != input_dim()) throw ShapeError(shape_message("network input", input_dim(), rows));
}

Vector DenseNetwork::forward(const Vector& input) const {
  check_input(input.size());
  Vector x = input;
  for (const auto& layer : layers_) {
    Vector y = layer.weight * x + layer.bias;
    if (layer.activation == Activation::relu) y = y.cwiseMax(0.0);
    x = std::move(y);
  }
  return x;
}

Matrix DenseNetwork::forward_batch(const Matrix& inputs) const {
  check_input(inputs.rows());
  Matrix x = inputs;
  for (const auto& layer : layers_) {
    Matrix y = layer.weight * x;
    y.colwise() += layer.bias;
    if (layer.activation == Activation::relu) y = y.cwiseMax(0.0);
    x = std::move(y);
  }
  return x;
}

ForwardTrace DenseNetwork::trace(const Matrix& inputs) const {
  check_input(inputs.rows());
  ForwardTrace t;
  t.values.reserve(layers_.size() + 1);
  t.values.push_back(inputs);
  for (const auto& layer : layers_) {
    Matrix y = layer.weight * t.values.back();
    y.colwise() += layer.bias;
    if (layer.activation == Activation::relu) y = y.cwiseMax(0.0);
    t.values.push_back(std::move(y));
  }
  return t;
}

Gradients DenseNetwork::backward(const ForwardTrace& trace, const Matrix& output_grad) const {
  if (trace.values.size() != layers_.size() + 1) throw ShapeError("trace does not match network");
  if (output_grad.rows() != output_dim() || output_grad.cols() != trace.output().cols())
    throw ShapeError(shape_message("output gradient rows", output_dim(), output_grad.rows()));
  Gradients g;
  g.weight.resize(layers_.size());
  g.bias.resize(layers_.size());
  Matrix delta = output_grad;
  for (std::size_t k = layers_.size(); k-- > 0;) {
    const Layer& layer = layers_[k];
    if (layer.activation == Activation::relu)
      delta = delta.cwiseProduct((trace.values[k + 1].array() > 0.0).cast<double>().matrix());
    g.weight[k] = delta * trace.values[k].transpose();
    g.bias[k] = delta.rowwise().sum();
    delta = layer.weight.transpose() * delta;
  }
  g.input = std::move(delta);
  if (!g.all_finite() || !g.input.allFinite()) throw NumericError("non-finite gradient in backward pass");
  return g;
}

Gradients DenseNetwork::zero_gradients() const {
  Gradients g;
  for (const auto& layer : layers_) {
    g.weight.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols()));
    g.bias.push_back(Vector::Zero(layer.bias.size()));
  }
  return g;
}

std::size_t DenseNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
  return n;
}

std::vector<double> DenseNetwork::flat_parameters() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& layer : layers_) {
    out.insert(out.end(), layer.weight.data(), layer.weight.data() + layer.weight.size());
    out.insert(out.end(), layer.bias.data(), layer.bias.data() + layer.bias.size());
  }
  return out;
}

void DenseNetwork::set_flat_parameters(std::span<const double> values) {
  if (values.size() != parameter_count())
    throw ShapeError(shape_message("flat parameter count",
                                   static_cast<Eigen::Index>(parameter_count()),
                                   static_cast<Eigen::Index>(values.size())));
  std::size_t at = 0;
  for (auto& layer : layers_) {
    std::copy_n(values.begin() + at, layer.weight.size(), layer.weight.data());
    at += layer.weight.size();
    std::copy_n(values.begin() + at, layer.bias.size(), layer.bias.data());
    at += layer.bias.size();
  }
}

bool DenseNetwork::all_finite() const {
  for (const auto& layer : layers_)
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
  return true;
}

bool DenseNetwork::operator==(const DenseNetwork& other) const {
  return sizes_ == other.sizes_ && layers_ == other.layers_;
}

Gradients backward(const DenseNetwork& net, const Vector& input, const Vector& output_gradient) {
  const ForwardTrace t = net.trace(input);
  if (output_gradient.size() != net.output_dim())
    throw ShapeError(shape_message("output gradient", net.output_dim(), output_gradient.size()));
  return net.backward(t, output_gradient);
}

void Optimizer::apply(DenseNetwork& net, Gradients g) {
  auto& layers = net.layers();
  if (g.weight.size() != layers.size() || g.bias.size() != layers.size())
    throw ShapeError("gradient layer count does not match network");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (g.weight[k].rows() != layers[k].weight.rows() || g.weight[k].cols() != layers[k].weight.cols() ||
        g.bias[k].size() != layers[k].bias.size())
      throw ShapeError("gradient shape does not mirror layer " + std::to_string(k));
  }
  if (!g.all_finite()) throw NumericError("refusing to apply a non-finite gradient");
  if (config_.max_grad_norm > 0.0) {
    const double norm = std::sqrt(g.squared_norm());
    if (norm > config_.max_grad_norm) g *= config_.max_grad_norm / norm;
  }
  ++steps_;
  if (m_weight_.empty()) {
    m_weight_.resize(layers.size());
    v_weight_.resize(layers.size());
    m_bias_.resize(layers.size());
    v_bias_.resize(layers.size());
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    adam_update(layers[k].weight, g.weight[k], m_weight_[k], v_weight_[k], steps_, config_);
    Matrix mb = m_bias_[k], vb = v_bias_[k];
    adam_update(layers[k].bias, g.bias[k], mb, vb, steps_, config_);
    m_bias_[k] = mb;
    v_bias_[k] = vb;
  }
}

void VectorOptimizer::apply(Vector& params, const Vector& gradient) {
  if (params.size() != gradient.size()) throw ShapeError("gradient length does not match parameters");
  if (!gradient.allFinite()) throw NumericError("refusing to apply a non-finite gradient");
  Vector g = gradient;
  if (config_.max_grad_norm > 0.0) {
    const double norm = g.norm();
    if (norm > config_.max_grad_norm) g *= config_.max_grad_norm / norm;
  }
  ++steps_;
  Matrix m = m_, v = v_;
  adam_update(params, g, m, v, steps_, config_);
  m_ = m;
  v_ = v;
}

void sync_target(const DenseNetwork& net, TargetCopy& target) {
  target.snapshot = net;
  target.staleness = 0;
}

void save_network(std::ostream& out, const DenseNetwork& net) {
  out << "dmac-network " << kCheckpointVersion << '\n';
  out << "seed " << net.seed() << '\n';
  out << "sizes " << net.sizes().size();
  for (int s : net.sizes()) out << ' ' << s;
  out << "\nactivations";
  for (const auto& layer : net.layers()) out << ' ' << activation_name(layer.activation);
  const auto params = net.flat_parameters();
  out << "\nparameters " << params.size() << '\n';
  const auto flags = out.flags();
  out << std::hexfloat;
  for (std::size_t i = 0; i < params.size(); ++i) out << params[i] << ((i + 1) % 8 == 0 ? '\n' : ' ');
  out.flags(flags);
  out << "\nend-network\n";
}

DenseNetwork load_network(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "dmac-network") throw IoError("not a network checkpoint");
  if (version != kCheckpointVersion)
    throw IoError("unsupported network checkpoint version " + std::to_string(version));
  std::uint64_t seed = 0;
  std::size_t count = 0;
  if (!(in >> tag >> seed) || tag != "seed") throw IoError("checkpoint missing seed");
  if (!(in >> tag >> count) || tag != "sizes" || count < 2) throw IoError("checkpoint missing sizes");
  std::vector<int> sizes(count);
  for (auto& s : sizes)
    if (!(in >> s)) throw IoError("truncated sizes");
  in >> tag;
  if (tag != "activations") throw IoError("checkpoint missing activations");
  std::vector<Activation> acts(count - 1);
  for (auto& a : acts) {
    in >> tag;
    a = parse_activation(tag);
  }
  std::size_t n_params = 0;
  if (!(in >> tag >> n_params) || tag != "parameters") throw IoError("checkpoint missing parameters");
  std::vector<double> params(n_params);
  for (auto& p : params) {
    if (!(in >> tag)) throw IoError("truncated parameters");
    p = std::strtod(tag.c_str(), nullptr);
  }
  if (!(in >> tag) || tag != "end-network") throw IoError("checkpoint missing terminator");

  std::vector<Layer> layers;
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    Layer layer;
    layer.weight = Matrix::Zero(sizes[k + 1], sizes[k]);
    layer.bias = Vector::Zero(sizes[k + 1]);
    layer.activation = acts[k];
    layers.push_back(std::move(layer));
  }
  DenseNetwork net = DenseNetwork::from_layers(std::move(layers), seed);
  net.set_flat_parameters(params);
  return net;
}

}  // namespace dmac::nn
