#include "dmac/graph.hpp"

#include <algorithm>
#include <stdexcept>

#include "dmac/errors.hpp"

namespace dmac::graph {

bool AgentGraph::has_edge(int u, int v) const {
  const auto& row = neighbors.at(u);
  return std::any_of(row.begin(), row.end(), [v](const Edge& e) { return e.to == v; });
}

double AgentGraph::weight(int u, int v) const {
  for (const auto& e : neighbors.at(u))
    if (e.to == v) return e.weight;
  throw std::out_of_range("no edge between the given vertices");
}

AgentGraph build_graph(std::span<const Vector> attributes, const env::DistanceTable& distances,
                       const GraphOptions& options, const std::vector<bool>& active) {
  const int n = static_cast<int>(attributes.size());
  if (n < 2) throw std::invalid_argument("a graph needs at least two agents");
  if (distances.rows() != n || distances.cols() != n) throw ShapeError("distance table does not match agent count");
  if (!active.empty() && static_cast<int>(active.size()) != n) throw ShapeError("activity flags do not match");
  if (!(options.min_weight > 0.0)) throw std::invalid_argument("min_weight must be positive");

  AgentGraph g;
  g.attributes.assign(attributes.begin(), attributes.end());
  g.neighbors.resize(n);
  for (int u = 0; u < n; ++u) {
    for (int v = u + 1; v < n; ++v) {
      if (!active.empty() && (!active[u] || !active[v])) continue;
      const double d = distances(u, v);
      if (!options.fully_connected && d > options.radius + 1e-9) continue;
      const double w = std::max(d, options.min_weight);
      g.neighbors[u].push_back({v, w});
      g.neighbors[v].push_back({u, w});
    }
  }
  for (auto& row : g.neighbors)
    std::sort(row.begin(), row.end(), [](const Edge& a, const Edge& b) { return a.to < b.to; });
  return g;
}

AgentGraph build_graph(const env::Environment& environment, const GraphOptions& options) {
  return build_graph(environment.state().attributes, environment.distances(), options, environment.active());
}

bool EmbeddingTable::operator==(const EmbeddingTable& other) const {
  if (iteration != other.iteration || rows.size() != other.rows.size()) return false;
  for (std::size_t i = 0; i < rows.size(); ++i)
    if (rows[i].size() != other.rows[i].size() || rows[i] != other.rows[i]) return false;
  return true;
}

EmbeddingTable init_embeddings(const AgentGraph& graph, int dim) {
  if (dim <= 0) throw std::invalid_argument("embedding dimension must be positive");
  EmbeddingTable t;
  t.rows.reserve(graph.size());
  for (const auto& a : graph.attributes) {
    Vector e = Vector::Zero(dim);
    const Eigen::Index m = std::min<Eigen::Index>(dim, a.size());
    e.head(m) = a.head(m);
    t.rows.push_back(std::move(e));
  }
  return t;
}

EmbeddingTable aggregate(const AgentGraph& graph, EmbeddingTable table, int iterations) {
  if (iterations < 0) throw std::invalid_argument("iteration count must be non-negative");
  if (table.size() != graph.size()) throw ShapeError("embedding table does not match graph");
  for (int k = 0; k < iterations; ++k) {
    std::vector<Vector> next(table.rows.size());
    for (int v = 0; v < graph.size(); ++v) {
      const auto& row = graph.neighbors[v];
      next[v] = table.rows[v];
      if (row.empty()) continue;
      Vector acc = Vector::Zero(table.dim());
      for (const auto& e : row) acc += table.rows[e.to] / e.weight;
      next[v] += acc / static_cast<double>(row.size());
    }
    table.rows = std::move(next);
    ++table.iteration;
  }
  return table;
}

int feature_dim(int observation_dim, int embedding_dim, bool use_embedding) {
  return observation_dim + (use_embedding ? embedding_dim : 0);
}

std::vector<Vector> features(std::span<const Vector> observations, const EmbeddingTable& table, bool use_embedding) {
  if (use_embedding && static_cast<int>(observations.size()) != table.size())
    throw ShapeError("observations and embeddings cover different agents");
  std::vector<Vector> h(observations.size());
  for (std::size_t i = 0; i < observations.size(); ++i) {
    if (!use_embedding) {
      h[i] = observations[i];
      continue;
    }
    const auto& o = observations[i];
    const auto& e = table.rows[i];
    h[i].resize(o.size() + e.size());
    h[i].head(o.size()) = o;
    h[i].tail(e.size()) = e;
  }
  return h;
}

std::vector<Vector> extract(const env::Environment& environment, std::span<const Vector> observations,
                            const FeatureOptions& options) {
  if (!options.use_embedding) return features(observations, EmbeddingTable{}, false);
  const AgentGraph g = build_graph(environment, options.graph);
  return features(observations, aggregate(g, init_embeddings(g, options.embedding_dim), options.iterations), true);
}

}  // namespace dmac::graph
