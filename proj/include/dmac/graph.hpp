#pragma once

#include <span>
#include <vector>

#include "dmac/env.hpp"
#include "dmac/nn.hpp"

namespace dmac::graph {

using nn::Matrix;
using nn::Vector;

inline constexpr int kDefaultEmbeddingDim = 8;
inline constexpr int kDefaultIterations = 2;
inline constexpr double kDefaultMinWeight = 1.0;

struct Edge {
  int to = 0;
  double weight = 1.0;
};

// Undirected weighted graph over the team. Weights are clamped distances.
struct AgentGraph {
  std::vector<Vector> attributes;
  std::vector<std::vector<Edge>> neighbors;  // sorted by `to`

  int size() const { return static_cast<int>(attributes.size()); }
  bool has_edge(int u, int v) const;
  // Throws std::out_of_range when (u, v) is not an edge.
  double weight(int u, int v) const;
};

struct GraphOptions {
  double radius = 1.0;
  double min_weight = kDefaultMinWeight;
  bool fully_connected = false;

  bool operator==(const GraphOptions&) const = default;
};

// Edges join pairs within `radius`; w(u,v) = max(distance, min_weight).
// Agents flagged inactive in `active` (if non-empty) get no edges.
AgentGraph build_graph(std::span<const Vector> attributes, const env::DistanceTable& distances,
                       const GraphOptions& options, const std::vector<bool>& active = {});
AgentGraph build_graph(const env::Environment& environment, const GraphOptions& options);

struct EmbeddingTable {
  std::vector<Vector> rows;
  int iteration = 0;

  int size() const { return static_cast<int>(rows.size()); }
  int dim() const { return rows.empty() ? 0 : static_cast<int>(rows.front().size()); }
  bool operator==(const EmbeddingTable& other) const;
};

// e^0_v: the vertex attributes, zero-padded or truncated to `dim`.
EmbeddingTable init_embeddings(const AgentGraph& graph, int dim = kDefaultEmbeddingDim);

// K synchronous rounds of e_v <- e_v + mean_{u in N(v)} e_u / w(u,v).
// An empty neighborhood contributes the zero vector.
EmbeddingTable aggregate(const AgentGraph& graph, EmbeddingTable table, int iterations);

// h_i = o_i followed by e_i. With `use_embedding` false, h_i = o_i.
std::vector<Vector> features(std::span<const Vector> observations, const EmbeddingTable& table,
                             bool use_embedding = true);
int feature_dim(int observation_dim, int embedding_dim, bool use_embedding = true);

struct FeatureOptions {
  GraphOptions graph;
  int embedding_dim = kDefaultEmbeddingDim;
  int iterations = kDefaultIterations;
  bool use_embedding = true;

  bool operator==(const FeatureOptions&) const = default;
};

// Builds the graph from the current state and returns h for every agent.
std::vector<Vector> extract(const env::Environment& environment, std::span<const Vector> observations,
                            const FeatureOptions& options);

}  // namespace dmac::graph
