#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssr/sparse.hpp"

namespace ssr {

struct Interaction {
  std::size_t user = 0;
  std::size_t item = 0;
  std::int64_t timestamp = 0;
};

/// Dense-indexed interaction records. Users and items are separate index
/// spaces; dedup keeps the earliest timestamp per (user, item) pair.
struct InteractionTable {
  std::vector<Interaction> records;
};

/// Undirected user-item bipartite graph over N = n_users + n_items nodes.
/// Node layout: users occupy [0, n_users), items [n_users, N).
struct BipartiteGraph {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  SparseSymmetricMatrix adjacency;
  std::vector<double> degrees;

  std::size_t n_nodes() const { return n_users + n_items; }
  std::size_t item_node(std::size_t item) const { return n_users + item; }
};

/// One undirected unit edge per distinct (user, item) pair.
BipartiteGraph build_graph(const InteractionTable& table, std::size_t n_users,
                           std::size_t n_items);

/// L = I - D^{-1/2} A D^{-1/2}. Rejects zero-degree nodes.
SparseSymmetricMatrix normalized_laplacian(const BipartiteGraph& g);

/// Copies item feature rows into item node rows and fills each user row with
/// the degree-normalized mean of its adjacent items' features.
Eigen::MatrixXd propagate_features(const BipartiteGraph& g, const Eigen::MatrixXd& item_features);

}  // namespace ssr
