#include "ssr/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

namespace ssr {

BipartiteGraph build_graph(const InteractionTable& table, std::size_t n_users,
                           std::size_t n_items) {
  if (table.records.empty()) throw DataError("build_graph: empty interaction table");
  for (std::size_t i = 0; i < table.records.size(); ++i) {
    const auto& r = table.records[i];
    if (r.user >= n_users)
      throw DataError("build_graph: record " + std::to_string(i) + " user id " +
                      std::to_string(r.user) + " out of range");
    if (r.item >= n_items)
      throw DataError("build_graph: record " + std::to_string(i) + " item id " +
                      std::to_string(r.item) + " out of range");
  }

  std::set<std::pair<std::size_t, std::size_t>> edges;
  for (const auto& r : table.records) edges.emplace(r.user, r.item);

  const std::size_t n = n_users + n_items;
  std::vector<std::tuple<std::size_t, std::size_t, double>> triplets;
  triplets.reserve(edges.size() * 2);
  for (const auto& [u, v] : edges) {
    triplets.emplace_back(u, n_users + v, 1.0);
    triplets.emplace_back(n_users + v, u, 1.0);
  }

  BipartiteGraph g;
  g.n_users = n_users;
  g.n_items = n_items;
  g.adjacency = SparseSymmetricMatrix::from_triplets(n, triplets);
  g.degrees.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.degrees[i] = g.adjacency.row_sum(i);
  return g;
}

SparseSymmetricMatrix normalized_laplacian(const BipartiteGraph& g) {
  const std::size_t n = g.n_nodes();
  std::string isolated;
  for (std::size_t i = 0; i < n; ++i) {
    if (g.degrees[i] <= 0.0) {
      if (!isolated.empty()) isolated += ",";
      isolated += std::to_string(i);
    }
  }
  if (!isolated.empty())
    throw DataError("normalized_laplacian: zero-degree nodes [" + isolated + "]");

  const auto& adj = g.adjacency;
  std::vector<std::tuple<std::size_t, std::size_t, double>> triplets;
  triplets.reserve(adj.nnz() + n);
  for (std::size_t i = 0; i < n; ++i) {
    triplets.emplace_back(i, i, 1.0);
    for (std::size_t k = adj.row_offsets()[i]; k < adj.row_offsets()[i + 1]; ++k) {
      std::size_t j = adj.col_indices()[k];
      double w = -adj.values()[k] / std::sqrt(g.degrees[i] * g.degrees[j]);
      triplets.emplace_back(i, j, w);
    }
  }
  return SparseSymmetricMatrix::from_triplets(n, triplets);
}

Eigen::MatrixXd propagate_features(const BipartiteGraph& g, const Eigen::MatrixXd& item_features) {
  if (static_cast<std::size_t>(item_features.rows()) != g.n_items)
    throw DataError("propagate_features: feature rows " + std::to_string(item_features.rows()) +
                    " != n_items " + std::to_string(g.n_items));
  const std::size_t n = g.n_nodes();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), item_features.cols());
  out.bottomRows(static_cast<Eigen::Index>(g.n_items)) = item_features;

  const auto& adj = g.adjacency;
  for (std::size_t u = 0; u < g.n_users; ++u) {
    double deg = 0.0;
    for (std::size_t k = adj.row_offsets()[u]; k < adj.row_offsets()[u + 1]; ++k) {
      std::size_t item = adj.col_indices()[k] - g.n_users;
      out.row(static_cast<Eigen::Index>(u)) +=
          adj.values()[k] * item_features.row(static_cast<Eigen::Index>(item));
      deg += adj.values()[k];
    }
    if (deg > 0.0) out.row(static_cast<Eigen::Index>(u)) /= deg;
  }
  return out;
}

}  // namespace ssr
