#include "ssr/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssr/parallel.hpp"

namespace ssr {

std::vector<std::size_t> full_rank_scores(const Tensor& embeddings, std::size_t n_users,
                                          std::size_t n_items, std::size_t user,
                                          const std::set<std::size_t>& train_items) {
  const std::size_t d = embeddings.shape[1];
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(n_items - train_items.size());
  for (std::size_t v = 0; v < n_items; ++v) {
    if (train_items.count(v)) continue;
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k)
      dot += embeddings.at(user, k) * embeddings.at(n_users + v, k);
    scored.emplace_back(dot, v);  // sigma is monotone; ranking by the dot is identical
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  std::vector<std::size_t> out(scored.size());
  for (std::size_t i = 0; i < scored.size(); ++i) out[i] = scored[i].second;
  return out;
}

double recall_at_k(const std::vector<std::size_t>& ranking, const std::set<std::size_t>& relevant,
                   std::size_t k) {
  if (k == 0) throw DataError("recall_at_k: k must be >= 1");
  if (relevant.empty()) throw DataError("recall_at_k: empty relevant set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
    if (relevant.count(ranking[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double ndcg_at_k(const std::vector<std::size_t>& ranking, const std::set<std::size_t>& relevant,
                 std::size_t k) {
  if (k == 0) throw DataError("ndcg_at_k: k must be >= 1");
  if (relevant.empty()) throw DataError("ndcg_at_k: empty relevant set");
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranking.size()); ++i)
    if (relevant.count(ranking[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  double idcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, relevant.size()); ++i)
    idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return dcg / idcg;
}

RankingMetrics evaluate_ranking(const Tensor& embeddings, std::size_t n_users, std::size_t n_items,
                                const std::vector<std::set<std::size_t>>& train_items,
                                const std::vector<std::set<std::size_t>>& relevant_items,
                                const std::vector<std::size_t>& ks,
                                const std::vector<std::size_t>* user_subset) {
  std::vector<std::size_t> users;
  if (user_subset) {
    users = *user_subset;
  } else {
    users.resize(n_users);
    std::iota(users.begin(), users.end(), 0);
  }

  struct PerUser {
    bool counted = false;
    std::vector<double> recall, ndcg;
  };
  std::vector<PerUser> rows(users.size());
  parallel_for(0, users.size(), [&](std::size_t i) {
    const std::size_t u = users[i];
    if (relevant_items[u].empty()) return;
    auto ranking = full_rank_scores(embeddings, n_users, n_items, u, train_items[u]);
    rows[i].counted = true;
    for (std::size_t k : ks) {
      rows[i].recall.push_back(recall_at_k(ranking, relevant_items[u], k));
      rows[i].ndcg.push_back(ndcg_at_k(ranking, relevant_items[u], k));
    }
  });

  RankingMetrics metrics;
  std::vector<double> rsum(ks.size(), 0.0), nsum(ks.size(), 0.0);
  for (const auto& row : rows) {
    if (!row.counted) continue;
    metrics.n_users_evaluated++;
    for (std::size_t j = 0; j < ks.size(); ++j) {
      rsum[j] += row.recall[j];
      nsum[j] += row.ndcg[j];
    }
  }
  for (std::size_t j = 0; j < ks.size(); ++j) {
    const double n = std::max<double>(1.0, static_cast<double>(metrics.n_users_evaluated));
    metrics.recall[ks[j]] = rsum[j] / n;
    metrics.ndcg[ks[j]] = nsum[j] / n;
  }
  return metrics;
}

std::vector<std::size_t> cold_start_filter(const std::vector<std::size_t>& train_counts,
                                           std::size_t threshold) {
  std::vector<std::size_t> out;
  for (std::size_t u = 0; u < train_counts.size(); ++u)
    if (train_counts[u] <= threshold) out.push_back(u);
  return out;
}

CenterDistances modality_center_distances(const BandStack& stack, std::size_t n_users,
                                          const std::string& metric) {
  if (metric != "euclidean" && metric != "cosine")
    throw DataError("center distances: metric must be 'euclidean' or 'cosine'");
  CenterDistances out;
  out.modalities = stack.modalities;
  const std::size_t n_mod = stack.modalities.size();
  const auto n_items = static_cast<Eigen::Index>(stack.n_nodes - n_users);

  for (std::size_t m = 0; m < stack.n_bands_per_modality; ++m) {
    std::vector<Eigen::VectorXd> centers;
    for (std::size_t c = 0; c < n_mod; ++c) {
      const auto& comp = stack.components[stack.flat_index(c, m)];
      centers.push_back(comp.bottomRows(n_items).colwise().mean());
    }
    Eigen::MatrixXd dist = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_mod),
                                                 static_cast<Eigen::Index>(n_mod));
    for (std::size_t i = 0; i < n_mod; ++i) {
      for (std::size_t j = i + 1; j < n_mod; ++j) {
        double d;
        if (metric == "euclidean") {
          d = (centers[i] - centers[j]).norm();
        } else {
          double ni = centers[i].norm(), nj = centers[j].norm();
          d = (ni > 1e-12 && nj > 1e-12)
                  ? 1.0 - centers[i].dot(centers[j]) / (ni * nj)
                  : 0.0;
        }
        dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = d;
        dist(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = d;
      }
    }
    out.per_band.push_back(std::move(dist));
  }
  return out;
}

std::vector<GateExportRow> gate_distribution_export(const Tensor& alpha, std::size_t n_users,
                                                    const std::vector<std::size_t>& users,
                                                    const std::set<std::size_t>& cold_users) {
  (void)n_users;
  const std::size_t b = alpha.shape[1];
  std::vector<GateExportRow> rows;
  rows.reserve(users.size() * b);
  for (std::size_t u : users) {
    const bool cold = cold_users.count(u) != 0;
    for (std::size_t j = 0; j < b; ++j)
      rows.push_back({u, j + 1, alpha.at(u, j), cold});
  }
  return rows;
}

}  // namespace ssr
