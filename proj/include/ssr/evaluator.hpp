#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "ssr/model.hpp"
#include "ssr/spectral.hpp"
#include "ssr/tensor.hpp"

namespace ssr {

struct RankingMetrics {
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
  std::size_t n_users_evaluated = 0;
};

/// Items the user has not seen in training, sorted by score descending with
/// ties broken by ascending item index.
std::vector<std::size_t> full_rank_scores(const Tensor& embeddings, std::size_t n_users,
                                          std::size_t n_items, std::size_t user,
                                          const std::set<std::size_t>& train_items);

double recall_at_k(const std::vector<std::size_t>& ranking, const std::set<std::size_t>& relevant,
                   std::size_t k);

/// Binary relevance, 1/log2(rank+1) discount, ranks starting at 1.
double ndcg_at_k(const std::vector<std::size_t>& ranking, const std::set<std::size_t>& relevant,
                 std::size_t k);

/// Mean metrics over users with at least one relevant item; optionally
/// restricted to a user subset.
RankingMetrics evaluate_ranking(const Tensor& embeddings, std::size_t n_users, std::size_t n_items,
                                const std::vector<std::set<std::size_t>>& train_items,
                                const std::vector<std::set<std::size_t>>& relevant_items,
                                const std::vector<std::size_t>& ks,
                                const std::vector<std::size_t>* user_subset = nullptr);

/// Users with at most `threshold` train interactions.
std::vector<std::size_t> cold_start_filter(const std::vector<std::size_t>& train_counts,
                                           std::size_t threshold = 5);

/// Per original band: pairwise distances between per-modality item centers.
/// Matrices are modality x modality, symmetric with zero diagonal.
struct CenterDistances {
  std::vector<std::string> modalities;
  std::vector<Eigen::MatrixXd> per_band;
};

CenterDistances modality_center_distances(const BandStack& stack, std::size_t n_users,
                                          const std::string& metric = "euclidean");

struct GateExportRow {
  std::size_t user = 0;
  std::size_t band = 0;  // extended band, 1-based
  double alpha = 0.0;
  bool cold = false;
};

/// One row per user x extended band with the fused softmax gate weight.
std::vector<GateExportRow> gate_distribution_export(const Tensor& alpha, std::size_t n_users,
                                                    const std::vector<std::size_t>& users,
                                                    const std::set<std::size_t>& cold_users);

}  // namespace ssr
