#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ssr/evaluator.hpp"
#include "ssr/graph.hpp"
#include "ssr/model.hpp"
#include "ssr/objective.hpp"
#include "ssr/spectral.hpp"

namespace ssr {

struct TrainConfig {
  ModelConfig model;                      // d, M, r, gate settings, init seed
  double mask_rate = 0.2;                 // pi
  double lambda_sbm = 0.01;
  double eta_scr = 0.01;
  double tau = 0.2;
  double lr = 1e-3;
  std::size_t batch_size = 2048;          // positives per batch
  std::size_t negatives_per_positive = 1;
  std::size_t scr_negatives = 8;
  std::size_t sbm_samples = 1;            // mask samples per batch
  std::size_t max_epochs = 1000;
  std::size_t patience = 20;
  std::size_t dense_limit = 4096;
  std::size_t k_trunc = 256;
  std::uint64_t seed = 42;
  bool train_only_graph = true;  // spectrum/Laplacian from the train split only

  void validate() const;
};

/// Per-user chronological split indices into the interaction table.
struct SplitSpec {
  std::vector<std::size_t> train, val, test;
};

/// Per-user, in time order: val/test sizes are round(n*ratio), train takes
/// the remainder and always keeps at least one interaction.
SplitSpec chronological_split(const InteractionTable& table, std::size_t n_users,
                              double r_train = 0.8, double r_val = 0.1, double r_test = 0.1);

/// Uniform rejection sampling against the user's train set. Returns false
/// when the user has interacted with every item (caller skips with warning).
bool sample_negative(const std::set<std::size_t>& user_train_items, std::size_t n_items, Rng& rng,
                     std::size_t& out_item);

struct AdamState {
  GradStore first_moment;
  GradStore second_moment;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_step(ParamStore& params, const GradStore& grads, AdamState& state, double lr);

/// continue -> nullopt; stop -> best epoch index (0-based) once the best
/// validation value is at least `patience` entries old.
std::optional<std::size_t> early_stop_check(const std::vector<double>& history,
                                            std::size_t patience);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  LossBreakdown loss;
  double val_recall20 = 0.0;
  double wall_ms = 0.0;
};

struct TrainOutcome {
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;   // 1-based
  double best_val_recall20 = 0.0;
};

/// Owns the split, train graph, spectrum, propagated features and model.
class Trainer {
 public:
  Trainer(const InteractionTable& table, std::size_t n_users, std::size_t n_items,
          const Eigen::MatrixXd& item_img, const Eigen::MatrixXd& item_txt, TrainConfig config);

  const SplitSpec& split() const { return split_; }
  const BipartiteGraph& train_graph() const { return graph_; }
  const Spectrum& spectrum() const { return spectrum_; }
  SsrModel& model() { return *model_; }
  const SsrModel& model() const { return *model_; }
  const TrainConfig& config() const { return cfg_; }

  const std::vector<std::set<std::size_t>>& train_items_by_user() const { return train_items_; }
  const std::vector<std::size_t>& train_counts() const { return train_counts_; }
  std::vector<std::set<std::size_t>> relevant_by_user(const std::vector<std::size_t>& indices) const;

  /// One pass over the training positives; returns the sample-weighted mean
  /// loss breakdown. Aborts with NumericError on a non-finite loss.
  LossBreakdown train_epoch();

  RankingMetrics evaluate(const std::vector<std::size_t>& split_indices,
                          const std::vector<std::size_t>& ks,
                          const std::vector<std::size_t>* user_subset = nullptr) const;

  /// Full loop: validate every epoch on Recall@20, keep the best parameters,
  /// stop early after `patience` non-improving validations.
  TrainOutcome run(const std::function<void(const EpochLog&)>& on_epoch = nullptr);

 private:
  TrainConfig cfg_;
  const InteractionTable& table_;
  std::size_t n_users_, n_items_;
  SplitSpec split_;
  InteractionTable train_table_;
  BipartiteGraph graph_;
  Spectrum spectrum_;
  std::unique_ptr<SsrModel> model_;
  AdamState adam_;
  Rng epoch_rng_, mask_rng_, neg_rng_, scr_rng_;
  std::vector<std::set<std::size_t>> train_items_;
  std::vector<std::size_t> train_counts_;
  std::size_t epochs_done_ = 0;
};

}  // namespace ssr
