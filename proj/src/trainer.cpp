#include "ssr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>

namespace ssr {

void TrainConfig::validate() const {
  if (mask_rate < 0.0 || mask_rate >= 1.0) throw DataError("config: pi must be in [0,1)");
  if (lambda_sbm < 0.0 || eta_scr < 0.0) throw DataError("config: loss weights must be >= 0");
  if (tau <= 0.0) throw DataError("config: tau must be positive");
  if (lr < 0.0) throw DataError("config: lr must be >= 0");
  if (batch_size == 0) throw DataError("config: batch_size must be positive");
  if (model.dim == 0 || model.bands == 0 || model.cp_rank == 0)
    throw DataError("config: d, M and r must be positive");
  if (max_epochs == 0) throw DataError("config: max_epochs must be positive");
}

SplitSpec chronological_split(const InteractionTable& table, std::size_t n_users, double r_train,
                              double r_val, double r_test) {
  (void)r_train;
  std::vector<std::vector<std::size_t>> per_user(n_users);
  for (std::size_t i = 0; i < table.records.size(); ++i)
    per_user[table.records[i].user].push_back(i);

  SplitSpec split;
  for (std::size_t u = 0; u < n_users; ++u) {
    auto& idx = per_user[u];
    if (idx.empty()) continue;
    // time order; ties keep input file order (stable on the original index)
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return table.records[a].timestamp < table.records[b].timestamp;
    });
    const std::size_t n = idx.size();
    std::size_t n_test, n_val;
    if (n < 3) {
      // degenerate users (below the 5-core floor): all but the last two to
      // train, keeping at least one train interaction
      std::size_t n_train = std::max<std::size_t>(n >= 2 ? n - 2 : n, 1);
      std::size_t rest = n - n_train;
      n_test = rest >= 1 ? 1 : 0;
      n_val = rest >= 2 ? rest - 1 : 0;
    } else {
      n_test = static_cast<std::size_t>(std::lround(static_cast<double>(n) * r_test));
      n_val = static_cast<std::size_t>(std::lround(static_cast<double>(n) * r_val));
      while (n_test + n_val + 1 > n) {  // train keeps >= 1
        if (n_test >= n_val && n_test > 0)
          --n_test;
        else if (n_val > 0)
          --n_val;
      }
    }
    const std::size_t n_train = n - n_val - n_test;
    for (std::size_t i = 0; i < n; ++i) {
      if (i < n_train)
        split.train.push_back(idx[i]);
      else if (i < n_train + n_val)
        split.val.push_back(idx[i]);
      else
        split.test.push_back(idx[i]);
    }
  }
  return split;
}

bool sample_negative(const std::set<std::size_t>& user_train_items, std::size_t n_items, Rng& rng,
                     std::size_t& out_item) {
  if (user_train_items.size() >= n_items) return false;
  for (;;) {
    std::size_t v = uniform_index(rng, n_items);
    if (!user_train_items.count(v)) {
      out_item = v;
      return true;
    }
  }
}

void adam_step(ParamStore& params, const GradStore& grads, AdamState& state, double lr) {
  if (state.first_moment.empty()) {
    for (const auto& name : params.names()) {
      state.first_moment.emplace(name, Tensor(params.get(name).shape));
      state.second_moment.emplace(name, Tensor(params.get(name).shape));
    }
  }
  state.step++;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& name : params.names()) {
    Tensor& p = params.get(name);
    const Tensor& g = grads.at(name);
    Tensor& m = state.first_moment.at(name);
    Tensor& v = state.second_moment.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
      v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

std::optional<std::size_t> early_stop_check(const std::vector<double>& history,
                                            std::size_t patience) {
  if (history.empty()) throw DataError("early_stop_check: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i)
    if (history[i] > history[best]) best = i;  // ties keep the earliest
  if (history.size() - 1 - best >= patience) return best;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const InteractionTable& table, std::size_t n_users, std::size_t n_items,
                 const Eigen::MatrixXd& item_img, const Eigen::MatrixXd& item_txt,
                 TrainConfig config)
    : cfg_(std::move(config)), table_(table), n_users_(n_users), n_items_(n_items) {
  cfg_.validate();
  epoch_rng_.seed(derive_seed(cfg_.seed, 1));
  mask_rng_.seed(derive_seed(cfg_.seed, 2));
  neg_rng_.seed(derive_seed(cfg_.seed, 3));
  scr_rng_.seed(derive_seed(cfg_.seed, 4));
  split_ = chronological_split(table, n_users);

  for (std::size_t i : split_.train) train_table_.records.push_back(table.records[i]);
  if (!cfg_.train_only_graph) train_table_ = table;
  graph_ = build_graph(train_table_, n_users, n_items);

  EigendecomposeOptions eopts;
  eopts.dense_limit = cfg_.dense_limit;
  eopts.seed = cfg_.seed;
  SparseSymmetricMatrix laplacian = normalized_laplacian(graph_);
  spectrum_ = graph_.n_nodes() <= cfg_.dense_limit
                  ? eigendecompose_full(laplacian, eopts)
                  : eigendecompose_truncated(laplacian, cfg_.k_trunc, eopts);

  Eigen::MatrixXd img, txt;
  if (cfg_.model.use_modalities) {
    img = propagate_features(graph_, item_img);
    txt = propagate_features(graph_, item_txt);
  }
  ModelConfig mc = cfg_.model;
  mc.seed = cfg_.seed;
  model_ = std::make_unique<SsrModel>(graph_, spectrum_, std::move(img), std::move(txt), mc);

  train_items_.assign(n_users_, {});
  train_counts_.assign(n_users_, 0);
  for (std::size_t i : split_.train) {
    train_items_[table.records[i].user].insert(table.records[i].item);
    train_counts_[table.records[i].user]++;
  }
}

std::vector<std::set<std::size_t>> Trainer::relevant_by_user(
    const std::vector<std::size_t>& indices) const {
  std::vector<std::set<std::size_t>> rel(n_users_);
  for (std::size_t i : indices) rel[table_.records[i].user].insert(table_.records[i].item);
  return rel;
}

LossBreakdown Trainer::train_epoch() {
  std::vector<std::size_t> order = split_.train;
  std::shuffle(order.begin(), order.end(), epoch_rng_);

  const bool with_sbm = cfg_.lambda_sbm > 0.0 && cfg_.mask_rate > 0.0;
  const bool with_scr = cfg_.eta_scr > 0.0 && cfg_.model.use_modalities;

  double sum_bce = 0.0, sum_sbm = 0.0, sum_scr = 0.0, sum_total = 0.0;
  std::size_t count = 0;
  std::size_t batch_index = 0;

  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size, ++batch_index) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<int> labels;
    std::vector<std::size_t> batch_items;
    for (std::size_t i = start; i < end; ++i) {
      const auto& rec = table_.records[order[i]];
      pairs.emplace_back(rec.user, rec.item);
      labels.push_back(1);
      batch_items.push_back(rec.item);
      for (std::size_t nn = 0; nn < cfg_.negatives_per_positive; ++nn) {
        std::size_t neg;
        if (!sample_negative(train_items_[rec.user], n_items_, neg_rng_, neg)) {
          std::cerr << "warning: user " << rec.user << " has interacted with every item; skipped\n";
          continue;
        }
        pairs.emplace_back(rec.user, neg);
        labels.push_back(0);
      }
    }
    if (pairs.empty()) continue;

    Tape tape;
    auto fwd = model_->forward(tape);
    ValueId logits = model_->pair_logits(tape, fwd.head.embeddings, pairs);
    ValueId loss = bce_from_logits(tape, logits, labels);
    const double bce_v = tape.value(loss).data[0];

    double sbm_v = 0.0;
    if (with_sbm) {
      ValueId full_scores = tape.sigmoid(logits);
      std::vector<ValueId> sbm_terms;
      for (std::size_t s = 0; s < cfg_.sbm_samples; ++s) {
        MaskSample mask = sample_band_mask(model_->extended_bands(), cfg_.mask_rate, mask_rng_);
        ValueId masked_stack = model_->assemble_stack(tape, fwd.bands, &mask);
        auto masked_head = model_->head(tape, masked_stack);
        ValueId masked_logits = model_->pair_logits(tape, masked_head.embeddings, pairs);
        sbm_terms.push_back(sbm_from_scores(tape, full_scores, tape.sigmoid(masked_logits)));
      }
      ValueId sbm = sbm_terms[0];
      for (std::size_t s = 1; s < sbm_terms.size(); ++s) sbm = tape.add(sbm, sbm_terms[s]);
      if (sbm_terms.size() > 1)
        sbm = tape.mul(sbm, tape.constant(Tensor::scalar(1.0 / double(sbm_terms.size()))));
      sbm_v = tape.value(sbm).data[0];
      loss = tape.add(loss, tape.mul(sbm, tape.constant(Tensor::scalar(cfg_.lambda_sbm))));
    }

    double scr_v = 0.0;
    if (with_scr) {
      std::set<std::size_t> unique_items(batch_items.begin(), batch_items.end());
      if (unique_items.size() >= 2) {
        ScrPlan plan = make_scr_plan(batch_items, cfg_.model.bands, cfg_.scr_negatives, n_items_,
                                     scr_rng_);
        ValueId scr = scr_from_plan_taped(tape, fwd.bands, model_->band_axis_map(), plan,
                                          cfg_.tau, n_users_);
        scr_v = tape.value(scr).data[0];
        loss = tape.add(loss, tape.mul(scr, tape.constant(Tensor::scalar(cfg_.eta_scr))));
      }
    }

    const double total_v = tape.value(loss).data[0];
    if (!std::isfinite(total_v)) {
      throw NumericError("train_epoch: non-finite loss at batch " + std::to_string(batch_index) +
                         " (bce=" + std::to_string(bce_v) + " sbm=" + std::to_string(sbm_v) +
                         " scr=" + std::to_string(scr_v) + ")");
    }

    GradStore grads = tape.backward(loss, model_->params());
    adam_step(model_->params(), grads, adam_, cfg_.lr);

    const auto bn = static_cast<double>(end - start);
    sum_bce += bce_v * bn;
    sum_sbm += sbm_v * bn;
    sum_scr += scr_v * bn;
    sum_total += total_v * bn;
    count += end - start;
  }

  if (count == 0) throw DataError("train_epoch: no training interactions");
  const auto cn = static_cast<double>(count);
  LossBreakdown agg = total_loss(sum_bce / cn, sum_sbm / cn, sum_scr / cn, cfg_.lambda_sbm,
                                 cfg_.eta_scr, cfg_.tau);
  agg.total = sum_total / cn;
  return agg;
}

RankingMetrics Trainer::evaluate(const std::vector<std::size_t>& split_indices,
                                 const std::vector<std::size_t>& ks,
                                 const std::vector<std::size_t>* user_subset) const {
  Tensor emb = model_->node_embeddings();
  auto relevant = relevant_by_user(split_indices);
  return evaluate_ranking(emb, n_users_, n_items_, train_items_, relevant, ks, user_subset);
}

TrainOutcome Trainer::run(const std::function<void(const EpochLog&)>& on_epoch) {
  TrainOutcome outcome;
  std::vector<double> val_history;
  GradStore best_params;
  for (std::size_t epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    LossBreakdown loss = train_epoch();
    RankingMetrics val = evaluate(split_.val, {20});
    const auto t1 = std::chrono::steady_clock::now();

    EpochLog log;
    log.epoch = epoch;
    log.loss = loss;
    log.val_recall20 = val.recall.at(20);
    log.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    outcome.history.push_back(log);
    if (on_epoch) on_epoch(log);

    val_history.push_back(log.val_recall20);
    if (outcome.best_epoch == 0 || log.val_recall20 > outcome.best_val_recall20) {
      outcome.best_epoch = epoch;
      outcome.best_val_recall20 = log.val_recall20;
      best_params.clear();
      for (const auto& name : model_->params().names())
        best_params.emplace(name, model_->params().get(name));
    }
    if (early_stop_check(val_history, cfg_.patience).has_value()) break;
  }
  // restore the best checkpointed parameters
  for (const auto& name : model_->params().names())
    model_->params().get(name) = best_params.at(name);
  epochs_done_ = outcome.history.size();
  return outcome;
}

}  // namespace ssr
