#include "ssr/objective.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ssr/error.hpp"

namespace ssr {

double bce_loss(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DataError("bce_loss: length mismatch");
  if (scores.empty()) throw DataError("bce_loss: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw DataError("bce_loss: label at " + std::to_string(i) + " not in {0,1}");
    double p = std::clamp(scores[i], 1e-7, 1.0 - 1e-7);
    acc -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return acc / static_cast<double>(scores.size());
}

double sbm_consistency_loss(const std::vector<double>& full_scores,
                            const std::vector<double>& masked_scores) {
  if (full_scores.size() != masked_scores.size())
    throw DataError("sbm_consistency_loss: length mismatch");
  if (full_scores.empty()) throw DataError("sbm_consistency_loss: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < full_scores.size(); ++i) {
    double d = full_scores[i] - masked_scores[i];
    acc += d * d;
  }
  return acc / static_cast<double>(full_scores.size());
}

ScrPlan make_scr_plan(const std::vector<std::size_t>& item_batch, std::size_t n_bands,
                      std::size_t negatives_per_positive, std::size_t n_items, Rng& rng) {
  std::set<std::size_t> unique(item_batch.begin(), item_batch.end());
  if (unique.size() < 2) throw DataError("scr: batch needs at least 2 distinct items");
  std::vector<std::size_t> anchors(unique.begin(), unique.end());

  // one band per anchor
  std::vector<std::vector<std::size_t>> by_band(n_bands);
  for (std::size_t a : anchors) by_band[n_bands > 1 ? uniform_index(rng, n_bands) : 0].push_back(a);

  const std::size_t n_same = negatives_per_positive / 2;
  const std::size_t n_other = negatives_per_positive - n_same;
  auto pick_modality = [&]() { return uniform_index(rng, 2) == 0 ? "img" : "txt"; };

  ScrPlan plan;
  plan.total_anchors = anchors.size();
  plan.negatives_per_anchor = negatives_per_positive;
  for (std::size_t m = 0; m < n_bands; ++m) {
    if (by_band[m].empty()) continue;
    ScrGroup group;
    group.band = m;
    group.anchors = by_band[m];
    // same-band negatives: other items, either modality
    const std::size_t same_slots = n_bands > 1 ? n_same : negatives_per_positive;
    for (std::size_t s = 0; s < same_slots; ++s) {
      ScrSlot slot;
      slot.modality = pick_modality();
      slot.band = m;
      for (std::size_t a : group.anchors) {
        std::size_t v = uniform_index(rng, n_items);
        while (v == a) v = uniform_index(rng, n_items);
        slot.items.push_back(v);
      }
      group.slots.push_back(std::move(slot));
    }
    // other-band negatives: any item, either modality
    const std::size_t other_slots = n_bands > 1 ? n_other : 0;
    for (std::size_t s = 0; s < other_slots; ++s) {
      ScrSlot slot;
      slot.modality = pick_modality();
      std::size_t b = uniform_index(rng, n_bands - 1);
      slot.band = b >= m ? b + 1 : b;
      for (std::size_t i = 0; i < group.anchors.size(); ++i)
        slot.items.push_back(uniform_index(rng, n_items));
      group.slots.push_back(std::move(slot));
    }
    plan.groups.push_back(std::move(group));
  }
  return plan;
}

namespace {

Eigen::VectorXd normalized_row(const Eigen::MatrixXd& m, std::size_t row) {
  Eigen::VectorXd v = m.row(static_cast<Eigen::Index>(row));
  double n = v.norm();
  if (n > 1e-12) return v / n;
  return Eigen::VectorXd::Zero(v.size());
}

std::size_t stack_index(const BandStack& stack, const std::string& modality, std::size_t band) {
  for (std::size_t i = 0; i < stack.band_axis_map.size(); ++i)
    if (stack.band_axis_map[i].first == modality && stack.band_axis_map[i].second == band + 1)
      return i;
  throw DataError("scr: stack has no component (" + modality + ", " + std::to_string(band + 1) +
                  ")");
}

}  // namespace

double scr_loss_from_plan(const BandStack& stack, const ScrPlan& plan, double tau,
                          std::size_t n_users) {
  if (tau <= 0.0) throw DataError("scr: temperature must be positive");
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& group : plan.groups) {
    const auto& img = stack.components[stack_index(stack, "img", group.band)];
    const auto& txt = stack.components[stack_index(stack, "txt", group.band)];
    for (std::size_t i = 0; i < group.anchors.size(); ++i) {
      const std::size_t row = n_users + group.anchors[i];
      Eigen::VectorXd a = normalized_row(img, row);
      Eigen::VectorXd p = normalized_row(txt, row);
      std::vector<double> sims{a.dot(p)};
      for (const auto& slot : group.slots) {
        const auto& src = stack.components[stack_index(stack, slot.modality, slot.band)];
        sims.push_back(a.dot(normalized_row(src, n_users + slot.items[i])));
      }
      double mx = *std::max_element(sims.begin(), sims.end()) / tau;
      double denom = 0.0;
      for (double s : sims) denom += std::exp(s / tau - mx);
      acc += mx + std::log(denom) - sims[0] / tau;
      ++count;
    }
  }
  if (count == 0) throw DataError("scr: empty plan");
  return acc / static_cast<double>(count);
}

double scr_loss(const BandStack& stack, const std::vector<std::size_t>& item_batch,
                std::size_t negatives_per_positive, double tau, std::size_t n_users, Rng& rng) {
  if (tau <= 0.0) throw DataError("scr: temperature must be positive");
  const std::size_t n_items = stack.n_nodes - n_users;
  ScrPlan plan = make_scr_plan(item_batch, stack.n_bands_per_modality, negatives_per_positive,
                               n_items, rng);
  return scr_loss_from_plan(stack, plan, tau, n_users);
}

LossBreakdown total_loss(double bce, double sbm, double scr, double lambda, double eta,
                         double tau) {
  if (lambda < 0.0 || eta < 0.0) throw DataError("total_loss: weights must be nonnegative");
  LossBreakdown b;
  b.bce = bce;
  b.sbm = sbm;
  b.scr = scr;
  b.lambda = lambda;
  b.eta = eta;
  b.tau = tau;
  b.total = bce + lambda * sbm + eta * scr;
  return b;
}

// ---------------------------------------------------------------------------

ValueId bce_from_logits(Tape& tape, ValueId logits, const std::vector<int>& labels) {
  const Tensor& s = tape.value(logits);
  if (s.rank() != 1 || s.shape[0] != labels.size())
    throw DataError("bce_from_logits: logit/label shape mismatch");
  const std::size_t n = labels.size();
  Tensor y({n});
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw DataError("bce_from_logits: label at " + std::to_string(i) + " not in {0,1}");
    y.data[i] = static_cast<double>(labels[i]);
  }
  // softplus(s) = logsumexp([0, s]) per element
  ValueId zero_col = tape.constant(Tensor({n, 1}));
  ValueId s_col = tape.reshape(logits, {n, 1});
  ValueId softplus = tape.logsumexp(tape.concat({zero_col, s_col}, 1));
  ValueId ones = tape.constant(Tensor::full({n}, 1.0));
  ValueId sum_sp = tape.contract(softplus, ones, "i,i->");
  ValueId sum_ys = tape.contract(logits, tape.constant(std::move(y)), "i,i->");
  ValueId diff = tape.add(sum_sp, tape.mul(sum_ys, tape.constant(Tensor::scalar(-1.0))));
  return tape.mul(diff, tape.constant(Tensor::scalar(1.0 / static_cast<double>(n))));
}

ValueId sbm_from_scores(Tape& tape, ValueId full_scores, ValueId masked_scores) {
  if (tape.value(full_scores).shape != tape.value(masked_scores).shape)
    throw DataError("sbm_from_scores: shape mismatch");
  const auto n = static_cast<double>(tape.value(full_scores).size());
  ValueId diff = tape.add(full_scores,
                          tape.mul(masked_scores, tape.constant(Tensor::scalar(-1.0))));
  return tape.mul(tape.squared_norm(diff), tape.constant(Tensor::scalar(1.0 / n)));
}

ValueId scr_from_plan_taped(Tape& tape, const std::vector<ValueId>& bands,
                            const std::vector<std::pair<std::string, std::size_t>>& band_axis_map,
                            const ScrPlan& plan, double tau, std::size_t n_users) {
  if (tau <= 0.0) throw DataError("scr: temperature must be positive");
  auto band_node = [&](const std::string& modality, std::size_t band) -> ValueId {
    for (std::size_t i = 0; i < band_axis_map.size(); ++i)
      if (band_axis_map[i].first == modality && band_axis_map[i].second == band + 1)
        return bands[i];
    throw DataError("scr: no band component (" + modality + ", " + std::to_string(band + 1) + ")");
  };

  ValueId inv_tau = tape.constant(Tensor::scalar(1.0 / tau));
  std::vector<ValueId> group_losses;
  std::size_t total = 0;
  for (const auto& group : plan.groups) {
    std::vector<std::size_t> rows(group.anchors.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = n_users + group.anchors[i];
    ValueId a_img = tape.row_normalize(tape.gather(band_node("img", group.band), rows));
    ValueId a_txt = tape.row_normalize(tape.gather(band_node("txt", group.band), rows));
    ValueId pos = tape.contract(a_img, a_txt, "nd,nd->n");
    const std::size_t ng = rows.size();
    std::vector<ValueId> sims{tape.reshape(pos, {ng, 1})};
    for (const auto& slot : group.slots) {
      std::vector<std::size_t> neg_rows(slot.items.size());
      for (std::size_t i = 0; i < neg_rows.size(); ++i) neg_rows[i] = n_users + slot.items[i];
      ValueId neg = tape.row_normalize(tape.gather(band_node(slot.modality, slot.band), neg_rows));
      sims.push_back(tape.reshape(tape.contract(a_img, neg, "nd,nd->n"), {ng, 1}));
    }
    ValueId scaled = tape.mul(tape.concat(sims, 1), inv_tau);
    ValueId lse = tape.logsumexp(scaled);  // {ng}
    ValueId pos_scaled = tape.mul(pos, inv_tau);
    ValueId loss = tape.add(lse, tape.mul(pos_scaled, tape.constant(Tensor::scalar(-1.0))));
    group_losses.push_back(loss);
    total += ng;
  }
  if (group_losses.empty()) throw DataError("scr: empty plan");
  ValueId all = group_losses.size() == 1 ? group_losses[0] : tape.concat(group_losses, 0);
  ValueId ones = tape.constant(Tensor::full({total}, 1.0));
  ValueId sum = tape.contract(all, ones, "i,i->");
  return tape.mul(sum, tape.constant(Tensor::scalar(1.0 / static_cast<double>(total))));
}

}  // namespace ssr
