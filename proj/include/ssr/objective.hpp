#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssr/autodiff.hpp"
#include "ssr/rng.hpp"
#include "ssr/spectral.hpp"

namespace ssr {

struct LossBreakdown {
  double bce = 0.0;
  double sbm = 0.0;
  double scr = 0.0;
  double total = 0.0;
  double lambda = 0.0;
  double eta = 0.0;
  double tau = 0.0;
};

/// Mean binary cross-entropy over probability scores (clamped to
/// [1e-7, 1-1e-7]). Labels must be 0/1.
double bce_loss(const std::vector<double>& scores, const std::vector<int>& labels);

/// Mean squared difference between the full-view and masked-view score
/// vectors of the same mini-batch.
double sbm_consistency_loss(const std::vector<double>& full_scores,
                            const std::vector<double>& masked_scores);

/// A sampled negative slot: every anchor in the group draws its negative from
/// the same (modality, band) source; items are per-anchor.
struct ScrSlot {
  std::string modality;
  std::size_t band = 0;  // 0-based
  std::vector<std::size_t> items;
};

/// Anchors sharing a band: positive pairs are (img, txt) components of each
/// anchor item at this band.
struct ScrGroup {
  std::size_t band = 0;
  std::vector<std::size_t> anchors;  // item ids
  std::vector<ScrSlot> slots;
};

struct ScrPlan {
  std::vector<ScrGroup> groups;
  std::size_t total_anchors = 0;
  std::size_t negatives_per_anchor = 0;
};

/// One band per anchor; negatives split evenly between same-band/other-item
/// draws and other-band draws, each from either modality.
ScrPlan make_scr_plan(const std::vector<std::size_t>& item_batch, std::size_t n_bands,
                      std::size_t negatives_per_positive, std::size_t n_items, Rng& rng);

/// InfoNCE over cosine similarities with the positive term included in the
/// denominator; zero-norm vectors contribute similarity 0.
double scr_loss_from_plan(const BandStack& stack, const ScrPlan& plan, double tau,
                          std::size_t n_users);

/// Samples a plan from the (deduplicated) item batch and evaluates it.
double scr_loss(const BandStack& stack, const std::vector<std::size_t>& item_batch,
                std::size_t negatives_per_positive, double tau, std::size_t n_users, Rng& rng);

LossBreakdown total_loss(double bce, double sbm, double scr, double lambda, double eta,
                         double tau);

// --- taped variants (same math, differentiable) ------------------------------

/// BCE from pre-sigmoid logits: mean(softplus(s) - y*s).
ValueId bce_from_logits(Tape& tape, ValueId logits, const std::vector<int>& labels);

/// Mean squared difference of two sigmoid score vectors.
ValueId sbm_from_scores(Tape& tape, ValueId full_scores, ValueId masked_scores);

/// SCR over the tape's band component nodes (unmasked view).
ValueId scr_from_plan_taped(Tape& tape, const std::vector<ValueId>& bands,
                            const std::vector<std::pair<std::string, std::size_t>>& band_axis_map,
                            const ScrPlan& plan, double tau, std::size_t n_users);

}  // namespace ssr
