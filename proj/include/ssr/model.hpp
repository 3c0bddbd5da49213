#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssr/autodiff.hpp"
#include "ssr/graph.hpp"
#include "ssr/rng.hpp"
#include "ssr/spectral.hpp"

namespace ssr {

struct ModelConfig {
  std::size_t dim = 64;          // shared embedding dim d
  std::size_t bands = 4;         // M
  std::size_t cp_rank = 8;       // r
  std::size_t gate_hidden = 32;  // gate MLP hidden width
  double leaky_slope = 0.01;
  bool use_modalities = true;
  bool shared_partition = false;   // one partition across modalities
  std::string gate_mode = "degree";  // degree | constant
  std::uint64_t seed = 42;
};

/// Bernoulli band mask; at least one band is always kept.
struct MaskSample {
  std::vector<std::uint8_t> gamma;
  double rate = 0.0;

  bool all_ones() const {
    for (auto g : gamma)
      if (!g) return false;
    return true;
  }
};

/// gamma_b ~ Bernoulli(1 - rate); an all-zero draw is resampled (8 retries)
/// and finally repaired by force-keeping one uniformly chosen band.
MaskSample sample_band_mask(std::size_t n_bands, double rate, Rng& rng);

/// Zeroes masked components; topology and kept bands are untouched.
BandStack apply_band_mask(const BandStack& stack, const MaskSample& mask);

// --- reusable taped pipeline pieces -----------------------------------------

/// Factored CP kernel application, never materializing the B^2 kernels:
/// q_i = sum_n Wk[n,i] x^(n); Z^(m) = sum_i Wq[m,i] (V^(i) q_i).
ValueId hsno_apply(Tape& tape, ValueId stack, ValueId wq, ValueId wk, ValueId cores);

struct GateResult {
  ValueId h;     // N x B x d
  ValueId gate;  // N x B, in (0,1)
};

/// H^(b) = phi(W Z^(b)) * sigmoid(a_b * dtil + b_b), phi = leaky rectifier.
GateResult graph_gate_apply(Tape& tape, ValueId z, ValueId w_out, ValueId gate_a, ValueId gate_b,
                            ValueId dtil, double slope);

struct FuseResult {
  ValueId z;      // N x d
  ValueId alpha;  // N x B, softmax rows
};

/// alpha = softmax(MLP([id_emb, band stats])); z = sum_b alpha_b H^(b).
FuseResult fuse_bands_apply(Tape& tape, ValueId h, ValueId id_emb, ValueId stats, ValueId w1,
                            ValueId b1, ValueId w2, ValueId b2, std::size_t dim, std::size_t bands,
                            double slope);

// -----------------------------------------------------------------------------

/// Holds parameters plus the frozen spectral layout (partitions are computed
/// once from the initial signals and stay fixed for the model's lifetime).
class SsrModel {
 public:
  /// img/txt are propagated modality features (N x d_c); empty when
  /// use_modalities is false.
  SsrModel(const BipartiteGraph& graph, const Spectrum& spectrum, Eigen::MatrixXd img,
           Eigen::MatrixXd txt, ModelConfig cfg);

  /// Restores a model around checkpointed partitions instead of recomputing
  /// them from the initial parameters.
  SsrModel(const BipartiteGraph& graph, const Spectrum& spectrum, Eigen::MatrixXd img,
           Eigen::MatrixXd txt, ModelConfig cfg,
           const std::map<std::string, BandPartition>& partitions);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const std::vector<std::string>& modalities() const { return modalities_; }
  std::size_t extended_bands() const { return modalities_.size() * cfg_.bands; }
  std::size_t n_users() const { return n_users_; }
  std::size_t n_items() const { return n_items_; }
  std::size_t n_nodes() const { return n_users_ + n_items_; }
  const std::map<std::string, BandPartition>& partitions() const { return partitions_; }
  const std::vector<std::pair<std::string, std::size_t>>& band_axis_map() const {
    return band_axis_map_;
  }

  /// Modality-major band components of the current parameters (one tape node
  /// per extended band, unmasked).
  std::vector<ValueId> band_components(Tape& tape) const;

  /// Stacks components into N x B x d, zeroing masked bands.
  ValueId assemble_stack(Tape& tape, const std::vector<ValueId>& bands,
                         const MaskSample* mask) const;

  /// Per-node band-energy fractions of a stack value. Treated as a constant
  /// input downstream (no gradient flows through the statistics).
  Tensor band_stats(const Tensor& stack_value) const;

  struct Head {
    ValueId embeddings;  // N x d
    ValueId alpha;       // N x B
    ValueId gate;        // N x B
  };

  /// HSNO -> graph gate -> semantic fusion. `fixed_stats` overrides the
  /// stats computed from the stack (used by gradient checks).
  Head head(Tape& tape, ValueId stack, const Tensor* fixed_stats = nullptr) const;

  struct Forward {
    std::vector<ValueId> bands;
    ValueId stack;
    Head head;
  };

  /// Full pipeline: project -> band stack -> (mask) -> hsno -> gate -> fuse.
  Forward forward(Tape& tape, const MaskSample* mask = nullptr,
                  const Tensor* fixed_stats = nullptr) const;

  /// Plain evaluation of the final embeddings (no mask).
  Tensor node_embeddings() const;

  /// sigma(z_u . z_v) for (user, item) pairs; item indices are offset
  /// internally by n_users.
  ValueId pair_logits(Tape& tape, ValueId embeddings,
                      const std::vector<std::pair<std::size_t, std::size_t>>& pairs) const;

  std::vector<double> score_pairs(const Tensor& embeddings,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& pairs) const;

  /// Current projected signals (plain), keyed by modality.
  std::vector<std::pair<std::string, Eigen::MatrixXd>> projected_signals() const;

  /// Decomposition of the current signals over the frozen partitions.
  BandStack current_band_stack() const;

  const Eigen::VectorXd& degree_feature() const { return dtil_; }

 private:
  void init_params();
  void build_constants(const BipartiteGraph& graph);
  void freeze_partitions();

  ModelConfig cfg_;
  std::size_t n_users_ = 0;
  std::size_t n_items_ = 0;
  const Spectrum* spectrum_ = nullptr;
  Eigen::MatrixXd raw_img_, raw_txt_;  // propagated, N x d_c
  std::vector<std::string> modalities_;
  std::map<std::string, BandPartition> partitions_;
  std::vector<std::pair<std::string, std::size_t>> band_axis_map_;

  ParamStore params_;
  Eigen::VectorXd dtil_;

  // tape constants (stable storage referenced by constant_view)
  Tensor c_ut_;                                  // K x N
  Tensor c_u_;                                   // N x K
  std::map<std::string, std::vector<Tensor>> c_u_band_;  // per modality, per band N x k_m
  Tensor c_img_, c_txt_;                         // N x d_c
  Tensor c_dtil_;                                // N
};

}  // namespace ssr
