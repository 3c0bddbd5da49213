#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ssr/sparse.hpp"

namespace ssr {

/// Eigenpairs of the normalized Laplacian, eigenvalues ascending.
/// In truncated mode only the K smallest pairs are retained and the
/// residual projector I - U U^T stands in for the discarded spectrum.
struct Spectrum {
  Eigen::VectorXd eigenvalues;   // K, ascending
  Eigen::MatrixXd eigenvectors;  // N x K, column-orthonormal
  bool truncated = false;
  bool residual_projector_present = false;

  std::size_t n_nodes() const { return static_cast<std::size_t>(eigenvectors.rows()); }
  std::size_t n_modes() const { return static_cast<std::size_t>(eigenvalues.size()); }
};

struct EigendecomposeOptions {
  std::size_t dense_limit = 4096;
  double tol = 1e-8;
  std::size_t max_iter_factor = 10;  // Lanczos iteration cap = factor * K
  std::uint64_t seed = 42;
};

/// Full mode: dense symmetric solver over all N modes (N <= dense_limit).
Spectrum eigendecompose_full(const SparseSymmetricMatrix& laplacian,
                             const EigendecomposeOptions& opts = {});

/// Truncated mode: Lanczos with full reorthogonalization for the K
/// smallest-eigenvalue pairs; sets the residual flag.
Spectrum eigendecompose_truncated(const SparseSymmetricMatrix& laplacian, std::size_t k,
                                  const EigendecomposeOptions& opts = {});

/// X_hat = U^T X.
Eigen::MatrixXd gft_forward(const Spectrum& spectrum, const Eigen::MatrixXd& signal);

/// E_k = ||row k of X_hat||^2.
Eigen::VectorXd band_energies(const Eigen::MatrixXd& coeffs);

/// Contiguous equal-energy partition of the retained modes.
struct BandPartition {
  std::size_t n_bands = 0;
  std::vector<std::size_t> boundaries;  // n_bands + 1 entries, 0 ... K
  std::vector<double> band_energy;      // per band, retained modes only
  bool residual_in_last = false;        // truncated spectra: band M also applies I - U U^T
  bool zero_energy_fallback = false;    // all-zero energies fell back to equal-count bands

  std::size_t band_begin(std::size_t m) const { return boundaries[m]; }
  std::size_t band_end(std::size_t m) const { return boundaries[m + 1]; }
  std::size_t band_size(std::size_t m) const { return boundaries[m + 1] - boundaries[m]; }
};

/// Greedy cumulative sweep: band m closes at the first mode index where the
/// cumulative energy reaches m/M of the total, always leaving at least one
/// mode for every remaining band.
BandPartition partition_bands(const Eigen::VectorXd& energies, std::size_t n_bands,
                              bool residual);

/// X^{(m)} = sum_{k in F_m} u_k x_hat_k^T; the last band of a truncated
/// spectrum additionally receives (I - U U^T) X.
Eigen::MatrixXd reconstruct_band(const Spectrum& spectrum, const Eigen::MatrixXd& coeffs,
                                 const BandPartition& partition, std::size_t band,
                                 const Eigen::MatrixXd* original = nullptr);

/// Band-stacked signals: per-node, per extended band (modality-major), per
/// feature dim. band_axis_map[b] = (modality, band index 1..M).
struct BandStack {
  std::size_t n_nodes = 0;
  std::size_t n_bands_per_modality = 0;
  std::size_t dim = 0;
  std::vector<std::string> modalities;                        // stacking order
  std::vector<std::pair<std::string, std::size_t>> band_axis_map;
  std::vector<Eigen::MatrixXd> components;                    // B matrices, N x d

  std::size_t extended_bands() const { return components.size(); }
  std::size_t flat_index(std::size_t modality_idx, std::size_t band) const {
    return modality_idx * n_bands_per_modality + band;
  }
};

struct BandDecomposition {
  BandStack stack;
  std::map<std::string, BandPartition> partitions;
  std::map<std::string, double> total_energy;  // ||X||_F^2 per modality
};

/// Decomposes each modality signal over the shared spectrum with its own
/// energy-based partition (or a shared partition over summed energies).
BandDecomposition build_band_stack(const std::vector<std::pair<std::string, Eigen::MatrixXd>>& signals,
                                   const Spectrum& spectrum, std::size_t n_bands,
                                   bool shared_partition = false);

}  // namespace ssr
