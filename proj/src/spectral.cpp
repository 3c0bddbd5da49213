#include "ssr/spectral.hpp"

#include <algorithm>
#include <cmath>

#include "ssr/rng.hpp"

namespace ssr {

namespace {

// Deterministic sign convention: largest-magnitude entry of each column is
// made positive (first index wins ties).
void fix_signs(Eigen::MatrixXd& vectors) {
  for (Eigen::Index c = 0; c < vectors.cols(); ++c) {
    Eigen::Index best = 0;
    double best_abs = -1.0;
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
      double a = std::abs(vectors(r, c));
      if (a > best_abs) {
        best_abs = a;
        best = r;
      }
    }
    if (vectors(best, c) < 0.0) vectors.col(c) = -vectors.col(c);
  }
}

Eigen::MatrixXd to_dense(const SparseSymmetricMatrix& m) {
  const auto n = static_cast<Eigen::Index>(m.n());
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < m.n(); ++i)
    for (std::size_t k = m.row_offsets()[i]; k < m.row_offsets()[i + 1]; ++k)
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m.col_indices()[k])) =
          m.values()[k];
  return d;
}

Eigen::VectorXd random_unit_vector(std::size_t n, Rng& rng) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = gaussian(rng);
  double nrm = v.norm();
  if (nrm == 0.0) v.setOnes();
  return v / v.norm();
}

}  // namespace

Spectrum eigendecompose_full(const SparseSymmetricMatrix& laplacian,
                             const EigendecomposeOptions& opts) {
  const std::size_t n = laplacian.n();
  if (n > opts.dense_limit)
    throw DataError("eigendecompose: N=" + std::to_string(n) + " exceeds dense_limit " +
                    std::to_string(opts.dense_limit) + "; use truncated mode");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(to_dense(laplacian));
  if (solver.info() != Eigen::Success)
    throw NumericError("eigendecompose: dense symmetric solver failed");
  Spectrum s;
  s.eigenvalues = solver.eigenvalues();
  s.eigenvectors = solver.eigenvectors();
  fix_signs(s.eigenvectors);
  s.truncated = false;
  s.residual_projector_present = false;
  return s;
}

Spectrum eigendecompose_truncated(const SparseSymmetricMatrix& laplacian, std::size_t k,
                                  const EigendecomposeOptions& opts) {
  const std::size_t n = laplacian.n();
  if (k == 0) throw DataError("eigendecompose: k must be positive");
  k = std::min(k, n);
  const std::size_t max_m = std::min(n, std::max(k + 2, opts.max_iter_factor * k));

  Rng rng(derive_seed(opts.seed, 0x1a2c));
  std::vector<Eigen::VectorXd> basis;
  std::vector<double> alphas, betas;
  basis.push_back(random_unit_vector(n, rng));

  auto reorthogonalize = [&](Eigen::VectorXd& w) {
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& v : basis) w -= v.dot(w) * v;
  };

  Eigen::VectorXd theta;
  Eigen::MatrixXd tvecs;
  bool converged = false;
  double last_beta = 0.0;

  auto solve_tridiagonal = [&](std::size_t m) {
    Eigen::VectorXd diag(static_cast<Eigen::Index>(m));
    Eigen::VectorXd sub(std::max<Eigen::Index>(static_cast<Eigen::Index>(m) - 1, 0));
    for (std::size_t i = 0; i < m; ++i) diag(static_cast<Eigen::Index>(i)) = alphas[i];
    for (std::size_t i = 0; i + 1 < m; ++i) sub(static_cast<Eigen::Index>(i)) = betas[i];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
    solver.computeFromTridiagonal(diag, sub);
    theta = solver.eigenvalues();
    tvecs = solver.eigenvectors();
  };

  while (basis.size() <= max_m) {
    const std::size_t j = alphas.size();
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    laplacian.multiply(basis[j].data(), w.data());
    if (j > 0) w -= betas[j - 1] * basis[j - 1];
    double alpha = basis[j].dot(w);
    w -= alpha * basis[j];
    reorthogonalize(w);
    alphas.push_back(alpha);
    double beta = w.norm();
    last_beta = beta;

    const std::size_t m = alphas.size();
    const bool at_cap = m == max_m || m == n;
    if (m >= k && (m % 16 == 0 || at_cap || beta < 1e-13)) {
      solve_tridiagonal(m);
      if (m == n) {
        converged = true;  // full Krylov space is exact
      } else {
        converged = true;
        for (std::size_t i = 0; i < k; ++i) {
          double resid = std::abs(beta * tvecs(static_cast<Eigen::Index>(m - 1),
                                               static_cast<Eigen::Index>(i)));
          if (resid > opts.tol * std::max(1.0, std::abs(theta(static_cast<Eigen::Index>(i))))) {
            converged = false;
            break;
          }
        }
      }
      if (converged || at_cap) break;
    }
    if (at_cap) {
      if (theta.size() == 0) solve_tridiagonal(m);
      break;
    }

    if (beta < 1e-13) {
      // invariant subspace found; restart with a fresh orthogonal direction
      if (basis.size() >= n) {
        solve_tridiagonal(alphas.size());
        converged = true;
        break;
      }
      Eigen::VectorXd v = random_unit_vector(n, rng);
      reorthogonalize(v);
      double nrm = v.norm();
      while (nrm < 1e-8) {
        v = random_unit_vector(n, rng);
        reorthogonalize(v);
        nrm = v.norm();
      }
      betas.push_back(0.0);
      basis.push_back(v / nrm);
    } else {
      betas.push_back(beta);
      basis.push_back(w / beta);
    }
  }

  const std::size_t m = alphas.size();
  if (!converged) {
    std::string msg = "eigendecompose: Lanczos did not converge after " + std::to_string(m) +
                      " iterations; residuals:";
    for (std::size_t i = 0; i < k; ++i)
      msg += " " + std::to_string(std::abs(last_beta * tvecs(static_cast<Eigen::Index>(m - 1),
                                                             static_cast<Eigen::Index>(i))));
    throw NumericError(msg);
  }

  Spectrum s;
  s.eigenvalues.resize(static_cast<Eigen::Index>(k));
  s.eigenvectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    s.eigenvalues(static_cast<Eigen::Index>(i)) = theta(static_cast<Eigen::Index>(i));
    Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < m; ++j)
      u += tvecs(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) * basis[j];
    s.eigenvectors.col(static_cast<Eigen::Index>(i)) = u.normalized();
  }
  fix_signs(s.eigenvectors);
  s.truncated = k < n;
  s.residual_projector_present = s.truncated;
  return s;
}

Eigen::MatrixXd gft_forward(const Spectrum& spectrum, const Eigen::MatrixXd& signal) {
  if (static_cast<std::size_t>(signal.rows()) != spectrum.n_nodes())
    throw DataError("gft_forward: signal rows " + std::to_string(signal.rows()) +
                    " != nodes " + std::to_string(spectrum.n_nodes()));
  return spectrum.eigenvectors.transpose() * signal;
}

Eigen::VectorXd band_energies(const Eigen::MatrixXd& coeffs) {
  return coeffs.rowwise().squaredNorm();
}

BandPartition partition_bands(const Eigen::VectorXd& energies, std::size_t n_bands,
                              bool residual) {
  const std::size_t k = static_cast<std::size_t>(energies.size());
  if (n_bands == 0) throw DataError("partition_bands: band count must be positive");
  if (k < n_bands)
    throw DataError("partition_bands: " + std::to_string(k) + " modes < " +
                    std::to_string(n_bands) + " bands");

  BandPartition p;
  p.n_bands = n_bands;
  p.boundaries.assign(n_bands + 1, 0);
  p.boundaries[n_bands] = k;
  p.residual_in_last = residual;

  const double total = energies.sum();
  if (total <= 0.0) {
    // degenerate signal: equal-count bands
    p.zero_energy_fallback = true;
    for (std::size_t m = 1; m < n_bands; ++m) p.boundaries[m] = m * k / n_bands;
  } else {
    double cum = 0.0;
    std::size_t idx = 0;
    for (std::size_t m = 1; m < n_bands; ++m) {
      const std::size_t limit = k - (n_bands - m);  // leave >= 1 mode per remaining band
      const double target = static_cast<double>(m) * total / static_cast<double>(n_bands);
      do {
        cum += energies(static_cast<Eigen::Index>(idx));
        ++idx;
      } while (idx < limit && cum < target);
      p.boundaries[m] = idx;
    }
  }

  p.band_energy.assign(n_bands, 0.0);
  for (std::size_t m = 0; m < n_bands; ++m)
    for (std::size_t i = p.boundaries[m]; i < p.boundaries[m + 1]; ++i)
      p.band_energy[m] += energies(static_cast<Eigen::Index>(i));
  return p;
}

Eigen::MatrixXd reconstruct_band(const Spectrum& spectrum, const Eigen::MatrixXd& coeffs,
                                 const BandPartition& partition, std::size_t band,
                                 const Eigen::MatrixXd* original) {
  if (band >= partition.n_bands)
    throw DataError("reconstruct_band: band " + std::to_string(band) + " out of range");
  const auto b0 = static_cast<Eigen::Index>(partition.band_begin(band));
  const auto len = static_cast<Eigen::Index>(partition.band_size(band));
  Eigen::MatrixXd x = spectrum.eigenvectors.middleCols(b0, len) * coeffs.middleRows(b0, len);
  if (band + 1 == partition.n_bands && partition.residual_in_last &&
      spectrum.residual_projector_present) {
    if (original == nullptr)
      throw DataError("reconstruct_band: residual band requires the original signal");
    x += *original - spectrum.eigenvectors * coeffs;
  }
  return x;
}

BandDecomposition build_band_stack(
    const std::vector<std::pair<std::string, Eigen::MatrixXd>>& signals, const Spectrum& spectrum,
    std::size_t n_bands, bool shared_partition) {
  if (signals.empty()) throw DataError("build_band_stack: no signals");
  const std::size_t n = spectrum.n_nodes();
  const auto d = signals.front().second.cols();
  for (const auto& [name, x] : signals) {
    if (static_cast<std::size_t>(x.rows()) != n || x.cols() != d)
      throw DataError("build_band_stack: signal '" + name + "' has shape " +
                      std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
  }

  BandDecomposition out;
  out.stack.n_nodes = n;
  out.stack.n_bands_per_modality = n_bands;
  out.stack.dim = static_cast<std::size_t>(d);

  std::vector<Eigen::MatrixXd> coeffs;
  coeffs.reserve(signals.size());
  Eigen::VectorXd shared_energy;
  for (const auto& [name, x] : signals) {
    coeffs.push_back(gft_forward(spectrum, x));
    Eigen::VectorXd e = band_energies(coeffs.back());
    if (shared_partition)
      shared_energy = shared_energy.size() ? Eigen::VectorXd(shared_energy + e) : e;
    out.total_energy[name] = x.squaredNorm();
  }

  for (std::size_t s = 0; s < signals.size(); ++s) {
    const auto& name = signals[s].first;
    const Eigen::VectorXd energy =
        shared_partition ? shared_energy : band_energies(coeffs[s]);
    BandPartition part =
        partition_bands(energy, n_bands, spectrum.residual_projector_present);
    out.stack.modalities.push_back(name);
    for (std::size_t m = 0; m < n_bands; ++m) {
      out.stack.components.push_back(
          reconstruct_band(spectrum, coeffs[s], part, m, &signals[s].second));
      out.stack.band_axis_map.emplace_back(name, m + 1);
    }
    out.partitions.emplace(name, std::move(part));
  }
  return out;
}

}  // namespace ssr
