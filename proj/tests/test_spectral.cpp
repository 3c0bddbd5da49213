#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssr/graph.hpp"
#include "ssr/spectral.hpp"
#include "test_util.hpp"

using namespace ssr;

namespace {

SparseSymmetricMatrix two_node_laplacian() {
  return SparseSymmetricMatrix::from_triplets(
      2, {{0, 0, 1.0}, {0, 1, -1.0}, {1, 0, -1.0}, {1, 1, 1.0}});
}

// Independent oracle: the greedy boundary is, by definition, the smallest
// close index reaching the cumulative quantile. Enumerate candidates.
std::vector<std::size_t> greedy_boundaries_oracle(const Eigen::VectorXd& e, std::size_t m_bands) {
  const std::size_t k = static_cast<std::size_t>(e.size());
  const double total = e.sum();
  std::vector<std::size_t> bounds{0};
  for (std::size_t m = 1; m < m_bands; ++m) {
    const double target = static_cast<double>(m) * total / static_cast<double>(m_bands);
    const std::size_t limit = k - (m_bands - m);
    std::size_t chosen = limit;
    for (std::size_t cand = bounds.back() + 1; cand <= limit; ++cand) {
      double cum = 0.0;
      for (std::size_t i = 0; i < cand; ++i) cum += e(static_cast<Eigen::Index>(i));
      if (cum >= target) {
        chosen = cand;
        break;
      }
    }
    bounds.push_back(chosen);
  }
  bounds.push_back(k);
  return bounds;
}

}  // namespace

TEST_CASE("two-node Laplacian eigenpairs in closed form") {
  Spectrum s = eigendecompose_full(two_node_laplacian());
  CHECK(s.eigenvalues(0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(s.eigenvalues(1) == doctest::Approx(2.0));
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  // sign convention: largest-magnitude entry positive
  CHECK(std::abs(s.eigenvectors(0, 0)) == doctest::Approx(inv_sqrt2));
  CHECK(std::abs(s.eigenvectors(1, 1)) == doctest::Approx(inv_sqrt2));
  CHECK(s.eigenvectors(0, 0) * s.eigenvectors(1, 0) > 0);  // [1,1] direction
  CHECK(s.eigenvectors(0, 1) * s.eigenvectors(1, 1) < 0);  // [1,-1] direction
}

TEST_CASE("identity test matrix: orthonormal basis returned") {
  auto eye = SparseSymmetricMatrix::from_triplets(
      4, {{0, 0, 1.0}, {1, 1, 1.0}, {2, 2, 1.0}, {3, 3, 1.0}});
  Spectrum s = eigendecompose_full(eye);
  for (int i = 0; i < 4; ++i) CHECK(s.eigenvalues(i) == doctest::Approx(1.0));
  Eigen::MatrixXd gram = s.eigenvectors.transpose() * s.eigenvectors;
  CHECK((gram - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("dense_limit guard rejects oversized full decompositions") {
  Rng rng(3);
  BipartiteGraph g = testutil::random_graph(6, 5, 0.3, rng);
  EigendecomposeOptions opts;
  opts.dense_limit = 4;
  CHECK_THROWS_WITH_AS(eigendecompose_full(normalized_laplacian(g), opts),
                       doctest::Contains("truncated"), DataError);
}

TEST_CASE("truncated Lanczos matches the dense solver on a random 50-node graph") {
  Rng rng(17);
  BipartiteGraph g = testutil::random_graph(30, 20, 0.15, rng);
  SparseSymmetricMatrix l = normalized_laplacian(g);
  Spectrum full = eigendecompose_full(l);
  Spectrum trunc = eigendecompose_truncated(l, 10);
  CHECK(trunc.truncated);
  CHECK(trunc.residual_projector_present);
  CHECK(trunc.n_modes() == 10);
  for (int i = 0; i < 10; ++i)
    CHECK(std::abs(trunc.eigenvalues(i) - full.eigenvalues(i)) <= 1e-6);
  Eigen::MatrixXd gram = trunc.eigenvectors.transpose() * trunc.eigenvectors;
  CHECK((gram - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("spectrum invariants on random graphs") {
  Rng rng(23);
  for (int trial = 0; trial < 4; ++trial) {
    BipartiteGraph g = testutil::random_graph(15 + 5 * trial, 10 + 4 * trial, 0.2, rng);
    Spectrum s = eigendecompose_full(normalized_laplacian(g));
    for (Eigen::Index i = 0; i < s.eigenvalues.size(); ++i) {
      CHECK(s.eigenvalues(i) >= -1e-9);
      CHECK(s.eigenvalues(i) <= 2.0 + 1e-9);
      if (i) CHECK(s.eigenvalues(i) >= s.eigenvalues(i - 1));
    }
    Eigen::MatrixXd gram = s.eigenvectors.transpose() * s.eigenvectors;
    CHECK((gram - Eigen::MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff() <=
          1e-8);
  }
}

TEST_CASE("gft: span and roundtrip") {
  Spectrum s = eigendecompose_full(two_node_laplacian());
  Eigen::MatrixXd x(2, 1);
  x << 1, 1;  // in the span of u_1
  Eigen::MatrixXd xhat = gft_forward(s, x);
  CHECK(std::abs(xhat(0, 0)) == doctest::Approx(std::sqrt(2.0)));
  CHECK(std::abs(xhat(1, 0)) <= 1e-12);

  Rng rng(5);
  BipartiteGraph g = testutil::random_graph(12, 10, 0.3, rng);
  Spectrum sg = eigendecompose_full(normalized_laplacian(g));
  Eigen::MatrixXd sig = testutil::random_matrix(g.n_nodes(), 7, rng);
  Eigen::MatrixXd back = sg.eigenvectors * gft_forward(sg, sig);
  CHECK((back - sig).norm() <= 1e-8 * sig.norm());

  Eigen::MatrixXd wrong(g.n_nodes() + 1, 3);
  wrong.setZero();
  CHECK_THROWS_AS(gft_forward(sg, wrong), DataError);
}

TEST_CASE("band energies: rows, zeros, Parseval") {
  Eigen::MatrixXd xhat(3, 2);
  xhat << 0, 0, 3, 4, 1, 2;
  Eigen::VectorXd e = band_energies(xhat);
  CHECK(e(0) == 0.0);
  CHECK(e(1) == doctest::Approx(25.0));
  CHECK(e.sum() == doctest::Approx(xhat.squaredNorm()));

  Rng rng(29);
  BipartiteGraph g = testutil::random_graph(14, 11, 0.25, rng);
  Spectrum s = eigendecompose_full(normalized_laplacian(g));
  Eigen::MatrixXd sig = testutil::random_matrix(g.n_nodes(), 5, rng);
  Eigen::VectorXd energies = band_energies(gft_forward(s, sig));
  CHECK(energies.sum() == doctest::Approx(sig.squaredNorm()).epsilon(1e-8));
}

TEST_CASE("partition_bands greedy rule, frozen example") {
  Eigen::VectorXd e(5);
  e << 4, 1, 1, 1, 1;
  BandPartition p = partition_bands(e, 2, false);
  CHECK(p.boundaries == std::vector<std::size_t>{0, 1, 5});
  CHECK(p.band_energy[0] == doctest::Approx(4.0));
  CHECK(p.band_energy[1] == doctest::Approx(4.0));
  CHECK(p.boundaries == greedy_boundaries_oracle(e, 2));
}

TEST_CASE("partition_bands uniform energies and forced one-per-band") {
  Eigen::VectorXd u = Eigen::VectorXd::Ones(12);
  BandPartition p = partition_bands(u, 4, false);
  CHECK(p.boundaries == std::vector<std::size_t>{0, 3, 6, 9, 12});
  for (double be : p.band_energy) CHECK(be == doctest::Approx(3.0));

  Eigen::VectorXd three = Eigen::VectorXd::Ones(3);
  BandPartition q = partition_bands(three, 3, false);
  CHECK(q.boundaries == std::vector<std::size_t>{0, 1, 2, 3});

  CHECK_THROWS_AS(partition_bands(three, 4, false), DataError);
}

TEST_CASE("partition_bands matches the enumeration oracle on random energies") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 4 + uniform_index(rng, 40);
    const std::size_t m = 2 + uniform_index(rng, std::min<std::size_t>(5, k - 1));
    Eigen::VectorXd e(static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = uniform(rng) * 3.0;
    BandPartition p = partition_bands(e, m, false);
    CHECK(p.boundaries == greedy_boundaries_oracle(e, m));
    for (std::size_t band = 0; band < m; ++band) CHECK(p.band_size(band) >= 1);
  }
}

TEST_CASE("partition_bands zero-energy fallback") {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(10);
  BandPartition p = partition_bands(e, 3, false);
  CHECK(p.zero_energy_fallback);
  CHECK(p.boundaries.front() == 0);
  CHECK(p.boundaries.back() == 10);
  for (std::size_t band = 0; band < 3; ++band) CHECK(p.band_size(band) >= 1);
}

TEST_CASE("band reconstruction: completeness, locality, orthogonality") {
  Rng rng(37);
  BipartiteGraph g = testutil::random_graph(16, 12, 0.25, rng);
  Spectrum s = eigendecompose_full(normalized_laplacian(g));
  Eigen::MatrixXd sig = testutil::random_matrix(g.n_nodes(), 6, rng);
  Eigen::MatrixXd coeffs = gft_forward(s, sig);
  BandPartition p = partition_bands(band_energies(coeffs), 4, false);

  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(sig.rows(), sig.cols());
  std::vector<Eigen::MatrixXd> bands;
  for (std::size_t m = 0; m < 4; ++m) {
    bands.push_back(reconstruct_band(s, coeffs, p, m));
    sum += bands.back();
  }
  CHECK((sum - sig).norm() <= 1e-6 * sig.norm());
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = a + 1; b < 4; ++b)
      CHECK(std::abs((bands[a].array() * bands[b].array()).sum()) <= 1e-6 * sig.squaredNorm());

  // signal entirely inside band 1's span
  Eigen::MatrixXd low = s.eigenvectors.col(0) * Eigen::RowVectorXd::Ones(3);
  Eigen::MatrixXd low_coeffs = gft_forward(s, low);
  BandPartition lp = partition_bands(band_energies(low_coeffs), 2, false);
  Eigen::MatrixXd b1 = reconstruct_band(s, low_coeffs, lp, 0);
  Eigen::MatrixXd b2 = reconstruct_band(s, low_coeffs, lp, 1);
  CHECK((b1 - low).norm() <= 1e-9 * low.norm());
  CHECK(b2.norm() <= 1e-9 * low.norm());

  CHECK_THROWS_AS(reconstruct_band(s, coeffs, p, 4), DataError);
}

TEST_CASE("truncated spectrum: residual band restores completeness") {
  Rng rng(41);
  BipartiteGraph g = testutil::random_graph(20, 15, 0.2, rng);
  SparseSymmetricMatrix l = normalized_laplacian(g);
  Spectrum trunc = eigendecompose_truncated(l, 12);
  Eigen::MatrixXd sig = testutil::random_matrix(g.n_nodes(), 5, rng);
  Eigen::MatrixXd coeffs = gft_forward(trunc, sig);
  BandPartition p = partition_bands(band_energies(coeffs), 3, true);
  CHECK(p.residual_in_last);

  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(sig.rows(), sig.cols());
  for (std::size_t m = 0; m < 3; ++m) sum += reconstruct_band(trunc, coeffs, p, m, &sig);
  CHECK((sum - sig).norm() <= 1e-6 * sig.norm());

  // the residual band needs the original signal
  CHECK_THROWS_AS(reconstruct_band(trunc, coeffs, p, 2), DataError);
}

TEST_CASE("band energy balance: greedy deviation bounded by the largest mode") {
  Rng rng(43);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 6 + uniform_index(rng, 60);
    const std::size_t m = 2 + uniform_index(rng, 4);
    if (k < m) continue;
    Eigen::VectorXd e(static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = uniform(rng) * 2.0;
    BandPartition p = partition_bands(e, m, false);
    const double target = e.sum() / static_cast<double>(m);
    const double emax = e.maxCoeff();
    for (std::size_t band = 0; band + 1 < m; ++band)  // interior bands obey the greedy bound
      CHECK(std::abs(p.band_energy[band] - target) <= emax + 1e-12);
  }
}

TEST_CASE("build_band_stack: axis map and per-modality reconstruction") {
  Rng rng(47);
  BipartiteGraph g = testutil::random_graph(14, 10, 0.3, rng);
  Spectrum s = eigendecompose_full(normalized_laplacian(g));
  const std::size_t n = g.n_nodes();

  std::vector<std::pair<std::string, Eigen::MatrixXd>> one{
      {"id", testutil::random_matrix(n, 4, rng)}};
  BandDecomposition d1 = build_band_stack(one, s, 2);
  CHECK(d1.stack.extended_bands() == 2);
  CHECK(d1.stack.band_axis_map ==
        std::vector<std::pair<std::string, std::size_t>>{{"id", 1}, {"id", 2}});

  std::vector<std::pair<std::string, Eigen::MatrixXd>> three{
      {"id", testutil::random_matrix(n, 4, rng)},
      {"img", testutil::random_matrix(n, 4, rng)},
      {"txt", testutil::random_matrix(n, 4, rng)}};
  BandDecomposition d3 = build_band_stack(three, s, 4);
  CHECK(d3.stack.extended_bands() == 12);

  for (std::size_t c = 0; c < 3; ++c) {
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), 4);
    for (std::size_t m = 0; m < 4; ++m) sum += d3.stack.components[d3.stack.flat_index(c, m)];
    CHECK((sum - three[c].second).norm() <= 1e-6 * three[c].second.norm());
  }

  std::vector<std::pair<std::string, Eigen::MatrixXd>> bad{
      {"id", testutil::random_matrix(n, 4, rng)}, {"img", testutil::random_matrix(n, 5, rng)}};
  CHECK_THROWS_AS(build_band_stack(bad, s, 2), DataError);
}
