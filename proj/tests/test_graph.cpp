#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ssr/graph.hpp"
#include "test_util.hpp"

using namespace ssr;

namespace {

Eigen::MatrixXd dense(const SparseSymmetricMatrix& m) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m.n()),
                                            static_cast<Eigen::Index>(m.n()));
  for (std::size_t i = 0; i < m.n(); ++i)
    for (std::size_t k = m.row_offsets()[i]; k < m.row_offsets()[i + 1]; ++k)
      d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m.col_indices()[k])) =
          m.values()[k];
  return d;
}

}  // namespace

TEST_CASE("smallest graph: one user, one item, one interaction") {
  InteractionTable t;
  t.records.push_back({0, 0, 0});
  BipartiteGraph g = build_graph(t, 1, 1);
  CHECK(g.n_nodes() == 2);
  Eigen::MatrixXd a = dense(g.adjacency);
  CHECK(a(0, 1) == doctest::Approx(1.0));
  CHECK(a(1, 0) == doctest::Approx(1.0));
  CHECK(a(0, 0) == doctest::Approx(0.0));
  CHECK(g.degrees == std::vector<double>{1.0, 1.0});
}

TEST_CASE("duplicate records collapse to a single edge") {
  InteractionTable t;
  t.records.push_back({0, 0, 5});
  t.records.push_back({0, 0, 9});
  t.records.push_back({0, 1, 1});
  BipartiteGraph g = build_graph(t, 1, 2);
  CHECK(g.adjacency.nnz() == 4);  // two undirected edges
  CHECK(g.degrees[0] == doctest::Approx(2.0));
}

TEST_CASE("id out of range is rejected with the record index") {
  InteractionTable t;
  t.records.push_back({0, 0, 0});
  t.records.push_back({2, 0, 0});
  CHECK_THROWS_WITH_AS(build_graph(t, 2, 1), doctest::Contains("record 1"), DataError);
  InteractionTable empty;
  CHECK_THROWS_AS(build_graph(empty, 2, 1), DataError);
}

TEST_CASE("Baby-scale header check: 19445 users, 7050 items, 139110 interactions") {
  const std::size_t n_users = 19445, n_items = 7050, n_inter = 139110;
  InteractionTable t;
  t.records.reserve(n_inter);
  for (std::size_t i = 0; i < n_inter; ++i) {
    const std::size_t u = i % n_users;
    const std::size_t k = i / n_users;
    t.records.push_back({u, (u * 7 + k) % n_items, static_cast<std::int64_t>(i)});
  }
  BipartiteGraph g = build_graph(t, n_users, n_items);
  CHECK(g.n_nodes() == 26495);
  CHECK(g.adjacency.nnz() == 2 * n_inter);  // construction has no duplicate pairs
}

TEST_CASE("single edge Laplacian is [[1,-1],[-1,1]]") {
  InteractionTable t;
  t.records.push_back({0, 0, 0});
  BipartiteGraph g = build_graph(t, 1, 1);
  Eigen::MatrixXd l = dense(normalized_laplacian(g));
  CHECK(l(0, 0) == doctest::Approx(1.0));
  CHECK(l(1, 1) == doctest::Approx(1.0));
  CHECK(l(0, 1) == doctest::Approx(-1.0));
  CHECK(l(1, 0) == doctest::Approx(-1.0));
}

TEST_CASE("star: item connected to two users") {
  InteractionTable t;
  t.records.push_back({0, 0, 0});
  t.records.push_back({1, 0, 1});
  BipartiteGraph g = build_graph(t, 2, 1);
  Eigen::MatrixXd l = dense(normalized_laplacian(g));
  CHECK(l(0, 2) == doctest::Approx(-1.0 / std::sqrt(2.0)));
  CHECK(l(1, 2) == doctest::Approx(-1.0 / std::sqrt(2.0)));
  CHECK(l(0, 0) == doctest::Approx(1.0));
  CHECK(l(2, 2) == doctest::Approx(1.0));
}

TEST_CASE("Laplacian diagonal is exactly 1 and zero-degree nodes are rejected") {
  Rng rng(7);
  BipartiteGraph g = testutil::random_graph(12, 9, 0.2, rng);
  SparseSymmetricMatrix l = normalized_laplacian(g);
  Eigen::MatrixXd ld = dense(l);
  for (Eigen::Index i = 0; i < ld.rows(); ++i) CHECK(ld(i, i) == 1.0);

  BipartiteGraph broken = g;
  broken.degrees[3] = 0.0;
  CHECK_THROWS_WITH_AS(normalized_laplacian(broken), doctest::Contains("3"), DataError);
}

TEST_CASE("Laplacian is PSD and annihilates D^{1/2} 1") {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    BipartiteGraph g = testutil::random_graph(10 + 3 * trial, 8 + 2 * trial, 0.25, rng);
    SparseSymmetricMatrix l = normalized_laplacian(g);
    const std::size_t n = g.n_nodes();

    for (int probe = 0; probe < 100; ++probe) {
      std::vector<double> x(n);
      for (double& v : x) v = gaussian(rng);
      std::vector<double> lx = l.multiply(x);
      double quad = 0.0;
      for (std::size_t i = 0; i < n; ++i) quad += x[i] * lx[i];
      CHECK(quad >= -1e-9);
    }

    std::vector<double> kernel(n);
    double knorm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      kernel[i] = std::sqrt(g.degrees[i]);
      knorm += kernel[i] * kernel[i];
    }
    std::vector<double> lk = l.multiply(kernel);
    double lknorm = 0.0;
    for (double v : lk) lknorm += v * v;
    CHECK(std::sqrt(lknorm) <= 1e-9 * std::sqrt(knorm));
  }
}

TEST_CASE("relabeling users permutes Laplacian rows") {
  // 2 users, 3 items
  InteractionTable t;
  t.records.push_back({0, 0, 0});
  t.records.push_back({0, 1, 1});
  t.records.push_back({1, 1, 2});
  t.records.push_back({1, 2, 3});
  Eigen::MatrixXd l1 = dense(normalized_laplacian(build_graph(t, 2, 3)));

  InteractionTable swapped;  // user 0 <-> 1
  for (const auto& r : t.records) swapped.records.push_back({1 - r.user, r.item, r.timestamp});
  Eigen::MatrixXd l2 = dense(normalized_laplacian(build_graph(swapped, 2, 3)));

  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(5, 5);
  p.row(0).swap(p.row(1));
  CHECK(((p * l1 * p.transpose()) - l2).norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("propagate_features: user rows are degree-normalized item means") {
  InteractionTable t;
  t.records.push_back({0, 0, 0});
  t.records.push_back({0, 1, 1});
  t.records.push_back({1, 0, 2});
  BipartiteGraph g = build_graph(t, 2, 2);
  Eigen::MatrixXd f(2, 2);
  f << 1, 0, 0, 1;
  Eigen::MatrixXd out = propagate_features(g, f);
  CHECK(out(0, 0) == doctest::Approx(0.5));
  CHECK(out(0, 1) == doctest::Approx(0.5));
  CHECK(out(1, 0) == doctest::Approx(1.0));  // single neighbour: copies the item row
  CHECK(out(1, 1) == doctest::Approx(0.0));
  CHECK(out(2, 0) == doctest::Approx(1.0));  // item rows verbatim
  CHECK(out(3, 1) == doctest::Approx(1.0));

  Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(2, 3);
  CHECK(propagate_features(g, zeros).norm() == 0.0);

  Eigen::MatrixXd bad(3, 2);
  bad.setZero();
  CHECK_THROWS_AS(propagate_features(g, bad), DataError);
}

TEST_CASE("sparse matrix validates symmetry and ordering") {
  CHECK_THROWS_AS(SparseSymmetricMatrix::from_triplets(2, {{0, 1, 1.0}}), DataError);
  auto ok = SparseSymmetricMatrix::from_triplets(2, {{0, 1, 1.0}, {1, 0, 1.0}});
  CHECK(ok.nnz() == 2);
  CHECK_THROWS_AS(SparseSymmetricMatrix::from_triplets(2, {{0, 1, 1.0}, {1, 0, 2.0}}), DataError);
}
