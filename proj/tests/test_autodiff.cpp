#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "ssr/autodiff.hpp"
#include "ssr/rng.hpp"

using namespace ssr;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = scale * gaussian(rng);
  return t;
}

/// FD-checks a scalar program over every tensor in the store.
void check_program(const LossProgram& program, ParamStore& params, double tol = 1e-4) {
  GradCheckReport report = grad_check(program, params, 1e-4, tol, 400, 99);
  for (const auto& e : report.tensors) {
    INFO("tensor ", e.tensor, " max_rel_err ", e.max_rel_err);
    CHECK(e.pass);
  }
  CHECK(report.pass);
}

// Independent einsum oracle: naive index loops, no shared code with the
// production evaluator.
double ref_get(const Tensor& t, const std::vector<std::size_t>& idx) {
  std::size_t off = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) off = off * t.shape[i] + idx[i];
  return t.data[off];
}

Tensor einsum_oracle(const std::string& a_lab, const std::string& b_lab, const std::string& c_lab,
                     const Tensor& a, const Tensor& b) {
  std::map<char, std::size_t> ext;
  for (std::size_t i = 0; i < a_lab.size(); ++i) ext[a_lab[i]] = a.shape[i];
  for (std::size_t i = 0; i < b_lab.size(); ++i) ext[b_lab[i]] = b.shape[i];
  std::string all = c_lab;
  for (char ch : a_lab)
    if (all.find(ch) == std::string::npos) all += ch;
  for (char ch : b_lab)
    if (all.find(ch) == std::string::npos) all += ch;

  Shape out_shape;
  for (char ch : c_lab) out_shape.push_back(ext[ch]);
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);

  std::vector<std::size_t> idx(all.size(), 0);
  for (;;) {
    std::map<char, std::size_t> pos;
    for (std::size_t i = 0; i < all.size(); ++i) pos[all[i]] = idx[i];
    auto pick = [&](const std::string& labels) {
      std::vector<std::size_t> v;
      for (char ch : labels) v.push_back(pos[ch]);
      return v;
    };
    std::size_t coff = 0;
    for (std::size_t i = 0; i < c_lab.size(); ++i) coff = coff * out.shape[i] + pos[c_lab[i]];
    out.data[coff] += ref_get(a, pick(a_lab)) * ref_get(b, pick(b_lab));
    std::size_t level = all.size();
    bool done = all.empty();
    while (level-- > 0) {
      if (++idx[level] < ext[all[level]]) break;
      idx[level] = 0;
      if (level == 0) done = true;
    }
    if (done) break;
  }
  return out;
}

}  // namespace

TEST_CASE("identity matmul records one node and reproduces the input") {
  Rng rng(1);
  ParamStore ps;
  ps.add("x", random_tensor({3, 1}, rng));
  Tape tape;
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
  ValueId y = tape.matmul(tape.constant(eye), tape.param(ps, "x"));
  CHECK(tape.op_count(Op::MatMul) == 1);
  for (int i = 0; i < 3; ++i) CHECK(tape.value(y).at(i, 0) == ps.get("x").at(i, 0));
}

TEST_CASE("sigmoid(Wx + b) builds three op nodes in order") {
  Rng rng(2);
  ParamStore ps;
  ps.add("w", random_tensor({2, 2}, rng));
  ps.add("x", random_tensor({2, 1}, rng));
  ps.add("b", random_tensor({2, 1}, rng));
  Tape tape;
  tape.sigmoid(tape.add(tape.matmul(tape.param(ps, "w"), tape.param(ps, "x")),
                        tape.param(ps, "b")));
  CHECK(tape.op_count(Op::MatMul) == 1);
  CHECK(tape.op_count(Op::Add) == 1);
  CHECK(tape.op_count(Op::Sigmoid) == 1);
  CHECK(tape.node_count() == 6);  // 3 params + 3 ops
}

TEST_CASE("loss = ||x||^2 has gradient 2x") {
  Rng rng(3);
  ParamStore ps;
  ps.add("x", random_tensor({5}, rng));
  Tape tape;
  ValueId loss = tape.squared_norm(tape.param(ps, "x"));
  GradStore g = tape.backward(loss, ps);
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(g.at("x").data[i] == doctest::Approx(2.0 * ps.get("x").data[i]));
}

TEST_CASE("loss = sigmoid(w.x) at w=0 has gradient 0.25 x") {
  Rng rng(4);
  ParamStore ps;
  ps.add("w", Tensor({1, 4}));
  Tensor x = random_tensor({4, 1}, rng);
  Tape tape;
  ValueId s = tape.sigmoid(tape.matmul(tape.param(ps, "w"), tape.constant(x)));
  ValueId loss = tape.reshape(s, {1});
  GradStore g = tape.backward(loss, ps);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(g.at("w").data[i] == doctest::Approx(0.25 * x.data[i]));
}

TEST_CASE("backward linearity over program combinations") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    ParamStore ps;
    ps.add("x", random_tensor({4, 3}, rng));
    Tensor c1 = random_tensor({4, 3}, rng);
    Tensor c2 = random_tensor({3, 2}, rng);
    const double a = uniform(rng, -2, 2), b = uniform(rng, -2, 2);

    auto loss1 = [&](Tape& t) { return t.squared_norm(t.mul(t.param(ps, "x"), t.constant(c1))); };
    auto loss2 = [&](Tape& t) {
      return t.squared_norm(t.sigmoid(t.matmul(t.param(ps, "x"), t.constant(c2))));
    };

    Tape t1, t2, t3;
    GradStore g1 = t1.backward(loss1(t1), ps);
    GradStore g2 = t2.backward(loss2(t2), ps);
    ValueId combined = t3.add(t3.mul(loss1(t3), t3.constant(Tensor::scalar(a))),
                              t3.mul(loss2(t3), t3.constant(Tensor::scalar(b))));
    GradStore g3 = t3.backward(combined, ps);
    for (std::size_t i = 0; i < ps.get("x").size(); ++i)
      CHECK(g3.at("x").data[i] ==
            doctest::Approx(a * g1.at("x").data[i] + b * g2.at("x").data[i]).epsilon(1e-9));
  }
}

TEST_CASE("backward is deterministic and batch-sum gradient equals sum of parts") {
  Rng rng(6);
  ParamStore ps;
  ps.add("w", random_tensor({3, 3}, rng));
  Tensor xa = random_tensor({2, 3}, rng), xb = random_tensor({4, 3}, rng);

  auto loss_for = [&](Tape& t, const Tensor& x) {
    return t.squared_norm(t.sigmoid(t.matmul(t.constant(x), t.param(ps, "w"))));
  };
  Tape ta, tb, tc, td;
  GradStore ga = ta.backward(loss_for(ta, xa), ps);
  GradStore gb = tb.backward(loss_for(tb, xb), ps);
  ValueId sum = tc.add(loss_for(tc, xa), loss_for(tc, xb));
  GradStore gc = tc.backward(sum, ps);
  for (std::size_t i = 0; i < 9; ++i)
    CHECK(gc.at("w").data[i] == doctest::Approx(ga.at("w").data[i] + gb.at("w").data[i]));

  ValueId again = td.add(loss_for(td, xa), loss_for(td, xb));
  GradStore gd = td.backward(again, ps);
  for (std::size_t i = 0; i < 9; ++i) CHECK(gd.at("w").data[i] == gc.at("w").data[i]);
}

TEST_CASE("seed shape mismatch rejected; untouched params get zero gradients") {
  ParamStore ps;
  ps.add("a", Tensor::full({2}, 1.0));
  ps.add("unused", Tensor::full({3}, 1.0));
  Tape tape;
  ValueId v = tape.squared_norm(tape.param(ps, "a"));
  CHECK_THROWS_AS(tape.backward(v, Tensor({2}), ps), DataError);
  GradStore g = tape.backward(v, ps);
  CHECK(g.at("unused").shape == Shape{3});
  for (double x : g.at("unused").data) CHECK(x == 0.0);
}

TEST_CASE("gradcheck: every primitive against central differences") {
  Rng rng(7);

  SUBCASE("matmul + add broadcast + mul broadcast") {
    ParamStore ps;
    ps.add("a", random_tensor({3, 4}, rng));
    ps.add("b", random_tensor({4, 2}, rng));
    ps.add("bias", random_tensor({2}, rng));
    ps.add("scale", random_tensor({1}, rng));
    check_program(
        [](Tape& t, const ParamStore& p) {
          ValueId y = t.add(t.matmul(t.param(p, "a"), t.param(p, "b")), t.param(p, "bias"));
          return t.squared_norm(t.mul(y, t.param(p, "scale")));
        },
        ps);
  }

  SUBCASE("sigmoid, leaky_relu, softmax") {
    ParamStore ps;
    ps.add("x", random_tensor({4, 5}, rng));
    check_program(
        [](Tape& t, const ParamStore& p) {
          ValueId s = t.softmax(t.leaky_relu(t.sigmoid(t.param(p, "x")), 0.01));
          return t.squared_norm(s);
        },
        ps);
  }

  SUBCASE("logsumexp") {
    ParamStore ps;
    ps.add("x", random_tensor({6, 3}, rng));
    check_program(
        [](Tape& t, const ParamStore& p) { return t.squared_norm(t.logsumexp(t.param(p, "x"))); },
        ps);
  }

  SUBCASE("gather with repeated rows accumulates") {
    ParamStore ps;
    ps.add("x", random_tensor({5, 3}, rng));
    check_program(
        [](Tape& t, const ParamStore& p) {
          return t.squared_norm(t.gather(t.param(p, "x"), {0, 2, 2, 4}));
        },
        ps);
  }

  SUBCASE("concat rows and columns") {
    ParamStore ps;
    ps.add("a", random_tensor({2, 3}, rng));
    ps.add("b", random_tensor({4, 3}, rng));
    ps.add("c", random_tensor({6, 2}, rng));
    check_program(
        [](Tape& t, const ParamStore& p) {
          ValueId rows = t.concat({t.param(p, "a"), t.param(p, "b")}, 0);
          ValueId cols = t.concat({rows, t.param(p, "c")}, 1);
          return t.squared_norm(t.sigmoid(cols));
        },
        ps);
  }

  SUBCASE("reshape") {
    ParamStore ps;
    ps.add("x", random_tensor({4, 6}, rng));
    check_program(
        [](Tape& t, const ParamStore& p) {
          return t.squared_norm(t.softmax(t.reshape(t.param(p, "x"), {2, 3, 4})));
        },
        ps);
  }

  SUBCASE("row_normalize") {
    ParamStore ps;
    Tensor x = random_tensor({5, 4}, rng);
    for (double& v : x.data) v += (v >= 0 ? 0.5 : -0.5);  // keep rows away from zero norm
    ps.add("x", x);
    ps.add("y", random_tensor({5, 4}, rng));
    check_program(
        [](Tape& t, const ParamStore& p) {
          ValueId sims = t.contract(t.row_normalize(t.param(p, "x")),
                                    t.row_normalize(t.param(p, "y")), "nd,nd->n");
          return t.squared_norm(sims);
        },
        ps);
  }

  SUBCASE("contract: pipeline einsum specs") {
    struct Case {
      std::string spec;
      Shape a, b;
    };
    const std::vector<Case> cases = {
        {"nbd,br->nrd", {5, 4, 3}, {4, 2}},  {"nrd,red->nre", {5, 2, 3}, {2, 3, 3}},
        {"nre,br->nbe", {5, 2, 3}, {4, 2}},  {"nbd,ed->nbe", {5, 4, 3}, {3, 3}},
        {"n,b->nb", {5}, {4}},               {"nbe,nb->nbe", {5, 4, 3}, {5, 4}},
        {"nb,nbd->nd", {5, 4}, {5, 4, 3}},   {"nd,nd->n", {5, 3}, {5, 3}},
        {"i,i->", {7}, {7}},                 {"nbd,nrd->br", {5, 4, 3}, {5, 2, 3}},
    };
    for (const auto& c : cases) {
      CAPTURE(c.spec);
      ParamStore ps;
      ps.add("a", random_tensor(c.a, rng, 0.7));
      ps.add("b", random_tensor(c.b, rng, 0.7));
      check_program(
          [&](Tape& t, const ParamStore& p) {
            return t.squared_norm(t.contract(t.param(p, "a"), t.param(p, "b"), c.spec));
          },
          ps);
    }
  }
}

TEST_CASE("einsum values match an independent oracle") {
  Rng rng(8);
  struct Case {
    std::string spec;
    Shape a, b;
  };
  const std::vector<Case> cases = {
      {"nbd,br->nrd", {4, 3, 2}, {3, 5}}, {"nrd,red->nre", {4, 2, 3}, {2, 3, 3}},
      {"nre,br->nbe", {4, 2, 3}, {6, 2}}, {"nbd,ed->nbe", {4, 3, 2}, {5, 2}},
      {"nbe,ed->nbd", {4, 3, 5}, {5, 2}}, {"nbd,nbe->ed", {4, 3, 2}, {4, 3, 5}},
      {"nrd,nre->rde", {4, 2, 3}, {4, 2, 5}},
      {"nbe,nb->nbe", {4, 3, 2}, {4, 3}}, {"nb,nbd->nd", {4, 3}, {4, 3, 2}},
      {"nd,nd->n", {6, 3}, {6, 3}},       {"ij,jk->ik", {3, 4}, {4, 5}},
      {"n,b->nb", {4}, {7}},              {"i,i->", {9}, {9}},
      {"nbd,nrd->br", {4, 3, 2}, {4, 5, 2}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.spec);
    Tensor a = random_tensor(c.a, rng);
    Tensor b = random_tensor(c.b, rng);
    Tensor got = einsum(c.spec, a, b);
    auto comma = c.spec.find(','), arrow = c.spec.find("->");
    Tensor want = einsum_oracle(c.spec.substr(0, comma),
                                c.spec.substr(comma + 1, arrow - comma - 1),
                                c.spec.substr(arrow + 2), a, b);
    REQUIRE(got.shape == want.shape);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-10));
  }
}

TEST_CASE("einsum rejects malformed specs") {
  Tensor a({2, 3}), b({3, 2});
  CHECK_THROWS_AS(einsum("ab", a, b), DataError);
  CHECK_THROWS_AS(einsum("ab,bc->ad", a, b), DataError);   // d not in inputs
  CHECK_THROWS_AS(einsum("aa,ab->b", a, b), DataError);    // repeated label
  CHECK_THROWS_AS(einsum("ab,cd->ac", a, b), DataError);   // dangling b/d
  CHECK_THROWS_AS(einsum("abc,bc->a", a, b), DataError);   // rank mismatch
  Tensor c({4, 2});
  CHECK_THROWS_AS(einsum("ab,bc->ac", a, c), DataError);   // extent mismatch
}

TEST_CASE("shape errors name the offending primitive") {
  Tape tape;
  ValueId a = tape.constant(Tensor({2, 3}));
  CHECK_THROWS_WITH_AS(tape.matmul(a, tape.constant(Tensor({2, 3}))),
                       doctest::Contains("matmul"), DataError);
  CHECK_THROWS_WITH_AS(tape.add(a, tape.constant(Tensor({2}))), doctest::Contains("add"),
                       DataError);
  CHECK_THROWS_WITH_AS(tape.gather(a, {5}), doctest::Contains("gather"), DataError);
  CHECK_THROWS_WITH_AS(tape.reshape(a, {7}), doctest::Contains("reshape"), DataError);
}

TEST_CASE("quadratic loss gradcheck is exact to fp noise") {
  Rng rng(9);
  ParamStore ps;
  ps.add("x", random_tensor({10}, rng));
  GradCheckReport r = grad_check(
      [](Tape& t, const ParamStore& p) { return t.squared_norm(t.param(p, "x")); }, ps, 1e-4,
      1e-7, 200, 1);
  CHECK(r.pass);
  for (const auto& e : r.tensors) CHECK(e.max_rel_err <= 1e-7);
}

TEST_CASE("negative control: corrupted analytic gradients fail the check") {
  Rng rng(10);
  ParamStore ps;
  ps.add("x", random_tensor({6}, rng));
  auto program = [](Tape& t, const ParamStore& p) {
    return t.squared_norm(t.sigmoid(t.param(p, "x")));
  };
  Tape tape;
  GradStore analytic = tape.backward(program(tape, ps), ps);
  for (double& v : analytic.at("x").data) v *= 1.5;  // corrupted backward rule
  GradCheckReport r = grad_check_against(program, ps, analytic, 1e-4, 1e-4, 200, 1);
  CHECK_FALSE(r.pass);
}

TEST_CASE("non-finite loss during probing is reported with the coordinate") {
  ParamStore ps;
  ps.add("x", Tensor::full({2}, 1e200));
  auto program = [](Tape& t, const ParamStore& p) {
    ValueId q = t.squared_norm(t.param(p, "x"));  // 1e400 overflows to inf
    return t.mul(q, t.constant(Tensor::scalar(1.0)));
  };
  CHECK_THROWS_WITH_AS(grad_check(program, ps, 1e-4, 1e-4, 4, 1), doctest::Contains("x"),
                       NumericError);
}
