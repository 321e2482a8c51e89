// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "expertflow/autodiff.hpp"
#include "expertflow/gradcheck.hpp"

#include <cmath>
#include <random>

using namespace expertflow;

namespace {

Mat from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  Mat m(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (double v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

Mat random_mat(std::mt19937_64& rng, Index r, Index c, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = uni(rng);
  return m;
}

}  // namespace

TEST_CASE("matmul identity and hand-expanded product") {
  ad::Tape t;
  ad::Var i2 = t.constant(Mat::Identity(2, 2));
  ad::Var b = t.constant(from_rows({{5, 6}, {7, 8}}));
  CHECK(t.val(t.matmul(i2, b)) == t.val(b));

  ad::Var a = t.constant(from_rows({{1, 2}, {3, 4}}));
  Mat expect = from_rows({{19, 22}, {43, 50}});
  CHECK((t.val(t.matmul(a, b)) - expect).norm() == doctest::Approx(0.0));
}

TEST_CASE("matmul matches a naive triple-loop oracle") {
  std::mt19937_64 rng(42);
  Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 4, 2);
  ad::Tape t;
  Mat got = t.val(t.matmul(t.constant(a), t.constant(b)));
  Mat want = Mat::Zero(3, 2);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 2; ++j)
      for (Index k = 0; k < 4; ++k) want(i, j) += a(i, k) * b(k, j);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  ad::Tape t;
  ad::Var a = t.constant(Mat::Zero(2, 3));
  ad::Var b = t.constant(Mat::Zero(4, 2));
  CHECK_THROWS_WITH_AS(t.matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
}

TEST_CASE("softmax_rows basics") {
  ad::Tape t;
  Mat u = t.val(t.softmax_rows(t.constant(from_rows({{0, 0, 0}}))));
  for (int j = 0; j < 3; ++j) CHECK(u(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // shift invariance
  Mat s1 = t.val(t.softmax_rows(t.constant(from_rows({{1, 2}}))));
  Mat s2 = t.val(t.softmax_rows(t.constant(from_rows({{0, 1}}))));
  CHECK((s1 - s2).cwiseAbs().maxCoeff() < 1e-12);

  // high-precision oracle for [2, 1, 0]
  long double e2 = expl(2.0L), e1 = expl(1.0L), e0 = 1.0L;
  long double z = e2 + e1 + e0;
  Mat got = t.val(t.softmax_rows(t.constant(from_rows({{2, 1, 0}}))));
  CHECK(got(0, 0) == doctest::Approx(static_cast<double>(e2 / z)).epsilon(1e-4));
  CHECK(got(0, 1) == doctest::Approx(static_cast<double>(e1 / z)).epsilon(1e-4));
  CHECK(got(0, 2) == doctest::Approx(static_cast<double>(e0 / z)).epsilon(1e-4));
  CHECK(got(0, 0) == doctest::Approx(0.6652).epsilon(1e-3));
}

TEST_CASE("softmax rows sum to one and shifts cancel on random input") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 50; ++rep) {
    Mat x = random_mat(rng, 5, 6, -30.0, 30.0);
    Mat s = ad::softmax_rows(x);
    for (Index i = 0; i < s.rows(); ++i) CHECK(std::abs(s.row(i).sum() - 1.0) < 1e-12);
    Mat shifted = x;
    shifted.array() += 13.25;  // same constant per row
    CHECK((ad::softmax_rows(shifted) - s).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("sigmoid values and symmetry") {
  ad::Tape t;
  CHECK(t.val(t.sigmoid(t.constant(Mat::Zero(1, 1))))(0, 0) == doctest::Approx(0.5));
  CHECK(t.val(t.sigmoid(t.constant(Mat::Constant(1, 1, 2.0))))(0, 0) ==
        doctest::Approx(0.8807970779778823).epsilon(1e-4));
  std::mt19937_64 rng(3);
  Mat x = random_mat(rng, 3, 3, -20.0, 20.0);
  Mat s = ad::sigmoid(x) + ad::sigmoid(Mat(-x));
  CHECK((s.array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("ste_sign forward convention and straight-through backward") {
  ad::Tape t;
  ad::Var z = t.leaf(from_rows({{0.3, -0.2, 0.0}}));
  ad::Var m = t.ste_sign(z);
  CHECK(t.val(m)(0, 0) == 1.0);
  CHECK(t.val(m)(0, 1) == 0.0);
  CHECK(t.val(m)(0, 2) == 0.0);  // sign(0) = 0
  for (Index j = 0; j < 3; ++j) {
    double v = t.val(m)(0, j);
    CHECK((v == 0.0 || v == 1.0));
  }

  // backward copies the upstream gradient unchanged
  ad::Var loss = t.sum(t.scale(m, 2.5));
  t.backward(loss);
  for (Index j = 0; j < 3; ++j) CHECK(t.grad(z)(0, j) == 2.5);
}

TEST_CASE("backward on sum and half squared norm") {
  ad::Tape t;
  std::mt19937_64 rng(11);
  Mat xv = random_mat(rng, 3, 4);
  ad::Var x = t.leaf(xv);
  t.backward(t.sum(x));
  CHECK((t.grad(x).array() - 1.0).abs().maxCoeff() == 0.0);

  ad::Tape t2;
  ad::Var y = t2.leaf(xv);
  ad::Var loss = t2.scale(t2.sum(t2.mul(y, y)), 0.5);
  t2.backward(loss);
  CHECK((t2.grad(y) - xv).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("backward rejects non-scalar loss") {
  ad::Tape t;
  ad::Var x = t.leaf(Mat::Zero(2, 2));
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("repeated backward after zeroing reproduces gradients") {
  std::mt19937_64 rng(5);
  ad::Tape t;
  ad::Var x = t.leaf(random_mat(rng, 2, 3));
  ad::Var w = t.leaf(random_mat(rng, 3, 2));
  ad::Var loss = t.sum(t.sigmoid(t.matmul(x, w)));
  t.backward(loss);
  Mat g1 = t.grad(x);
  t.zero_grad();
  t.backward(loss);
  CHECK((t.grad(x) - g1).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("two-layer MLP gradient matches finite differences") {
  std::mt19937_64 rng(17);
  Mat x = random_mat(rng, 4, 5);
  Mat w1 = random_mat(rng, 5, 6), b1 = random_mat(rng, 1, 6);
  Mat w2 = random_mat(rng, 6, 3), b2 = random_mat(rng, 1, 3);

  auto loss_fn = [&](const Mat& w1v, const Mat& w2v) {
    ad::Tape t;
    ad::Var h = t.sigmoid(t.add_rowvec(t.matmul(t.constant(x), t.constant(w1v)), t.constant(b1)));
    ad::Var o = t.add_rowvec(t.matmul(h, t.constant(w2v)), t.constant(b2));
    return t.val(t.scale(t.sum(t.mul(o, o)), 0.5))(0, 0);
  };

  ad::Tape t;
  ad::Var w1v = t.leaf(w1);
  ad::Var w2v = t.leaf(w2);
  ad::Var h = t.sigmoid(t.add_rowvec(t.matmul(t.constant(x), w1v), t.constant(b1)));
  ad::Var o = t.add_rowvec(t.matmul(h, w2v), t.constant(b2));
  t.backward(t.scale(t.sum(t.mul(o, o)), 0.5));

  Mat fd1 = ad::finite_diff([&](const Mat& p) { return loss_fn(p, w2); }, w1, 1e-3);
  Mat fd2 = ad::finite_diff([&](const Mat& p) { return loss_fn(w1, p); }, w2, 1e-3);
  CHECK((t.grad(w1v) - fd1).norm() / std::max(fd1.norm(), 1e-8) < 1e-4);
  CHECK((t.grad(w2v) - fd2).norm() / std::max(fd2.norm(), 1e-8) < 1e-4);
}

TEST_CASE("finite_diff oracle examples") {
  // f = sum
  Mat theta = from_rows({{1.0, -2.0, 0.5}});
  Mat g = ad::finite_diff([](const Mat& m) { return m.sum(); }, theta, 1e-3);
  CHECK((g.array() - 1.0).abs().maxCoeff() < 1e-9);

  // f = 0.5 ||theta||^2 at [3]
  Mat three = Mat::Constant(1, 1, 3.0);
  Mat g2 = ad::finite_diff([](const Mat& m) { return 0.5 * m.squaredNorm(); }, three, 1e-4);
  CHECK(g2(0, 0) == doctest::Approx(3.0).epsilon(1e-6));

  // quadratic form theta^T A theta -> (A + A^T) theta
  std::mt19937_64 rng(23);
  Mat a = random_mat(rng, 4, 4);
  Mat th = random_mat(rng, 4, 1);
  Mat g3 = ad::finite_diff(
      [&](const Mat& m) { return (m.transpose() * a * m)(0, 0); }, th, 1e-4);
  Mat want = (a + a.transpose()) * th;
  CHECK((g3 - want).cwiseAbs().maxCoeff() < 1e-5);

  CHECK_THROWS_AS(ad::finite_diff([](const Mat& m) { return m.sum(); }, theta, 0.0),
                  std::invalid_argument);
}

TEST_CASE("per-op finite-difference battery stays under 1e-4") {
  for (const GradCheckEntry& e : run_op_gradchecks(99)) {
    INFO(e.name);
    CHECK(e.rel_err < 1e-4);
  }
}

TEST_CASE("all op outputs stay finite on finite inputs") {
  std::mt19937_64 rng(31);
  ad::Tape t;
  ad::Var x = t.constant(random_mat(rng, 4, 4, -50.0, 50.0));
  CHECK(t.val(t.softmax_rows(x)).allFinite());
  CHECK(t.val(t.sigmoid(x)).allFinite());
  CHECK(t.val(t.logsumexp_rows(x)).allFinite());
  CHECK(t.val(t.ste_sign(x)).allFinite());
}
