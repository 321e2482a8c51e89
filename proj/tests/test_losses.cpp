// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "expertflow/losses.hpp"

#include <cmath>
#include <random>

using namespace expertflow;

namespace {

Mat random_mat(std::mt19937_64& rng, Index r, Index c, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = uni(rng);
  return m;
}

// High-precision log-softmax oracle.
long double nll_oracle(const Mat& logits, Index row, Index target) {
  long double mx = logits.row(row).maxCoeff();
  long double z = 0.0L;
  for (Index j = 0; j < logits.cols(); ++j) z += expl(static_cast<long double>(logits(row, j)) - mx);
  return (logl(z) + mx) - static_cast<long double>(logits(row, target));
}

}  // namespace

TEST_CASE("cross entropy: uniform, dominant, oracle") {
  Mat two = Mat::Zero(1, 2);
  CHECK(cross_entropy_value(two, {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // dominant correct logit drives the loss to zero
  Mat dom = Mat::Zero(1, 3);
  dom(0, 1) = 40.0;
  CHECK(cross_entropy_value(dom, {1}) < 1e-12);

  std::mt19937_64 rng(1);
  Mat logits = random_mat(rng, 5, 7, -4.0, 4.0);
  std::vector<Index> targets = {3, 0, 6, 2, 2};
  long double want = 0.0L;
  for (Index i = 0; i < 5; ++i) want += nll_oracle(logits, i, targets[static_cast<size_t>(i)]);
  want /= 5.0L;
  CHECK(cross_entropy_value(logits, targets) ==
        doctest::Approx(static_cast<double>(want)).epsilon(1e-10));
}

TEST_CASE("cross entropy respects position masks") {
  std::mt19937_64 rng(2);
  Mat logits = random_mat(rng, 4, 5);
  std::vector<Index> targets = {0, 1, 2, 3};
  std::vector<bool> mask = {true, false, true, false};
  long double want = (nll_oracle(logits, 0, 0) + nll_oracle(logits, 2, 2)) / 2.0L;
  CHECK(cross_entropy_value(logits, targets, &mask) ==
        doctest::Approx(static_cast<double>(want)).epsilon(1e-10));

  std::vector<bool> none(4, false);
  CHECK(cross_entropy_value(logits, targets, &none) == 0.0);
}

TEST_CASE("cross entropy rejects out-of-vocabulary targets") {
  Mat logits = Mat::Zero(2, 3);
  CHECK_THROWS_AS(cross_entropy_value(logits, {0, 3}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy_value(logits, {0}), std::invalid_argument);
}

TEST_CASE("z-loss zero cases and oracle") {
  // single logit 0 -> lse = 0
  CHECK(z_loss_value(Mat::Zero(1, 1)) == doctest::Approx(0.0));
  // [a, a] with a = -ln 2 -> lse = a + ln 2 = 0
  Mat neg = Mat::Constant(1, 2, -std::log(2.0));
  CHECK(z_loss_value(neg) < 1e-28);

  std::mt19937_64 rng(3);
  Mat logits = random_mat(rng, 6, 5, -3.0, 3.0);
  long double want = 0.0L;
  for (Index i = 0; i < 6; ++i) {
    long double mx = logits.row(i).maxCoeff();
    long double z = 0.0L;
    for (Index j = 0; j < 5; ++j) z += expl(static_cast<long double>(logits(i, j)) - mx);
    long double lse = logl(z) + mx;
    want += lse * lse;
  }
  want /= 6.0L;
  CHECK(z_loss_value(logits) == doctest::Approx(static_cast<double>(want)).epsilon(1e-10));
}

TEST_CASE("aux loss: proportional shares zero the concentration term") {
  LossWeights w;
  w.lambda1 = 0.5;
  w.lambda2 = 0.25;
  Mat a(1, 2), n(1, 2);
  a << 3, 1;
  n << 6, 2;
  std::mt19937_64 rng(4);
  Mat wg = random_mat(rng, 3, 2);
  double got = aux_loss_value(a, n, wg, w);
  CHECK(got == doctest::Approx(w.lambda2 * wg.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("aux loss: maximal mismatch gives lambda1 times two") {
  LossWeights w;
  w.lambda1 = 0.7;
  w.lambda2 = 0.0;
  Mat a(1, 2), n(1, 2);
  a << 1, 0;
  n << 0, 1;
  Mat wg = Mat::Zero(2, 2);
  CHECK(aux_loss_value(a, n, wg, w) == doctest::Approx(w.lambda1 * 2.0).epsilon(1e-12));
}

TEST_CASE("aux loss: zero totals fall back to the regularizer") {
  LossWeights w;
  w.lambda1 = 1.0;
  w.lambda2 = 0.5;
  std::mt19937_64 rng(5);
  Mat wg = random_mat(rng, 3, 2);
  Mat zero = Mat::Zero(1, 2);
  CHECK(aux_loss_value(zero, zero, wg, w) ==
        doctest::Approx(w.lambda2 * wg.squaredNorm()).epsilon(1e-12));
  Mat a(1, 2);
  a << 1, 2;
  CHECK(aux_loss_value(a, zero, wg, w) ==
        doctest::Approx(w.lambda2 * wg.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("aux loss matches a direct formula oracle on random K=4 instances") {
  std::mt19937_64 rng(6);
  LossWeights w;
  w.lambda1 = 0.01;
  w.lambda2 = 1e-4;
  for (int rep = 0; rep < 200; ++rep) {
    Mat a = random_mat(rng, 1, 4, 0.0, 1.0);
    Mat n = random_mat(rng, 1, 4, 0.01, 3.0);
    Mat wg = random_mat(rng, 5, 4);
    double got = aux_loss_value(a, n, wg, w);
    double term1 = 0.0;
    for (int e = 0; e < 4; ++e) {
      double d = a(0, e) / a.sum() - n(0, e) / n.sum();
      term1 += d * d;
    }
    double want = w.lambda1 * term1 + w.lambda2 * wg.squaredNorm();
    CHECK(std::abs(got - want) < 1e-12);
  }
}

TEST_CASE("aux loss is invariant to positive rescaling of both share vectors") {
  std::mt19937_64 rng(7);
  LossWeights w;
  Mat a = random_mat(rng, 1, 3, 0.1, 1.0);
  Mat n = random_mat(rng, 1, 3, 0.1, 1.0);
  Mat wg = random_mat(rng, 4, 3);
  double base = aux_loss_value(a, n, wg, w);
  CHECK(aux_loss_value(3.7 * a, n, wg, w) == doctest::Approx(base).epsilon(1e-12));
  CHECK(aux_loss_value(a, 0.25 * n, wg, w) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("aux loss gradients match finite differences") {
  std::mt19937_64 rng(8);
  LossWeights w;
  w.lambda1 = 0.3;
  w.lambda2 = 0.05;
  Mat a = random_mat(rng, 1, 4, 0.1, 1.0);
  Mat n0 = random_mat(rng, 1, 4, 0.2, 2.0);
  Mat wg0 = random_mat(rng, 5, 4);

  ad::Tape t;
  ad::Var n = t.leaf(n0);
  ad::Var wg = t.leaf(wg0);
  t.backward(aux_loss(t, a, n, wg, w));

  Mat fd_wg = ad::finite_diff(
      [&](const Mat& p) { return aux_loss_value(a, n0, p, w); }, wg0, 1e-3);
  Mat fd_n = ad::finite_diff(
      [&](const Mat& p) { return aux_loss_value(a, p, wg0, w); }, n0, 1e-4);
  CHECK((t.grad(wg) - fd_wg).norm() / std::max(fd_wg.norm(), 1e-8) < 1e-4);
  CHECK((t.grad(n) - fd_n).norm() / std::max(fd_n.norm(), 1e-8) < 1e-4);
}

TEST_CASE("cross entropy and z-loss gradients match finite differences") {
  std::mt19937_64 rng(9);
  Mat logits0 = random_mat(rng, 4, 6, -2.0, 2.0);
  std::vector<Index> targets = {1, 5, 0, 3};

  ad::Tape t;
  ad::Var logits = t.leaf(logits0);
  t.backward(cross_entropy(t, logits, targets));
  Mat fd = ad::finite_diff(
      [&](const Mat& p) { return cross_entropy_value(p, targets); }, logits0, 1e-4);
  CHECK((t.grad(logits) - fd).norm() / std::max(fd.norm(), 1e-8) < 1e-4);

  ad::Tape t2;
  ad::Var logits2 = t2.leaf(logits0);
  t2.backward(z_loss(t2, logits2));
  Mat fd2 = ad::finite_diff([&](const Mat& p) { return z_loss_value(p); }, logits0, 1e-4);
  CHECK((t2.grad(logits2) - fd2).norm() / std::max(fd2.norm(), 1e-8) < 1e-4);
}

TEST_CASE("stage composition: stage 1 is pure CE, stages 2-3 add weighted parts") {
  ad::Tape t;
  ad::Var ce = t.constant(Mat::Constant(1, 1, 1.25));
  ad::Var z = t.constant(Mat::Constant(1, 1, 4.0));
  ad::Var aux = t.constant(Mat::Constant(1, 1, 0.5));

  CHECK(t.val(stage_loss(t, 1, ce, std::nullopt, std::nullopt, 1e-3))(0, 0) == 1.25);

  ad::Var zero = t.constant(Mat::Zero(1, 1));
  CHECK(t.val(stage_loss(t, 2, ce, zero, zero, 1e-3))(0, 0) == 1.25);

  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> uni(0.0, 3.0);
  for (int rep = 0; rep < 20; ++rep) {
    double cv = uni(rng), zv = uni(rng), av = uni(rng), coef = uni(rng);
    ad::Var c2 = t.constant(Mat::Constant(1, 1, cv));
    ad::Var z2 = t.constant(Mat::Constant(1, 1, zv));
    ad::Var a2 = t.constant(Mat::Constant(1, 1, av));
    double got = t.val(stage_loss(t, 3, c2, z2, a2, coef))(0, 0);
    CHECK(std::abs(got - (cv + coef * zv + av)) < 1e-12);
  }

  CHECK_THROWS_AS(stage_loss(t, 4, ce, z, aux, 1e-3), std::invalid_argument);
  CHECK_THROWS_AS(stage_loss(t, 0, ce, z, aux, 1e-3), std::invalid_argument);
  CHECK_THROWS_AS(stage_loss(t, 2, ce, std::nullopt, std::nullopt, 1e-3), std::invalid_argument);
}

TEST_CASE("all losses are nonnegative on random inputs") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 50; ++rep) {
    Mat logits = random_mat(rng, 3, 5, -5.0, 5.0);
    CHECK(cross_entropy_value(logits, {0, 1, 2}) >= 0.0);
    CHECK(z_loss_value(logits) >= 0.0);
    LossWeights w;
    Mat a = random_mat(rng, 1, 3, 0.0, 1.0);
    Mat n = random_mat(rng, 1, 3, 0.0, 1.0);
    Mat wg = random_mat(rng, 4, 3);
    CHECK(aux_loss_value(a, n, wg, w) >= 0.0);
  }
}
