// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "expertflow/lifecycle.hpp"

#include <random>

using namespace expertflow;

namespace {

Mat random_mat(std::mt19937_64& rng, Index r, Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> uni(lo, hi);
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = uni(rng);
  return m;
}

RoutingDecision decide(std::initializer_list<int> active, bool unrouted = false) {
  RoutingDecision d;
  d.active = active;
  d.weights.assign(d.active.size(), d.active.empty() ? 0.0 : 1.0 / d.active.size());
  d.unrouted = unrouted;
  return d;
}

std::vector<Expert> make_experts(std::mt19937_64& rng, int d, int h, int k) {
  std::vector<Expert> out;
  for (int e = 0; e < k; ++e) {
    Expert ex;
    ex.w1 = Param(random_mat(rng, d, h));
    ex.b1 = Param(random_mat(rng, 1, h));
    ex.w2 = Param(random_mat(rng, h, d));
    ex.b2 = Param(random_mat(rng, 1, d));
    out.push_back(std::move(ex));
  }
  return out;
}

GatingParams make_gating(std::mt19937_64& rng, int d, int k) {
  GatingParams p;
  p.w_g = Param(random_mat(rng, d, k));
  p.g = Param(random_mat(rng, 1, k, -0.5, 0.5));
  p.mode = GatingMode::Dynamic;
  p.alpha = 0.0;
  return p;
}

}  // namespace

TEST_CASE("record_batch: EMA arithmetic on the stated example") {
  // expert 0 activates on 3 of 4 TIME tokens, beta = 0.5, prior A = 0
  RoutingRecord r = make_record(2, 3);
  std::vector<RoutingDecision> ds = {decide({0}), decide({0}), decide({0}), decide({}, true)};
  std::vector<TaskType> tags(4, TaskType::Time);
  Mat x = Mat::Ones(4, 3);
  record_batch(ds, tags, x, 0.5, r);
  CHECK(r.a(static_cast<Index>(TaskType::Time), 0) == doctest::Approx(0.375).epsilon(1e-15));
  CHECK(r.a(static_cast<Index>(TaskType::Time), 1) == 0.0);
  CHECK(r.step == 1);
  CHECK(r.r_e[0] == 1);
  CHECK(r.r_e[1] == -1);
  CHECK(r.r_s_count == 1);
  CHECK(r.unrouted_frac == doctest::Approx(0.125).epsilon(1e-15));
}

TEST_CASE("record_batch: tasks with no tokens keep their rates") {
  RoutingRecord r = make_record(2, 3);
  r.a.row(static_cast<Index>(TaskType::Time)).setConstant(0.75);
  std::vector<RoutingDecision> ds = {decide({1})};
  std::vector<TaskType> tags = {TaskType::Score};
  record_batch(ds, tags, Mat::Ones(1, 3), 0.5, r);
  CHECK(r.a(static_cast<Index>(TaskType::Time), 0) == 0.75);
  CHECK(r.a(static_cast<Index>(TaskType::Time), 1) == 0.75);
  CHECK(r.a(static_cast<Index>(TaskType::Score), 1) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("record_batch: 200 random batches equal an independent replay oracle") {
  std::mt19937_64 rng(100);
  const int k = 3, d = 4;
  const double beta = 0.9;
  RoutingRecord r = make_record(k, d);

  Mat oracle_a = Mat::Zero(kNumTaskTypes, k);
  Mat oracle_ae = Mat::Zero(1, k);
  double oracle_uf = 0.0;
  Mat oracle_rs = Mat::Zero(1, d);
  long long oracle_rs_count = 0;

  std::uniform_int_distribution<int> n_tokens(1, 8);
  std::uniform_int_distribution<int> tag_pick(0, kNumTaskTypes - 1);
  std::uniform_int_distribution<int> subset(0, (1 << k) - 1);

  for (int step = 0; step < 200; ++step) {
    int n = n_tokens(rng);
    std::vector<RoutingDecision> ds;
    std::vector<TaskType> tags;
    Mat x = random_mat(rng, n, d);
    for (int i = 0; i < n; ++i) {
      int bits = subset(rng);
      RoutingDecision dec;
      for (int e = 0; e < k; ++e)
        if (bits & (1 << e)) dec.active.push_back(e);
      dec.unrouted = dec.active.empty();
      ds.push_back(dec);
      tags.push_back(static_cast<TaskType>(tag_pick(rng)));
    }
    record_batch(ds, tags, x, beta, r);

    // independent replay of the stated update rules
    Eigen::VectorXd task_count = Eigen::VectorXd::Zero(kNumTaskTypes);
    Mat task_hits = Mat::Zero(kNumTaskTypes, k);
    Mat all_hits = Mat::Zero(1, k);
    int unrouted = 0;
    for (int i = 0; i < n; ++i) {
      task_count(static_cast<Index>(tags[static_cast<size_t>(i)])) += 1;
      for (int e : ds[static_cast<size_t>(i)].active) {
        task_hits(static_cast<Index>(tags[static_cast<size_t>(i)]), e) += 1;
        all_hits(0, e) += 1;
      }
      if (ds[static_cast<size_t>(i)].unrouted) {
        ++unrouted;
        ++oracle_rs_count;
        oracle_rs += (x.row(i) - oracle_rs) / static_cast<double>(oracle_rs_count);
      }
    }
    for (Index tt = 0; tt < kNumTaskTypes; ++tt) {
      if (task_count(tt) == 0) continue;
      for (int e = 0; e < k; ++e)
        oracle_a(tt, e) = beta * oracle_a(tt, e) + (1 - beta) * task_hits(tt, e) / task_count(tt);
    }
    for (int e = 0; e < k; ++e)
      oracle_ae(0, e) = beta * oracle_ae(0, e) + (1 - beta) * all_hits(0, e) / n;
    oracle_uf = beta * oracle_uf + (1 - beta) * static_cast<double>(unrouted) / n;
  }

  CHECK((r.a - oracle_a).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((r.a_e - oracle_ae).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(r.unrouted_frac - oracle_uf) < 1e-12);
  CHECK((r.r_s_mean - oracle_rs).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(r.r_s_count == oracle_rs_count);
  for (Index tt = 0; tt < kNumTaskTypes; ++tt)
    for (int e = 0; e < k; ++e) {
      CHECK(r.a(tt, e) >= 0.0);
      CHECK(r.a(tt, e) <= 1.0);
    }
}

TEST_CASE("maybe_add_expert realizes the unrouted-mean initialization") {
  std::mt19937_64 rng(200);
  const int d = 2, h = 4, k = 2;
  LifecycleConfig cfg;
  cfg.tau_add = 0.05;
  cfg.k_max = 8;

  GatingParams gating = make_gating(rng, d, k);
  std::vector<Expert> experts = make_experts(rng, d, h, k);
  RoutingRecord r = make_record(k, d);
  r.unrouted_frac = 0.2;
  r.r_s_count = 5;
  r.r_s_mean << 3.0, 4.0;

  SUBCASE("new column is the normalized mean with zero threshold") {
    auto added = maybe_add_expert(r, gating, experts, cfg, rng);
    REQUIRE(added.has_value());
    CHECK(*added == k);
    CHECK(gating.experts() == k + 1);
    CHECK(gating.w_g.v(0, k) == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(gating.w_g.v(1, k) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(gating.w_g.v.col(k).norm() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(gating.g.v(0, k) == 0.0);
    CHECK(experts.size() == static_cast<size_t>(k + 1));
    CHECK(r.a.cols() == k + 1);
    CHECK(r.a.col(k).cwiseAbs().maxCoeff() == 0.0);
    CHECK(r.r_e.size() == static_cast<size_t>(k + 1));
    // R_S and the trigger reset after a successful addition
    CHECK(r.r_s_count == 0);
    CHECK(r.unrouted_frac == 0.0);
    CHECK(r.r_s_mean.cwiseAbs().maxCoeff() == 0.0);

    // the trigger token now activates the new expert (score 1 > threshold 0)
    Mat probe(1, d);
    probe << 3.0, 4.0;
    gating.alpha = 0.0;
    RoutingDecision dec = dynamic_gate(probe, Mat::Zero(1, k + 1), gating);
    CHECK(std::find(dec.active.begin(), dec.active.end(), k) != dec.active.end());
  }

  SUBCASE("below the trigger no expert is added") {
    r.unrouted_frac = 0.01;
    CHECK(!maybe_add_expert(r, gating, experts, cfg, rng).has_value());
    CHECK(gating.experts() == k);
  }

  SUBCASE("zero unrouted mean skips with a warning") {
    r.r_s_mean.setZero();
    std::string warning;
    CHECK(!maybe_add_expert(r, gating, experts, cfg, rng, &warning).has_value());
    CHECK(!warning.empty());
  }

  SUBCASE("K at k_max blocks growth") {
    cfg.k_max = k;
    CHECK(!maybe_add_expert(r, gating, experts, cfg, rng).has_value());
  }

  SUBCASE("the new body is the mean of the old experts up to noise") {
    auto added = maybe_add_expert(r, gating, experts, cfg, rng);
    REQUIRE(added.has_value());
    Mat mean_w1 = (experts[0].w1.v + experts[1].w1.v) / 2.0;
    CHECK((experts[2].w1.v - mean_w1).cwiseAbs().maxCoeff() < 0.2);  // 0.02 stdev noise
    CHECK((experts[2].w1.v - mean_w1).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("remove_stale_experts prunes below tau_min and compacts consistently") {
  std::mt19937_64 rng(300);
  const int d = 3, h = 4;
  LifecycleConfig cfg;
  cfg.tau_min = 0.01;
  cfg.k_min = 1;

  GatingParams gating = make_gating(rng, d, 3);
  std::vector<Expert> experts = make_experts(rng, d, h, 3);
  Mat w1_of_2 = experts[2].w1.v;
  RoutingRecord r = make_record(3, d);
  r.a_e << 0.5, 0.001, 0.3;
  r.a = random_mat(rng, kNumTaskTypes, 3, 0.0, 1.0);
  Mat a_keep_0 = r.a.col(0), a_keep_2 = r.a.col(2);
  r.r_e = {10, 2, 9};

  RemovalResult res = remove_stale_experts(r, gating, experts, cfg);
  CHECK(res.removed == std::vector<int>{1});
  CHECK(res.old_to_new == std::vector<int>{0, -1, 1});
  CHECK(gating.experts() == 2);
  CHECK(experts.size() == 2);
  CHECK(r.a_e.cols() == 2);
  CHECK(r.a_e(0, 1) == 0.3);
  CHECK((r.a.col(0) - a_keep_0).cwiseAbs().maxCoeff() == 0.0);
  CHECK((r.a.col(1) - a_keep_2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.r_e == std::vector<long long>{10, 9});
  CHECK((experts[1].w1.v - w1_of_2).cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("tau_min zero removes nothing (strict inequality)") {
    LifecycleConfig zero = cfg;
    zero.tau_min = 0.0;  // A_e >= 0, and the comparison is strict
    RoutingRecord r2 = make_record(2, d);
    r2.a_e << 0.0, 0.0;
    GatingParams g2 = make_gating(rng, d, 2);
    std::vector<Expert> e2 = make_experts(rng, d, h, 2);
    RemovalResult none = remove_stale_experts(r2, g2, e2, zero);
    CHECK(none.removed.empty());
    CHECK(g2.experts() == 2);
  }

  SUBCASE("k_min floor keeps the highest-rate candidates") {
    LifecycleConfig floor_cfg;
    floor_cfg.tau_min = 0.9;  // everyone is a candidate
    floor_cfg.k_min = 2;
    RoutingRecord r3 = make_record(3, d);
    r3.a_e << 0.1, 0.5, 0.3;
    GatingParams g3 = make_gating(rng, d, 3);
    std::vector<Expert> e3 = make_experts(rng, d, h, 3);
    RemovalResult res3 = remove_stale_experts(r3, g3, e3, floor_cfg);
    CHECK(res3.removed == std::vector<int>{0});  // keep 1 and 2, the top rates
    CHECK(g3.experts() == 2);
  }
}

TEST_CASE("removal leaves moe_forward bit-identical for tokens that avoided the expert") {
  std::mt19937_64 rng(400);
  const int d = 4, h = 6, k = 3;
  GatingParams gating = make_gating(rng, d, k);
  gating.g.v << -1.0, 3.0, -1.0;  // expert 1 practically never activates
  std::vector<Expert> experts = make_experts(rng, d, h, k);
  RoutingRecord r = make_record(k, d);

  Mat x = random_mat(rng, 8, d);
  std::vector<TaskType> tags(8, TaskType::Text);
  MoeForwardOut before = moe_forward(x, tags, experts, gating, r);
  for (const RoutingDecision& dec : before.decisions)
    REQUIRE(std::find(dec.active.begin(), dec.active.end(), 1) == dec.active.end());

  LifecycleConfig cfg;
  cfg.tau_min = 0.01;
  cfg.k_min = 1;
  r.a_e << 0.5, 0.0, 0.5;
  RemovalResult res = remove_stale_experts(r, gating, experts, cfg);
  REQUIRE(res.removed == std::vector<int>{1});

  MoeForwardOut after = moe_forward(x, tags, experts, gating, r);
  CHECK((before.y - after.y).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("addition never changes scores of existing experts") {
  std::mt19937_64 rng(500);
  const int d = 4, h = 4, k = 2;
  GatingParams gating = make_gating(rng, d, k);
  std::vector<Expert> experts = make_experts(rng, d, h, k);
  RoutingRecord r = make_record(k, d);
  r.unrouted_frac = 1.0;
  r.r_s_count = 3;
  r.r_s_mean = random_mat(rng, 1, d);

  Mat x = random_mat(rng, 1, d);
  Mat scores_before = cosine_scores(x, gating);
  LifecycleConfig cfg;
  REQUIRE(maybe_add_expert(r, gating, experts, cfg, rng).has_value());
  Mat scores_after = cosine_scores(x, gating);
  for (int e = 0; e < k; ++e) CHECK(scores_after(0, e) == scores_before(0, e));
}

TEST_CASE("lifecycle keeps gating, experts, and record aligned") {
  std::mt19937_64 rng(600);
  const int d = 3, h = 4;
  GatingParams gating = make_gating(rng, d, 4);
  std::vector<Expert> experts = make_experts(rng, d, h, 4);
  RoutingRecord r = make_record(4, d);
  r.a_e << 0.4, 0.001, 0.002, 0.5;
  LifecycleConfig cfg;
  cfg.k_min = 2;
  remove_stale_experts(r, gating, experts, cfg);
  CHECK(gating.experts() == static_cast<int>(experts.size()));
  CHECK(r.a.cols() == gating.experts());
  CHECK(r.a_e.cols() == gating.experts());
  CHECK(static_cast<int>(r.r_e.size()) == gating.experts());
  CHECK(gating.g.v.cols() == gating.experts());

  r.unrouted_frac = 1.0;
  r.r_s_count = 1;
  r.r_s_mean = random_mat(rng, 1, d);
  maybe_add_expert(r, gating, experts, cfg, rng);
  CHECK(gating.experts() == static_cast<int>(experts.size()));
  CHECK(r.a.cols() == gating.experts());
  CHECK(static_cast<int>(r.r_e.size()) == gating.experts());
}

TEST_CASE("activation CSV: schema, zero record, hand-built rate") {
  RoutingRecord fresh = make_record(2, 3);
  std::vector<const RoutingRecord*> layers = {&fresh};
  std::string csv = export_activation_csv(layers);
  CHECK(csv.rfind("layer,expert,task_type,activation_rate\n", 0) == 0);
  CHECK(csv.find("0,0,TIME,0.000000\n") != std::string::npos);
  CHECK(csv.find("0,1,VISUAL,0.000000\n") != std::string::npos);

  // hand-built A with layer index 4 and A[SCORE, 7] = 0.9
  std::vector<RoutingRecord> recs;
  for (int i = 0; i < 5; ++i) recs.push_back(make_record(8, 3));
  recs[4].a(static_cast<Index>(TaskType::Score), 7) = 0.9;
  std::vector<const RoutingRecord*> five;
  for (const RoutingRecord& r : recs) five.push_back(&r);
  std::string csv5 = export_activation_csv(five);
  CHECK(csv5.find("4,7,SCORE,0.900000\n") != std::string::npos);

  // golden determinism: regenerating the CSV is byte-identical
  CHECK(export_activation_csv(five) == csv5);
  // LF endings only
  CHECK(csv5.find('\r') == std::string::npos);
}
