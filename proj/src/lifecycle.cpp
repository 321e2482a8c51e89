// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/lifecycle.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace expertflow {

RoutingRecord make_record(int n_experts, int dim) {
  RoutingRecord r;
  r.a = Mat::Zero(kNumTaskTypes, n_experts);
  r.a_e = Mat::Zero(1, n_experts);
  r.r_e.assign(static_cast<size_t>(n_experts), -1);
  r.r_s_mean = Mat::Zero(1, dim);
  return r;
}

void record_batch(const std::vector<RoutingDecision>& decisions,
                  const std::vector<TaskType>& tags, const Mat& x, double beta,
                  RoutingRecord& record) {
  if (decisions.size() != tags.size())
    throw std::invalid_argument("record_batch: decisions and tags must align");
  if (x.rows() != static_cast<Index>(decisions.size()))
    throw std::invalid_argument("record_batch: one embedding row per decision required");
  const int K = record.experts();
  const Index n = x.rows();

  Mat task_hits = Mat::Zero(kNumTaskTypes, K);
  Eigen::VectorXd task_counts = Eigen::VectorXd::Zero(kNumTaskTypes);
  Mat all_hits = Mat::Zero(1, K);
  Index unrouted = 0;

  record.step += 1;
  for (Index i = 0; i < n; ++i) {
    const RoutingDecision& d = decisions[static_cast<size_t>(i)];
    Index t = static_cast<Index>(tags[static_cast<size_t>(i)]);
    task_counts(t) += 1.0;
    for (int e : d.active) {
      task_hits(t, e) += 1.0;
      all_hits(0, e) += 1.0;
      record.r_e[static_cast<size_t>(e)] = record.step;
    }
    if (d.unrouted) {
      ++unrouted;
      // Running mean over all unrouted tokens seen since the last reset.
      record.r_s_count += 1;
      record.r_s_mean += (x.row(i) - record.r_s_mean) / static_cast<double>(record.r_s_count);
    }
  }

  for (Index t = 0; t < kNumTaskTypes; ++t) {
    if (task_counts(t) == 0.0) continue;  // no evidence, rates unchanged
    for (int e = 0; e < K; ++e) {
      double rate = task_hits(t, e) / task_counts(t);
      record.a(t, e) = beta * record.a(t, e) + (1.0 - beta) * rate;
    }
  }
  if (n > 0) {
    for (int e = 0; e < K; ++e) {
      double rate = all_hits(0, e) / static_cast<double>(n);
      record.a_e(0, e) = beta * record.a_e(0, e) + (1.0 - beta) * rate;
    }
    double frac = static_cast<double>(unrouted) / static_cast<double>(n);
    record.unrouted_frac = beta * record.unrouted_frac + (1.0 - beta) * frac;
  }
}

std::optional<int> maybe_add_expert(RoutingRecord& record, GatingParams& gating,
                                    std::vector<Expert>& experts, const LifecycleConfig& cfg,
                                    std::mt19937_64& rng, std::string* warning) {
  const int K = gating.experts();
  if (record.unrouted_frac <= cfg.tau_add || record.r_s_count <= 0 || K >= cfg.k_max ||
      experts.empty())
    return std::nullopt;
  double norm = record.r_s_mean.norm();
  if (norm <= 0.0) {
    if (warning)
      *warning = "expert addition skipped: unrouted mean is the zero vector and cannot "
                 "be normalized";
    return std::nullopt;
  }

  // New gating column aligned with the unrouted aggregate; threshold 0.
  gating.w_g.v.conservativeResize(Eigen::NoChange, K + 1);
  gating.w_g.v.col(K) = (record.r_s_mean / norm).transpose();
  gating.w_g.m.conservativeResize(Eigen::NoChange, K + 1);
  gating.w_g.m.col(K).setZero();
  gating.w_g.s.conservativeResize(Eigen::NoChange, K + 1);
  gating.w_g.s.col(K).setZero();
  for (Mat* g : {&gating.g.v, &gating.g.m, &gating.g.s}) {
    g->conservativeResize(Eigen::NoChange, K + 1);
    (*g)(0, K) = 0.0;
  }

  // Body: mean of the existing expert parameters plus small noise, so the
  // loss surface does not jump at the addition step.
  std::normal_distribution<double> noise(0.0, 0.02);
  auto mean_plus_noise = [&](Param Expert::*field) {
    const Mat& proto = (experts.front().*field).v;
    Mat acc = Mat::Zero(proto.rows(), proto.cols());
    for (const Expert& e : experts) acc += (e.*field).v;
    acc /= static_cast<double>(experts.size());
    for (Index i = 0; i < acc.rows(); ++i)
      for (Index j = 0; j < acc.cols(); ++j) acc(i, j) += noise(rng);
    return Param(std::move(acc));
  };
  Expert fresh;
  fresh.w1 = mean_plus_noise(&Expert::w1);
  fresh.b1 = mean_plus_noise(&Expert::b1);
  fresh.w2 = mean_plus_noise(&Expert::w2);
  fresh.b2 = mean_plus_noise(&Expert::b2);
  experts.push_back(std::move(fresh));

  record.a.conservativeResize(Eigen::NoChange, K + 1);
  record.a.col(K).setZero();
  record.a_e.conservativeResize(Eigen::NoChange, K + 1);
  record.a_e(0, K) = 0.0;
  record.r_e.push_back(record.step);

  record.r_s_mean.setZero();
  record.r_s_count = 0;
  record.unrouted_frac = 0.0;
  return K;
}

RemovalResult remove_stale_experts(RoutingRecord& record, GatingParams& gating,
                                   std::vector<Expert>& experts, const LifecycleConfig& cfg) {
  const int K = gating.experts();
  RemovalResult res;
  std::vector<int> candidates;
  for (int e = 0; e < K; ++e)
    if (record.a_e(0, e) < cfg.tau_min) candidates.push_back(e);

  int survivors = K - static_cast<int>(candidates.size());
  if (survivors < cfg.k_min) {
    // Retain the highest-rate candidates to stay at k_min.
    int keep = std::min<int>(cfg.k_min - survivors, static_cast<int>(candidates.size()));
    std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
      return record.a_e(0, a) > record.a_e(0, b);
    });
    candidates.erase(candidates.begin(), candidates.begin() + keep);
    std::sort(candidates.begin(), candidates.end());
  }
  res.removed = candidates;
  res.old_to_new.assign(static_cast<size_t>(K), -1);
  if (candidates.empty()) {
    std::iota(res.old_to_new.begin(), res.old_to_new.end(), 0);
    return res;
  }

  std::vector<int> kept;
  size_t ci = 0;
  for (int e = 0; e < K; ++e) {
    if (ci < candidates.size() && candidates[ci] == e) {
      ++ci;
      continue;
    }
    res.old_to_new[static_cast<size_t>(e)] = static_cast<int>(kept.size());
    kept.push_back(e);
  }
  const int nk = static_cast<int>(kept.size());

  auto compact_cols = [&](Mat& m) {
    Mat out(m.rows(), nk);
    for (int j = 0; j < nk; ++j) out.col(j) = m.col(kept[static_cast<size_t>(j)]);
    m = std::move(out);
  };
  compact_cols(gating.w_g.v);
  compact_cols(gating.w_g.m);
  compact_cols(gating.w_g.s);
  compact_cols(gating.g.v);
  compact_cols(gating.g.m);
  compact_cols(gating.g.s);
  compact_cols(record.a);
  compact_cols(record.a_e);

  std::vector<Expert> kept_experts;
  std::vector<long long> kept_re;
  kept_experts.reserve(static_cast<size_t>(nk));
  for (int e : kept) {
    kept_experts.push_back(std::move(experts[static_cast<size_t>(e)]));
    kept_re.push_back(record.r_e[static_cast<size_t>(e)]);
  }
  experts = std::move(kept_experts);
  record.r_e = std::move(kept_re);
  return res;
}

std::string export_activation_csv(const std::vector<const RoutingRecord*>& layers) {
  std::string out = "layer,expert,task_type,activation_rate\n";
  char buf[64];
  for (size_t layer = 0; layer < layers.size(); ++layer) {
    const RoutingRecord& r = *layers[layer];
    for (int e = 0; e < r.experts(); ++e) {
      for (Index t = 0; t < kNumTaskTypes; ++t) {
        std::snprintf(buf, sizeof(buf), "%zu,%d,%s,%.6f\n", layer, e,
                      task_type_name(static_cast<TaskType>(t)), r.a(t, e));
        out += buf;
      }
    }
  }
  return out;
}

}  // namespace expertflow
