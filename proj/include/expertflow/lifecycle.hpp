// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Routing statistics per MoE layer and the expert add/remove lifecycle:
// unrouted-token aggregates seed new gating columns; experts whose overall
// activation rate stays under a threshold are pruned.

#pragma once

#include "expertflow/gating.hpp"
#include "expertflow/types.hpp"

#include <optional>
#include <random>
#include <string>
#include <vector>

namespace expertflow {

struct RoutingRecord {
  Mat a;    // task types x K, EMA of per-task activation rates in [0, 1]
  Mat a_e;  // 1 x K, EMA activation rate over all tokens
  std::vector<long long> r_e;  // last training step each expert activated, -1 if never
  Mat r_s_mean;                // 1 x d running mean of unrouted token embeddings
  long long r_s_count = 0;
  double unrouted_frac = 0.0;  // EMA of the per-batch unrouted fraction
  long long step = 0;

  int experts() const { return static_cast<int>(a.cols()); }
};

RoutingRecord make_record(int n_experts, int dim);

struct LifecycleConfig {
  double ema_decay = 0.99;  // beta
  double tau_min = 0.01;    // removal threshold on A_e
  double tau_add = 0.05;    // addition trigger on the unrouted-fraction EMA
  long long window = 200;   // steps between lifecycle checks
  long long warmup = 500;   // steps before any add/remove
  int k_min = 2;
  int k_max = 16;
};

// Folds one batch of routing decisions into the record. Per (task, expert)
// the batch rate is activated-task-tokens / task-tokens; tasks absent from
// the batch leave their row untouched. `x` supplies the embeddings of
// unrouted tokens for the R_S running mean.
void record_batch(const std::vector<RoutingDecision>& decisions,
                  const std::vector<TaskType>& tags, const Mat& x, double beta,
                  RoutingRecord& record);

// Adds an expert when the unrouted-fraction EMA exceeds tau_add: the new
// gating column is the normalized R_S mean with threshold 0, the new expert
// body is the parameter mean of the existing experts plus N(0, 0.02) noise.
// Resets R_S and the unrouted EMA on success. Returns the new expert index,
// or nullopt when the trigger did not fire (warning set if the trigger fired
// but the R_S mean was the zero vector).
std::optional<int> maybe_add_expert(RoutingRecord& record, GatingParams& gating,
                                    std::vector<Expert>& experts, const LifecycleConfig& cfg,
                                    std::mt19937_64& rng, std::string* warning = nullptr);

struct RemovalResult {
  std::vector<int> removed;      // ascending original indices
  std::vector<int> old_to_new;   // length = old K, -1 for removed experts
};

// Prunes experts with A_e < tau_min, never dropping below k_min (the
// highest-rate candidates are retained when needed). Gating columns,
// thresholds, expert bodies and every record column are compacted together.
RemovalResult remove_stale_experts(RoutingRecord& record, GatingParams& gating,
                                   std::vector<Expert>& experts, const LifecycleConfig& cfg);

// CSV of per-layer, per-expert, per-task activation rates. Header
// `layer,expert,task_type,activation_rate`, rows sorted by (layer, expert,
// task type), rates with 6 decimals, LF line endings.
std::string export_activation_csv(const std::vector<const RoutingRecord*>& layers);

}  // namespace expertflow
