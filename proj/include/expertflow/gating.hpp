// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Expert gating: vanilla top-k over softmax scores, and task-aware dynamic
// gating over cosine scores with a learnable per-expert threshold and a
// straight-through binary gate.

#pragma once

#include "expertflow/autodiff.hpp"
#include "expertflow/params.hpp"
#include "expertflow/types.hpp"

#include <vector>

namespace expertflow {

enum class GatingMode { TopK, Dynamic };

struct GatingParams {
  Param w_g;  // d x K, expert representation columns
  Param g;    // 1 x K, learnable activation thresholds
  double alpha = 1.0;          // task-importance coefficient, >= 0
  GatingMode mode = GatingMode::Dynamic;
  int top_k = 2;               // used in TopK mode only
  bool scalar_task_rate = false;  // read A_t as one scalar per task (mean over
                                  // experts) instead of a per-expert vector

  int experts() const { return static_cast<int>(w_g.v.cols()); }
};

// Two-layer feed-forward expert with a smooth gated activation (x * sigmoid x).
struct Expert {
  Param w1;  // d x h
  Param b1;  // 1 x h
  Param w2;  // h x d
  Param b2;  // 1 x d
};

struct RoutingDecision {
  std::vector<int> active;      // ascending expert indices
  std::vector<double> weights;  // mixing weights over `active`, sum to 1
  std::vector<double> scores;   // raw scores s(x), one per expert
  bool unrouted = false;        // Dynamic only: no expert activated
};

// Plain expert forward, the reference semantics for the tape path.
Mat expert_forward(const Expert& e, const Mat& x);

// Eq. 5: per-expert cosine similarity between the token and each gating
// column. Throws std::domain_error on a zero-norm token.
Mat cosine_scores(const Mat& x, const GatingParams& params);  // 1 x d -> 1 x K

// Eqs. 3-4 selection: softmax over W_g^T x, keep the k largest (ties to the
// lower index), renormalize the kept scores to sum 1.
RoutingDecision vanilla_topk_gate(const Mat& x, const GatingParams& params, int k);

// Eq. 6: active iff sigmoid((s + alpha * a_t) / (1 + alpha)) exceeds
// sigmoid(G); mixing weights are the sigmoid pre-activations of the active
// experts, renormalized. `task_rates` is the a_t vector (1 x K) for the
// token's task type.
RoutingDecision dynamic_gate(const Mat& x, const Mat& task_rates, const GatingParams& params);

struct RoutingRecord;  // lifecycle.hpp

// MoE layer forward over a batch of tokens. Y row i is the weighted mixture
// of active expert outputs for token i; unrouted tokens produce a zero row
// (the decoder block adds the residual). Deterministic given inputs.
struct MoeForwardOut {
  Mat y;
  std::vector<RoutingDecision> decisions;
};
MoeForwardOut moe_forward(const Mat& x, const std::vector<TaskType>& tags,
                          const std::vector<Expert>& experts, const GatingParams& params,
                          const RoutingRecord& record);

// --- tape integration -------------------------------------------------------

struct ExpertVars {
  ad::Var w1, b1, w2, b2;
};

struct MoeLayerVars {
  ad::Var w_g = -1;
  ad::Var g = -1;
  std::vector<ExpertVars> experts;
};

// Frozen routing snapshot for finite-difference checks: replaces the hard
// sign with an affine surrogate (pre-activation plus a constant offset) and
// pins the unrouted-row guard so the surrogate loss is smooth around the
// linearization point.
struct RoutingSnapshot {
  Mat ste_offset;      // Dynamic: sign(p) - p at the base point
  Mat topk_mask;       // TopK: the 0/1 selection mask at the base point
  Mat unrouted_guard;  // n x 1, 1 where no expert was active
};

struct MoeBuild {
  ad::Var y = -1;      // n x d mixed output
  ad::Var mass = -1;   // n x K differentiable gate mass (sigma or softmax)
  std::vector<RoutingDecision> decisions;
  RoutingSnapshot snapshot;
};

// Builds the MoE layer on the tape. `task_rates` is the full task-type x K
// rate matrix (constants for this step). When `frozen` is non-null the
// routing snapshot recorded by an earlier build is replayed instead of the
// hard gate.
MoeBuild build_moe_layer(ad::Tape& t, ad::Var x, const std::vector<TaskType>& tags,
                         const MoeLayerVars& vars, const GatingParams& params,
                         const Mat& task_rates, const RoutingSnapshot* frozen = nullptr);

// Expert MLP on the tape: (x W1 + b1) * sigmoid(..) W2 + b2.
ad::Var build_expert(ad::Tape& t, ad::Var x, const ExpertVars& e);

// Task-rate rows (n x K) looked up per token tag, honoring scalar mode.
Mat task_rate_rows(const Mat& task_rates, const std::vector<TaskType>& tags, bool scalar_mode);

// Renormalizes every gating column to unit L2 norm (Dynamic-mode invariant
// after each optimizer step). Zero columns are left untouched.
void renormalize_gating_columns(GatingParams& params);

}  // namespace expertflow
