// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: token cross-entropy, the squared log-partition z-loss,
// and the task-dependent auxiliary loss combining a concentration term (match
// the differentiable task-token assignment shares to the historical activation
// shares) with an L2 penalty on the gating columns.

#pragma once

#include "expertflow/autodiff.hpp"
#include "expertflow/types.hpp"

#include <optional>
#include <vector>

namespace expertflow {

struct LossWeights {
  double lambda1 = 0.01;   // concentration coefficient
  double lambda2 = 1e-4;   // gating-column regularization coefficient
  double z_coef = 1e-3;    // z-loss coefficient in the stage composition
  bool per_batch_rates = false;  // use batch activation rates instead of the
                                 // historical EMA as the concentration target
};

// Mean of -log softmax(logits)[target] over unmasked positions. `mask`, when
// given, marks positions that count (padding rows carry false). Targets must
// be valid column indices.
ad::Var cross_entropy(ad::Tape& t, ad::Var logits, const std::vector<Index>& targets,
                      const std::vector<bool>* mask = nullptr);

// Mean of logsumexp(logits_i)^2 over rows.
ad::Var z_loss(ad::Tape& t, ad::Var logits);

// lambda1 * sum_e (A_e/sum A - N_e/sum N)^2 + lambda2 * sum_e ||w_ge||^2.
// `a_e` (1 x K) is a constant snapshot; gradients flow through `n_soft`
// (1 x K differentiable assignment mass) and `w_g`. The concentration term is
// zero when either total is zero.
ad::Var aux_loss(ad::Tape& t, const Mat& a_e, ad::Var n_soft, ad::Var w_g,
                 const LossWeights& weights);

// Stage 1: ce. Stages 2-3: ce + z_coef * z + aux. Throws on any other stage.
ad::Var stage_loss(ad::Tape& t, int stage, ad::Var ce, std::optional<ad::Var> z,
                   std::optional<ad::Var> aux, double z_coef);

// Value-level conveniences for tests and reporting.
double cross_entropy_value(const Mat& logits, const std::vector<Index>& targets,
                           const std::vector<bool>* mask = nullptr);
double z_loss_value(const Mat& logits);
double aux_loss_value(const Mat& a_e, const Mat& n_soft, const Mat& w_g,
                      const LossWeights& weights);

}  // namespace expertflow
