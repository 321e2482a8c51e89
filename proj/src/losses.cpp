// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/losses.hpp"

#include <stdexcept>

namespace expertflow {

ad::Var cross_entropy(ad::Tape& t, ad::Var logits, const std::vector<Index>& targets,
                      const std::vector<bool>* mask) {
  const Index n = t.val(logits).rows();
  if (static_cast<Index>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: one target per row required");
  std::vector<Index> rows;
  std::vector<Index> kept_targets;
  for (Index i = 0; i < n; ++i) {
    if (mask && !(*mask)[static_cast<size_t>(i)]) continue;
    rows.push_back(i);
    kept_targets.push_back(targets[static_cast<size_t>(i)]);
  }
  if (rows.empty()) return t.constant(Mat::Zero(1, 1));
  ad::Var picked = (rows.size() == static_cast<size_t>(n)) ? logits : t.gather_rows(logits, rows);
  ad::Var total = t.nll_sum(picked, kept_targets);
  return t.scale(total, 1.0 / static_cast<double>(rows.size()));
}

ad::Var z_loss(ad::Tape& t, ad::Var logits) {
  const Index n = t.val(logits).rows();
  ad::Var lse = t.logsumexp_rows(logits);
  return t.scale(t.sum(t.mul(lse, lse)), 1.0 / static_cast<double>(n));
}

ad::Var aux_loss(ad::Tape& t, const Mat& a_e, ad::Var n_soft, ad::Var w_g,
                 const LossWeights& weights) {
  if (a_e.rows() != 1 || t.val(n_soft).rows() != 1 || a_e.cols() != t.val(n_soft).cols())
    throw std::invalid_argument("aux_loss: a_e and n_soft must both be 1 x K");
  ad::Var reg = t.scale(t.sum(t.mul(w_g, w_g)), weights.lambda2);
  const double a_total = a_e.sum();
  const double n_total = t.val(n_soft).sum();
  if (a_total <= 0.0 || n_total <= 0.0) return reg;
  Mat a_share = a_e / a_total;
  // n shares stay differentiable: divide by the (scalar) sum on the tape.
  ad::Var n_share = t.div_colvec(n_soft, t.sum(n_soft));
  ad::Var diff = t.sub(n_share, t.constant(a_share));
  ad::Var concentration = t.scale(t.sum(t.mul(diff, diff)), weights.lambda1);
  return t.add(concentration, reg);
}

ad::Var stage_loss(ad::Tape& t, int stage, ad::Var ce, std::optional<ad::Var> z,
                   std::optional<ad::Var> aux, double z_coef) {
  switch (stage) {
    case 1:
      return ce;
    case 2:
    case 3: {
      if (!z || !aux)
        throw std::invalid_argument("stage_loss: stages 2-3 need z and aux parts");
      return t.add(ce, t.add(t.scale(*z, z_coef), *aux));
    }
    default:
      throw std::invalid_argument("stage_loss: unknown stage " + std::to_string(stage));
  }
}

double cross_entropy_value(const Mat& logits, const std::vector<Index>& targets,
                           const std::vector<bool>* mask) {
  ad::Tape t;
  return t.val(cross_entropy(t, t.constant(logits), targets, mask))(0, 0);
}

double z_loss_value(const Mat& logits) {
  ad::Tape t;
  return t.val(z_loss(t, t.constant(logits)))(0, 0);
}

double aux_loss_value(const Mat& a_e, const Mat& n_soft, const Mat& w_g,
                      const LossWeights& weights) {
  ad::Tape t;
  return t.val(aux_loss(t, a_e, t.constant(n_soft), t.constant(w_g), weights))(0, 0);
}

}  // namespace expertflow
