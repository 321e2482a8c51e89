// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of the gradients, at two granularities: a
// battery over individual tape ops, and the full d=16 single-block model with
// the straight-through surrogate as the differentiable reference.

#pragma once

#include "expertflow/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace expertflow {

struct GradCheckEntry {
  std::string name;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  double max_rel_err = 0.0;
  std::string worst_param;
  double gate_margin = 0.0;  // min |pre-activation| of the checked batch
};

// Full-model check: d=16, K=4, one block, stage-3 loss trio, batch chosen so
// every dynamic-gate pre-activation sits > 0.05 from the sign discontinuity.
// Central differences with h = 1e-3 against the frozen-routing surrogate.
GradCheckReport run_model_gradcheck(std::uint64_t seed = 7);

// Per-op battery on random inputs in [-2, 2]; returns entries named by op.
std::vector<GradCheckEntry> run_op_gradchecks(std::uint64_t seed = 11);

}  // namespace expertflow
