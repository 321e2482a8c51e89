// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense f64 matrices.
//
// A Tape is a define-by-run graph: every op evaluates eagerly when recorded,
// so downstream code can inspect values (e.g. routing masks) while the graph
// is still being built. Values are immutable once created; backward() walks
// the nodes in reverse creation order, which is a valid reverse topological
// order by construction.

#pragma once

#include "expertflow/types.hpp"

#include <functional>
#include <string>
#include <vector>

namespace expertflow::ad {

using Var = int;  // node id into Tape::nodes_

struct Node {
  const char* op;
  std::vector<Var> inputs;
  Mat value;
  Mat grad;  // allocated only when needs_grad
  bool needs_grad = false;
  std::function<void(class Tape&)> back;  // empty for leaves/constants
};

class Tape {
 public:
  // Leaves. Parameters want gradients; constants never do.
  Var leaf(Mat value, bool needs_grad = true);
  Var constant(Mat value) { return leaf(std::move(value), false); }

  // Elementwise, same shape.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var sqrt(Var a);
  Var sigmoid(Var a);

  // Binary sign gate with a straight-through backward: forward is 1 where the
  // pre-activation is > 0 and 0 elsewhere (sign(0) = 0), backward copies the
  // upstream gradient to the pre-activation unchanged.
  Var ste_sign(Var a);

  // Broadcasts. r is 1 x m, c is n x 1.
  Var add_rowvec(Var a, Var r);
  Var mul_rowvec(Var a, Var r);
  Var div_rowvec(Var a, Var r);
  Var mul_colvec(Var a, Var c);
  Var div_colvec(Var a, Var c);

  // Linear algebra.
  Var matmul(Var a, Var b);
  Var transpose(Var a);

  // Reductions.
  Var rowsum(Var a);  // n x m -> n x 1
  Var colsum(Var a);  // n x m -> 1 x m
  Var sum(Var a);     // n x m -> 1 x 1

  // Row-stable softmax / log-sum-exp (max subtraction per row).
  Var softmax_rows(Var a);
  Var logsumexp_rows(Var a);  // n x m -> n x 1

  // Row selection. gather duplicates rows; its backward scatter-adds, so the
  // same source row may be picked any number of times.
  Var gather_rows(Var a, std::vector<Index> idx);
  // Inverse layout op: k x m rows placed into an n x m zero matrix at idx
  // (accumulating on duplicate indices).
  Var scatter_rows(Var a, std::vector<Index> idx, Index n_rows);

  Var slice_rows(Var a, Index start, Index count);
  Var slice_cols(Var a, Index start, Index count);

  // Sum of per-row negative log-likelihoods: sum_i (lse(row_i) - row_i[t_i]).
  // targets are class indices into the columns of `logits`.
  Var nll_sum(Var logits, std::vector<Index> targets);

  // Scalar loss -> leaf gradients. Throws if `loss` is not 1x1. Gradients
  // accumulate; call zero_grad() between repeated backward passes.
  void backward(Var loss);
  void zero_grad();

  const Mat& val(Var v) const { return nodes_[static_cast<size_t>(v)].value; }
  const Mat& grad(Var v) const;
  Mat& grad_mut(Var v) { return nodes_[static_cast<size_t>(v)].grad; }
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v)].needs_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  Var push(const char* op, std::vector<Var> inputs, Mat value,
           std::function<void(Tape&)> back);

  std::vector<Node> nodes_;
};

// Central finite differences, (f(x+h e) - f(x-h e)) / 2h per coordinate.
// The test oracle for every differentiable op and for full-model checks.
Mat finite_diff(const std::function<double(const Mat&)>& f, const Mat& theta, double h);

// Free-function forms of the row-stable kernels, usable outside a tape.
Mat softmax_rows(const Mat& x);
Mat sigmoid(const Mat& x);

}  // namespace expertflow::ad
