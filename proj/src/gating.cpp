// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/gating.hpp"

#include "expertflow/lifecycle.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace expertflow {

namespace {

// Keeps zero vectors finite inside the cosine without perturbing healthy
// norms: adding 1e-300 to a squared norm >= 1e-200 is a no-op in f64.
constexpr double kNormFloor = 1e-300;

std::vector<int> topk_indices(const Eigen::RowVectorXd& scores, int k) {
  std::vector<int> idx(static_cast<size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return scores(a) > scores(b); });
  idx.resize(static_cast<size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

Mat expert_forward(const Expert& e, const Mat& x) {
  Mat h = (x * e.w1.v).rowwise() + e.b1.v.row(0);
  Mat act = h.cwiseProduct(ad::sigmoid(h));
  return (act * e.w2.v).rowwise() + e.b2.v.row(0);
}

Mat cosine_scores(const Mat& x, const GatingParams& params) {
  if (x.rows() != 1 || x.cols() != params.w_g.v.rows())
    throw std::invalid_argument("cosine_scores: token must be 1 x d");
  double xn2 = x.squaredNorm();
  if (xn2 <= 0.0) throw std::domain_error("cosine_scores: zero-norm token cannot be routed");
  double xn = std::sqrt(xn2 + kNormFloor);
  const Mat& w = params.w_g.v;
  Mat out(1, w.cols());
  for (Index e = 0; e < w.cols(); ++e) {
    double wn = std::sqrt(w.col(e).squaredNorm() + kNormFloor);
    out(0, e) = x.row(0).dot(w.col(e)) / (xn * wn);
  }
  return out;
}

RoutingDecision vanilla_topk_gate(const Mat& x, const GatingParams& params, int k) {
  const int K = params.experts();
  if (params.mode != GatingMode::TopK)
    throw std::logic_error("vanilla_topk_gate: gating is not in TopK mode");
  if (k < 1 || k > K) throw std::invalid_argument("vanilla_topk_gate: k must be in [1, K]");
  Mat logits = x * params.w_g.v;  // 1 x K
  Mat g = ad::softmax_rows(logits);
  RoutingDecision d;
  d.scores.assign(g.data(), g.data() + K);
  d.active = topk_indices(g.row(0), k);
  double total = 0.0;
  for (int e : d.active) total += g(0, e);
  d.weights.reserve(d.active.size());
  for (int e : d.active) d.weights.push_back(g(0, e) / total);
  return d;
}

RoutingDecision dynamic_gate(const Mat& x, const Mat& task_rates, const GatingParams& params) {
  const int K = params.experts();
  if (task_rates.rows() != 1 || task_rates.cols() != K)
    throw std::invalid_argument("dynamic_gate: task rates must be 1 x K");
  Mat s = cosine_scores(x, params);
  Mat blended = (s + params.alpha * task_rates) / (1.0 + params.alpha);
  Mat sig = ad::sigmoid(blended);
  Mat thr = ad::sigmoid(params.g.v);
  RoutingDecision d;
  d.scores.assign(s.data(), s.data() + K);
  double total = 0.0;
  for (int e = 0; e < K; ++e) {
    if (sig(0, e) - thr(0, e) > 0.0) {
      d.active.push_back(e);
      total += sig(0, e);
    }
  }
  if (d.active.empty()) {
    d.unrouted = true;
    return d;
  }
  d.weights.reserve(d.active.size());
  for (int e : d.active) d.weights.push_back(sig(0, e) / total);
  return d;
}

Mat task_rate_rows(const Mat& task_rates, const std::vector<TaskType>& tags, bool scalar_mode) {
  Mat rows(static_cast<Index>(tags.size()), task_rates.cols());
  for (size_t i = 0; i < tags.size(); ++i) {
    Index t = static_cast<Index>(tags[i]);
    if (scalar_mode)
      rows.row(static_cast<Index>(i)).setConstant(task_rates.row(t).mean());
    else
      rows.row(static_cast<Index>(i)) = task_rates.row(t);
  }
  return rows;
}

ad::Var build_expert(ad::Tape& t, ad::Var x, const ExpertVars& e) {
  ad::Var h = t.add_rowvec(t.matmul(x, e.w1), e.b1);
  ad::Var act = t.mul(h, t.sigmoid(h));
  return t.add_rowvec(t.matmul(act, e.w2), e.b2);
}

MoeBuild build_moe_layer(ad::Tape& t, ad::Var x, const std::vector<TaskType>& tags,
                         const MoeLayerVars& vars, const GatingParams& params,
                         const Mat& task_rates, const RoutingSnapshot* frozen) {
  const int K = params.experts();
  if (K == 0) throw std::invalid_argument("moe layer: no experts configured");
  const Index n = t.val(x).rows();
  if (static_cast<Index>(tags.size()) != n)
    throw std::invalid_argument("moe layer: one tag per token required");

  MoeBuild out;
  ad::Var gate_mask = -1;  // n x K
  Mat raw_scores;          // values used for RoutingDecision::scores

  if (params.mode == GatingMode::Dynamic) {
    Mat tiny_row = Mat::Constant(n, 1, kNormFloor);
    Mat tiny_col = Mat::Constant(1, K, kNormFloor);
    ad::Var rn = t.sqrt(t.add(t.rowsum(t.mul(x, x)), t.constant(tiny_row)));
    ad::Var xn = t.div_colvec(x, rn);
    ad::Var cn = t.sqrt(t.add(t.colsum(t.mul(vars.w_g, vars.w_g)), t.constant(tiny_col)));
    ad::Var wn = t.div_rowvec(vars.w_g, cn);
    ad::Var scores = t.matmul(xn, wn);
    raw_scores = t.val(scores);

    Mat a_rows = task_rate_rows(task_rates, tags, params.scalar_task_rate);
    ad::Var blended =
        t.scale(t.add(scores, t.constant(params.alpha * a_rows)), 1.0 / (1.0 + params.alpha));
    ad::Var sig = t.sigmoid(blended);
    ad::Var thr = t.sigmoid(vars.g);
    ad::Var p = t.add_rowvec(sig, t.scale(thr, -1.0));
    if (frozen) {
      gate_mask = t.add(p, t.constant(frozen->ste_offset));
      out.snapshot = *frozen;
    } else {
      gate_mask = t.ste_sign(p);
      out.snapshot.ste_offset = t.val(gate_mask) - t.val(p);
    }
    out.mass = sig;
  } else {
    ad::Var logits = t.matmul(x, vars.w_g);
    ad::Var sm = t.softmax_rows(logits);
    raw_scores = t.val(sm);
    Mat mask;
    if (frozen) {
      mask = frozen->topk_mask;
      out.snapshot = *frozen;
    } else {
      const int k = params.top_k;
      if (k < 1 || k > K) throw std::invalid_argument("moe layer: top_k must be in [1, K]");
      mask = Mat::Zero(n, K);
      for (Index i = 0; i < n; ++i)
        for (int e : topk_indices(t.val(sm).row(i), k)) mask(i, e) = 1.0;
      out.snapshot.topk_mask = mask;
    }
    gate_mask = t.constant(mask);
    out.mass = sm;
  }

  ad::Var w_raw = t.mul(out.mass, gate_mask);
  ad::Var z = t.rowsum(w_raw);
  Mat guard;
  if (frozen) {
    guard = frozen->unrouted_guard;
  } else {
    guard = Mat::Zero(n, 1);
    for (Index i = 0; i < n; ++i)
      if (t.val(z)(i, 0) == 0.0) guard(i, 0) = 1.0;
    out.snapshot.unrouted_guard = guard;
  }
  ad::Var weights = t.div_colvec(w_raw, t.add(z, t.constant(guard)));

  ad::Var y = -1;
  for (int e = 0; e < K; ++e) {
    ad::Var ye = t.mul_colvec(build_expert(t, x, vars.experts[static_cast<size_t>(e)]),
                              t.slice_cols(weights, e, 1));
    y = (e == 0) ? ye : t.add(y, ye);
  }
  out.y = y;

  const Mat& mask_vals = t.val(gate_mask);
  const Mat& weight_vals = t.val(weights);
  out.decisions.resize(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    RoutingDecision& d = out.decisions[static_cast<size_t>(i)];
    d.scores.assign(raw_scores.row(i).data(), raw_scores.row(i).data() + K);
    for (int e = 0; e < K; ++e) {
      if (mask_vals(i, e) > 0.5) {
        d.active.push_back(e);
        d.weights.push_back(weight_vals(i, e));
      }
    }
    d.unrouted = d.active.empty();
  }
  return out;
}

MoeForwardOut moe_forward(const Mat& x, const std::vector<TaskType>& tags,
                          const std::vector<Expert>& experts, const GatingParams& params,
                          const RoutingRecord& record) {
  if (experts.size() != static_cast<size_t>(params.experts()))
    throw std::invalid_argument("moe_forward: expert count does not match gating width");
  if (params.experts() == 0) throw std::invalid_argument("moe_forward: no experts configured");
  ad::Tape t;
  ad::Var xv = t.constant(x);
  MoeLayerVars vars;
  vars.w_g = t.constant(params.w_g.v);
  vars.g = t.constant(params.g.v);
  for (const Expert& e : experts)
    vars.experts.push_back(
        {t.constant(e.w1.v), t.constant(e.b1.v), t.constant(e.w2.v), t.constant(e.b2.v)});
  MoeBuild b = build_moe_layer(t, xv, tags, vars, params, record.a);
  return {t.val(b.y), std::move(b.decisions)};
}

void renormalize_gating_columns(GatingParams& params) {
  Mat& w = params.w_g.v;
  for (Index e = 0; e < w.cols(); ++e) {
    double n = w.col(e).norm();
    if (n > 0.0) w.col(e) /= n;
  }
}

}  // namespace expertflow
