// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/gradcheck.hpp"

#include "expertflow/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace expertflow {

namespace {

double rel_error(const Mat& a, const Mat& b) {
  double denom = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / denom;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 16;
  cfg.blocks = 1;
  cfg.attn_heads = 2;
  cfg.expert_hidden = 32;
  cfg.k_init = 4;
  cfg.text_vocab = 16;
  cfg.max_frames = 6;
  cfg.context = 48;
  cfg.gating = GatingMode::Dynamic;
  cfg.alpha = 1.0;
  cfg.max_events = 1;
  cfg.max_caption_len = 4;
  return cfg;
}

SynthConfig tiny_data() {
  SynthConfig dc;
  dc.n_classes = 3;
  dc.frames = 6;
  dc.max_events = 1;
  dc.noise = 0.3;
  dc.dim = 16;
  return dc;
}

}  // namespace

GradCheckReport run_model_gradcheck(std::uint64_t seed) {
  ModelConfig cfg = tiny_config();
  cfg.seed = seed;
  SynthConfig dc = tiny_data();
  LossWeights weights;

  // A state fresh out of the stage-2 transition, entered into stage 3 so the
  // full loss trio applies.
  DecoderState state = init_state(cfg);
  std::vector<SyntheticSample> warm = gen_split(dc, 3, seed * 101 + 1);
  LifecycleConfig lcfg;
  run_stage(state, 1, warm, 0, 1, lcfg, weights);
  run_stage(state, 2, warm, 0, 1, lcfg, weights);
  enter_stage(state, 3);
  // Nudge the task-rate matrix off zero so the a_t path matters, and park the
  // thresholds well outside the sigmoid band of the blended scores
  // (sigma(blended) stays within ~[0.39, 0.65]); every gate pre-activation is
  // then bounded away from the sign discontinuity while both mask branches
  // (always-on and always-off experts) stay covered.
  for (DecoderBlock& blk : state.blocks) {
    for (Index t = 0; t < kNumTaskTypes; ++t)
      for (Index e = 0; e < blk.record.a.cols(); ++e)
        blk.record.a(t, e) = 0.1 + 0.05 * static_cast<double>((t + e) % 4);
    blk.record.a_e = blk.record.a.colwise().mean();
    for (Index e = 0; e < blk.gate.g.v.cols(); ++e)
      blk.gate.g.v(0, e) = (e % 2 == 0) ? -2.0 : 2.0;
  }

  // Find a batch whose dynamic gates sit away from the sign discontinuity.
  std::vector<SyntheticSample> batch_storage;
  std::vector<const SyntheticSample*> batch;
  std::vector<std::vector<RoutingSnapshot>> snapshots;
  double margin = 0.0;
  for (std::uint64_t trial = 0; trial < 64; ++trial) {
    batch_storage = gen_split(dc, 2, seed * 977 + trial * 13 + 5);
    batch.clear();
    for (const SyntheticSample& s : batch_storage) batch.push_back(&s);
    ad::Tape t;
    Binding b = bind_params(t, state, {});
    BatchBuild built = build_batch_loss(t, b, state, batch, 3, weights);
    if (built.min_gate_margin > 0.05) {
      margin = built.min_gate_margin;
      snapshots = built.snapshots;
      break;
    }
  }
  if (margin <= 0.05)
    throw std::runtime_error("gradcheck: no batch with gate margin > 0.05 found");

  // Base gradients: every parameter participates, including the fusion table.
  std::vector<NamedParam> params = all_params(state);
  ad::Tape t;
  Binding b = bind_params(t, state, params);
  BatchBuild built = build_batch_loss(t, b, state, batch, 3, weights, &snapshots);
  t.backward(built.loss);

  GradCheckReport report;
  report.gate_margin = margin;
  auto loss_value = [&]() {
    ad::Tape ft;
    Binding fb = bind_params(ft, state, {});
    BatchBuild fbuilt = build_batch_loss(ft, fb, state, batch, 3, weights, &snapshots);
    return ft.val(fbuilt.loss)(0, 0);
  };
  for (NamedParam& np : params) {
    Mat analytic = t.grad(b.of(*np.p));
    Mat saved = np.p->v;
    Mat fd = ad::finite_diff(
        [&](const Mat& probe) {
          np.p->v = probe;
          return loss_value();
        },
        saved, 1e-3);
    np.p->v = saved;
    double err = rel_error(analytic, fd);
    report.params.push_back({np.name, err});
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_param = np.name;
    }
  }
  return report;
}

std::vector<GradCheckEntry> run_op_gradchecks(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-2.0, 2.0);
  auto rand_mat = [&](Index r, Index c) {
    Mat m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = uni(rng);
    return m;
  };

  std::vector<GradCheckEntry> out;
  // Each case builds loss = sum(proj .* op(inputs)) and compares the gradient
  // of every differentiable input against central differences.
  auto check = [&](const std::string& name, const std::vector<Mat>& inputs,
                   auto&& build) {
    ad::Tape t;
    std::vector<ad::Var> vars;
    for (const Mat& m : inputs) vars.push_back(t.leaf(m));
    ad::Var y = build(t, vars);
    Mat proj = rand_mat(t.val(y).rows(), t.val(y).cols());
    ad::Var loss = t.sum(t.mul(y, t.constant(proj)));
    t.backward(loss);

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
      Mat analytic = t.grad(vars[i]);
      std::vector<Mat> vals = inputs;
      Mat fd = ad::finite_diff(
          [&](const Mat& p) {
            vals[i] = p;
            ad::Tape ft;
            std::vector<ad::Var> fvars;
            for (const Mat& m : vals) fvars.push_back(ft.constant(m));
            ad::Var fy = build(ft, fvars);
            return ft.val(ft.sum(ft.mul(fy, ft.constant(proj))))(0, 0);
          },
          inputs[i], 1e-3);
      worst = std::max(worst, rel_error(analytic, fd));
    }
    out.push_back({name, worst});
  };

  Mat a = rand_mat(4, 5), b = rand_mat(4, 5);
  check("add", {a, b}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.add(v[0], v[1]); });
  check("sub", {a, b}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.sub(v[0], v[1]); });
  check("mul", {a, b}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.mul(v[0], v[1]); });
  check("scale", {a}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.scale(v[0], -1.7); });
  Mat pos = rand_mat(3, 4);
  pos = (pos.array().abs() + 0.5).matrix();
  check("sqrt", {pos}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.sqrt(v[0]); });
  check("sigmoid", {a}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.sigmoid(v[0]); });
  check("matmul", {rand_mat(3, 4), rand_mat(4, 2)},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.matmul(v[0], v[1]); });
  check("transpose", {a},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.transpose(v[0]); });
  check("add_rowvec", {a, rand_mat(1, 5)},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.add_rowvec(v[0], v[1]); });
  check("mul_rowvec", {a, rand_mat(1, 5)},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.mul_rowvec(v[0], v[1]); });
  Mat row_off = (rand_mat(1, 5).array().abs() + 1.0).matrix();
  check("div_rowvec", {a, row_off},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.div_rowvec(v[0], v[1]); });
  check("mul_colvec", {a, rand_mat(4, 1)},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.mul_colvec(v[0], v[1]); });
  Mat col_off = (rand_mat(4, 1).array().abs() + 1.0).matrix();
  check("div_colvec", {a, col_off},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.div_colvec(v[0], v[1]); });
  check("rowsum", {a}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.rowsum(v[0]); });
  check("colsum", {a}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.colsum(v[0]); });
  check("sum", {a}, [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.sum(v[0]); });
  check("softmax_rows", {a},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.softmax_rows(v[0]); });
  check("logsumexp_rows", {a},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.logsumexp_rows(v[0]); });
  check("gather_rows", {a}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
    return t.gather_rows(v[0], {2, 0, 2, 3});
  });
  check("scatter_rows", {rand_mat(3, 5)}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
    return t.scatter_rows(v[0], {4, 1, 4}, 6);
  });
  check("slice_rows", {a},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.slice_rows(v[0], 1, 2); });
  check("slice_cols", {a},
        [](ad::Tape& t, const std::vector<ad::Var>& v) { return t.slice_cols(v[0], 1, 3); });
  check("nll_sum", {rand_mat(5, 7)}, [](ad::Tape& t, const std::vector<ad::Var>& v) {
    return t.nll_sum(v[0], {0, 3, 6, 2, 2});
  });
  return out;
}

}  // namespace expertflow
