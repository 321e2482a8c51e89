// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace expertflow {

namespace {

constexpr double kRmsEps = 1e-8;
constexpr double kAttnMaskValue = -1e30;
constexpr double kAdamLr = 3e-4;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kGradClip = 1.0;

Mat gaussian(std::mt19937_64& rng, Index rows, Index cols, double stdev) {
  std::normal_distribution<double> g(0.0, stdev);
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = g(rng);
  return m;
}

Expert make_expert(std::mt19937_64& rng, int d, int h) {
  Expert e;
  e.w1 = Param(gaussian(rng, d, h, 0.02));
  e.b1 = Param(Mat::Zero(1, h));
  e.w2 = Param(gaussian(rng, h, d, 0.02));
  e.b2 = Param(Mat::Zero(1, d));
  return e;
}

Expert clone_with_noise(const Expert& src, std::mt19937_64& rng, double stdev) {
  Expert e;
  e.w1 = Param(src.w1.v + gaussian(rng, src.w1.v.rows(), src.w1.v.cols(), stdev));
  e.b1 = Param(src.b1.v + gaussian(rng, src.b1.v.rows(), src.b1.v.cols(), stdev));
  e.w2 = Param(src.w2.v + gaussian(rng, src.w2.v.rows(), src.w2.v.cols(), stdev));
  e.b2 = Param(src.b2.v + gaussian(rng, src.b2.v.rows(), src.b2.v.cols(), stdev));
  return e;
}

// y = (x / rms(x_row)) .* gain
ad::Var rmsnorm(ad::Tape& t, ad::Var x, ad::Var gain) {
  const Index d = t.val(x).cols();
  ad::Var ms = t.scale(t.rowsum(t.mul(x, x)), 1.0 / static_cast<double>(d));
  ad::Var rms = t.sqrt(t.add(ms, t.constant(Mat::Constant(t.val(x).rows(), 1, kRmsEps))));
  return t.mul_rowvec(t.div_colvec(x, rms), gain);
}

// Pre-norm causal attention block: x + Wo(softmax(QK^T / sqrt(dh) + mask) V).
ad::Var attention(ad::Tape& t, ad::Var x_normed, const DecoderBlock& blk, const Binding& b,
                  int n_heads) {
  const Index n = t.val(x_normed).rows();
  const Index d = t.val(x_normed).cols();
  const Index dh = d / n_heads;
  ad::Var q = t.matmul(x_normed, b.of(blk.wq));
  ad::Var k = t.matmul(x_normed, b.of(blk.wk));
  ad::Var v = t.matmul(x_normed, b.of(blk.wv));

  Mat mask(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) mask(i, j) = (j <= i) ? 0.0 : kAttnMaskValue;
  ad::Var mask_c = t.constant(mask);

  ad::Var out = -1;
  for (int h = 0; h < n_heads; ++h) {
    ad::Var qh = t.slice_cols(q, h * dh, dh);
    ad::Var kh = t.slice_cols(k, h * dh, dh);
    ad::Var vh = t.slice_cols(v, h * dh, dh);
    ad::Var scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    ad::Var attn = t.softmax_rows(t.add(scores, mask_c));
    ad::Var oh = t.matmul(attn, vh);
    ad::Var proj = t.matmul(oh, t.slice_rows(b.of(blk.wo), h * dh, dh));
    out = (h == 0) ? proj : t.add(out, proj);
  }
  return out;
}

// Mean-pooled number-token embedding per frame: rows gathers the digit rows,
// avg distributes 1/len weights.
ad::Var mean_token_embedding(ad::Tape& t, ad::Var table, const std::vector<std::vector<int>>& ids) {
  std::vector<Index> flat;
  for (const auto& group : ids)
    for (int id : group) flat.push_back(id);
  Mat avg = Mat::Zero(static_cast<Index>(ids.size()), static_cast<Index>(flat.size()));
  Index col = 0;
  for (size_t i = 0; i < ids.size(); ++i) {
    double w = 1.0 / static_cast<double>(ids[i].size());
    for (size_t j = 0; j < ids[i].size(); ++j) avg(static_cast<Index>(i), col++) = w;
  }
  return t.matmul(t.constant(avg), t.gather_rows(table, flat));
}

ad::Var build_fusion(ad::Tape& t, const Binding& b, const DecoderState& s, const ModelInput& in) {
  const Index T = in.frames.rows();
  if (static_cast<Index>(in.timestamps.size()) != T)
    throw std::invalid_argument("fuse_frame_tokens: one timestamp per frame required");
  if (!in.saliency_hints.empty() && static_cast<Index>(in.saliency_hints.size()) != T)
    throw std::invalid_argument("fuse_frame_tokens: one saliency hint per frame required");
  for (size_t i = 1; i < in.timestamps.size(); ++i)
    if (in.timestamps[i] < in.timestamps[i - 1])
      throw std::invalid_argument("fuse_frame_tokens: timestamps must be nondecreasing");

  ad::Var fused = t.matmul(t.constant(in.frames), b.of(s.frame_proj));
  std::vector<std::vector<int>> time_ids;
  time_ids.reserve(static_cast<size_t>(T));
  for (double ts : in.timestamps) time_ids.push_back(format_number(ts, NumberKind::Time));
  fused = t.add(fused, mean_token_embedding(t, b.of(s.time_tab), time_ids));
  if (!in.saliency_hints.empty()) {
    std::vector<std::vector<int>> score_ids;
    score_ids.reserve(static_cast<size_t>(T));
    for (int sc : in.saliency_hints) score_ids.push_back(format_number(sc, NumberKind::Score));
    fused = t.add(fused, mean_token_embedding(t, b.of(s.score_tab), score_ids));
  }
  return fused;
}

struct SequenceBuild {
  ad::Var hidden = -1;  // n x d after the final norm
  std::vector<TaskType> tags;
  std::vector<BlockTrace> blocks;
  Index prefix_len = 0;
  Index seq_len = 0;
};

// Embeds prefix + consumed stream tokens, runs all decoder blocks, applies
// the final norm. stream_cats[i] picks the embedding table of stream token i.
SequenceBuild build_sequence(ad::Tape& t, const Binding& b, DecoderState& s,
                             const ModelInput& in, const std::vector<int>& stream_ids,
                             const std::vector<HeadKind>& stream_cats,
                             const std::vector<TaskType>& stream_tags,
                             const ForwardOptions& opts) {
  const ModelConfig& cfg = s.cfg;
  const Index T = in.frames.rows();
  const Index Q = static_cast<Index>(in.query.size());
  const Index L = static_cast<Index>(stream_ids.size());
  const Index n = T + Q + L;
  if (n > cfg.context)
    throw std::invalid_argument("model_forward: sequence length " + std::to_string(n) +
                                " exceeds context " + std::to_string(cfg.context));

  SequenceBuild out;
  out.prefix_len = T + Q;
  out.seq_len = n;
  out.tags.assign(static_cast<size_t>(T), TaskType::Visual);
  for (Index i = 0; i < Q; ++i) out.tags.push_back(TaskType::Text);
  for (TaskType tag : stream_tags) out.tags.push_back(tag);

  // Prefix embeddings.
  ad::Var fused = build_fusion(t, b, s, in);
  std::vector<Index> query_rows;
  for (int id : in.query) {
    if (id < 0 || id >= cfg.text_vocab)
      throw std::invalid_argument("model_forward: query token outside the text vocabulary");
    query_rows.push_back(id);
  }
  ad::Var x = fused;
  if (Q > 0) {
    ad::Var qe = t.gather_rows(b.of(s.text_tab), query_rows);
    // Stack prefix parts by scattering into the full sequence.
    std::vector<Index> vis_idx(static_cast<size_t>(T));
    for (Index i = 0; i < T; ++i) vis_idx[static_cast<size_t>(i)] = i;
    std::vector<Index> q_idx(static_cast<size_t>(Q));
    for (Index i = 0; i < Q; ++i) q_idx[static_cast<size_t>(i)] = T + i;
    x = t.add(t.scatter_rows(fused, vis_idx, n), t.scatter_rows(qe, q_idx, n));
  } else if (L > 0) {
    std::vector<Index> vis_idx(static_cast<size_t>(T));
    for (Index i = 0; i < T; ++i) vis_idx[static_cast<size_t>(i)] = i;
    x = t.scatter_rows(fused, vis_idx, n);
  }
  if (L > 0) {
    // Gather stream token embeddings from their per-category tables.
    std::array<std::vector<Index>, 3> rows_by_cat;
    std::array<std::vector<Index>, 3> pos_by_cat;
    for (Index i = 0; i < L; ++i) {
      HeadKind cat = stream_cats[static_cast<size_t>(i)];
      int col = head_column_for_token(cat, stream_ids[static_cast<size_t>(i)], cfg.text_vocab);
      rows_by_cat[static_cast<int>(cat)].push_back(col);
      pos_by_cat[static_cast<int>(cat)].push_back(T + Q + i);
    }
    const Param* tables[3] = {&s.time_tab, &s.score_tab, &s.text_tab};
    for (int c = 0; c < 3; ++c) {
      if (rows_by_cat[c].empty()) continue;
      ad::Var emb = t.gather_rows(b.of(*tables[c]), rows_by_cat[c]);
      x = t.add(x, t.scatter_rows(emb, pos_by_cat[c], n));
    }
  }

  // Positions.
  std::vector<Index> pos_rows(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) pos_rows[static_cast<size_t>(i)] = i;
  x = t.add(x, t.gather_rows(b.of(s.pos_tab), pos_rows));

  // Blocks.
  out.blocks.resize(s.blocks.size());
  for (size_t bi = 0; bi < s.blocks.size(); ++bi) {
    DecoderBlock& blk = s.blocks[bi];
    ad::Var attn_out = attention(t, rmsnorm(t, x, b.of(blk.attn_gain)), blk, b, cfg.attn_heads);
    x = t.add(x, attn_out);
    ad::Var ffn_in = rmsnorm(t, x, b.of(blk.moe_gain));
    ad::Var ffn_out = -1;
    if (s.current_stage <= 1) {
      if (!blk.dense_ffn) throw std::logic_error("stage-1 forward without a dense FFN");
      ExpertVars ev{b.of(blk.dense_ffn->w1), b.of(blk.dense_ffn->b1), b.of(blk.dense_ffn->w2),
                    b.of(blk.dense_ffn->b2)};
      ffn_out = build_expert(t, ffn_in, ev);
    } else {
      MoeLayerVars vars;
      vars.w_g = b.of(blk.gate.w_g);
      vars.g = b.of(blk.gate.g);
      for (const Expert& e : blk.experts)
        vars.experts.push_back({b.of(e.w1), b.of(e.b1), b.of(e.w2), b.of(e.b2)});
      const RoutingSnapshot* frozen =
          (opts.frozen && bi < opts.frozen->size()) ? &(*opts.frozen)[bi] : nullptr;
      MoeBuild mb = build_moe_layer(t, ffn_in, out.tags, vars, blk.gate, blk.record.a, frozen);
      ffn_out = mb.y;
      BlockTrace& trace = out.blocks[bi];
      trace.mass = mb.mass;
      trace.decisions = std::move(mb.decisions);
      trace.snapshot = std::move(mb.snapshot);
      trace.moe_input = t.val(ffn_in);
    }
    x = t.add(x, ffn_out);
  }
  out.hidden = rmsnorm(t, x, b.of(s.final_gain));
  return out;
}

// Grammar walk over the teacher stream: per target token its category (which
// head predicts it and which table embeds it) and its routing tag.
struct StreamWalk {
  std::vector<HeadKind> cats;
  std::vector<TaskType> tags;
};
StreamWalk walk_stream(const std::vector<int>& ids) {
  StreamWalk w;
  EventCursor cursor;
  ParseError err;
  for (int id : ids) {
    w.cats.push_back(cursor.head());
    if (!cursor.feed(id, &err))
      throw std::invalid_argument("teacher stream rejected by the grammar: " + err.to_string());
    w.tags.push_back(cursor.last_tag());
  }
  return w;
}

const Param* head_param(const DecoderState& s, HeadKind h) {
  switch (h) {
    case HeadKind::Time: return &s.head_time;
    case HeadKind::Score: return &s.head_score;
    case HeadKind::Text: return &s.head_text;
  }
  return nullptr;
}

}  // namespace

DecoderState init_state(const ModelConfig& cfg) {
  if (cfg.d % cfg.attn_heads != 0)
    throw std::invalid_argument("init_state: d must be divisible by attn_heads");
  DecoderState s;
  s.cfg = cfg;
  s.rng.seed(cfg.seed);
  const int d = cfg.d;
  const int v2 = cfg.text_vocab + 2;
  s.time_tab = Param(gaussian(s.rng, kStructuredVocab, d, 0.02));
  s.score_tab = Param(gaussian(s.rng, kStructuredVocab, d, 0.02));
  s.text_tab = Param(gaussian(s.rng, v2, d, 0.02));
  s.pos_tab = Param(gaussian(s.rng, cfg.context, d, 0.02));
  s.frame_proj = Param(Mat::Identity(d, d));
  s.final_gain = Param(Mat::Ones(1, d));
  s.head_time = Param(gaussian(s.rng, d, kStructuredVocab, 0.02));
  s.head_score = Param(gaussian(s.rng, d, kStructuredVocab, 0.02));
  s.head_text = Param(gaussian(s.rng, d, v2, 0.02));
  s.blocks.resize(static_cast<size_t>(cfg.blocks));
  for (DecoderBlock& blk : s.blocks) {
    blk.wq = Param(gaussian(s.rng, d, d, 0.02));
    blk.wk = Param(gaussian(s.rng, d, d, 0.02));
    blk.wv = Param(gaussian(s.rng, d, d, 0.02));
    blk.wo = Param(gaussian(s.rng, d, d, 0.02));
    blk.attn_gain = Param(Mat::Ones(1, d));
    blk.moe_gain = Param(Mat::Ones(1, d));
    blk.dense_ffn = make_expert(s.rng, d, cfg.expert_hidden);
    blk.record = make_record(0, d);
  }
  return s;
}

std::vector<NamedParam> all_params(DecoderState& s) {
  std::vector<NamedParam> out;
  out.push_back({"time_tab", &s.time_tab});
  out.push_back({"score_tab", &s.score_tab});
  out.push_back({"text_tab", &s.text_tab});
  out.push_back({"pos_tab", &s.pos_tab});
  out.push_back({"frame_proj", &s.frame_proj});
  out.push_back({"final_gain", &s.final_gain});
  out.push_back({"head.time", &s.head_time});
  out.push_back({"head.score", &s.head_score});
  out.push_back({"head.text", &s.head_text});
  for (size_t i = 0; i < s.blocks.size(); ++i) {
    DecoderBlock& blk = s.blocks[i];
    std::string p = "b" + std::to_string(i) + ".";
    out.push_back({p + "wq", &blk.wq});
    out.push_back({p + "wk", &blk.wk});
    out.push_back({p + "wv", &blk.wv});
    out.push_back({p + "wo", &blk.wo});
    out.push_back({p + "attn_gain", &blk.attn_gain});
    out.push_back({p + "moe_gain", &blk.moe_gain});
    if (blk.dense_ffn) {
      out.push_back({p + "ffn.w1", &blk.dense_ffn->w1});
      out.push_back({p + "ffn.b1", &blk.dense_ffn->b1});
      out.push_back({p + "ffn.w2", &blk.dense_ffn->w2});
      out.push_back({p + "ffn.b2", &blk.dense_ffn->b2});
    }
    if (!blk.experts.empty()) {
      out.push_back({p + "gate.wg", &blk.gate.w_g});
      out.push_back({p + "gate.g", &blk.gate.g});
      for (size_t e = 0; e < blk.experts.size(); ++e) {
        std::string ep = p + "e" + std::to_string(e) + ".";
        out.push_back({ep + "w1", &blk.experts[e].w1});
        out.push_back({ep + "b1", &blk.experts[e].b1});
        out.push_back({ep + "w2", &blk.experts[e].w2});
        out.push_back({ep + "b2", &blk.experts[e].b2});
      }
    }
  }
  return out;
}

std::vector<NamedParam> trainable_params(DecoderState& s, int stage) {
  if (stage < 1 || stage > 3) throw std::invalid_argument("trainable_params: unknown stage");
  // Identify the MoE parameters (gating + expert bodies) structurally.
  std::vector<const Param*> moe;
  for (DecoderBlock& blk : s.blocks) {
    if (blk.experts.empty()) continue;
    moe.push_back(&blk.gate.w_g);
    moe.push_back(&blk.gate.g);
    for (Expert& e : blk.experts) {
      moe.push_back(&e.w1);
      moe.push_back(&e.b1);
      moe.push_back(&e.w2);
      moe.push_back(&e.b2);
    }
  }
  auto is_moe = [&](const Param* p) {
    return std::find(moe.begin(), moe.end(), p) != moe.end();
  };
  std::vector<NamedParam> out;
  for (NamedParam& np : all_params(s)) {
    switch (stage) {
      case 1:
        if (!is_moe(np.p)) out.push_back(np);
        break;
      case 2:
        if (is_moe(np.p)) out.push_back(np);
        break;
      case 3:
        if (np.p != &s.frame_proj) out.push_back(np);
        break;
    }
  }
  return out;
}

ModelInput input_from_sample(const SyntheticSample& s) {
  ModelInput in;
  in.frames = s.frames;
  in.timestamps = s.frame_timestamps;
  in.query = s.query;
  return in;
}

ad::Var Binding::of(const Param& p) const {
  for (const auto& [param, var] : entries)
    if (param == &p) return var;
  throw std::logic_error("Binding::of: parameter not bound");
}

Binding bind_params(ad::Tape& t, DecoderState& s, const std::vector<NamedParam>& trainable) {
  Binding b;
  for (NamedParam& np : all_params(s)) {
    bool needs_grad = false;
    for (const NamedParam& tp : trainable)
      if (tp.p == np.p) {
        needs_grad = true;
        break;
      }
    b.entries.emplace_back(np.p, t.leaf(np.p->v, needs_grad));
  }
  return b;
}

Mat fuse_frame_tokens(const DecoderState& s, const Mat& frames,
                      const std::vector<double>& timestamps,
                      const std::vector<int>* saliency_hints) {
  ad::Tape t;
  // const_cast is safe: an empty trainable set binds everything as constants.
  DecoderState& ms = const_cast<DecoderState&>(s);
  Binding b = bind_params(t, ms, {});
  ModelInput in;
  in.frames = frames;
  in.timestamps = timestamps;
  if (saliency_hints) in.saliency_hints = *saliency_hints;
  return t.val(build_fusion(t, b, s, in));
}

ForwardResult model_forward(ad::Tape& t, const Binding& b, DecoderState& s,
                            const ModelInput& input, const TokenStream& teacher,
                            const ForwardOptions& opts) {
  std::vector<int> ids;
  ids.reserve(teacher.size());
  for (const Token& tok : teacher) ids.push_back(tok.id);
  StreamWalk walk = walk_stream(ids);

  // Inputs are the teacher tokens shifted right: position prefix-1+i predicts
  // teacher[i], so the last teacher token is never fed back in.
  std::vector<int> in_ids(ids.begin(), ids.size() > 1 ? ids.end() - 1 : ids.begin());
  std::vector<HeadKind> in_cats(walk.cats.begin(),
                                walk.cats.size() > 1 ? walk.cats.end() - 1 : walk.cats.begin());
  std::vector<TaskType> in_tags(walk.tags.begin(),
                                walk.tags.size() > 1 ? walk.tags.end() - 1 : walk.tags.begin());

  SequenceBuild seq = build_sequence(t, b, s, input, in_ids, in_cats, in_tags, opts);

  ForwardResult out;
  out.seq_tags = seq.tags;
  out.blocks = std::move(seq.blocks);
  out.prefix_len = static_cast<int>(seq.prefix_len);
  out.seq_len = static_cast<int>(seq.seq_len);
  out.n_targets = static_cast<int>(ids.size());

  for (size_t i = 0; i < ids.size(); ++i) {
    HeadKind cat = walk.cats[i];
    int hc = static_cast<int>(cat);
    out.head_positions[hc].push_back(seq.prefix_len - 1 + static_cast<Index>(i));
    out.head_targets[hc].push_back(
        head_column_for_token(cat, ids[i], s.cfg.text_vocab));
  }
  for (int hc = 0; hc < 3; ++hc) {
    if (out.head_positions[hc].empty()) continue;
    ad::Var rows = t.gather_rows(seq.hidden, out.head_positions[hc]);
    out.head_logits[hc] =
        t.matmul(rows, b.of(*head_param(s, static_cast<HeadKind>(hc))));
  }
  return out;
}

GenerateOutcome generate(DecoderState& s, const ModelInput& input, int max_events) {
  if (max_events < 1) throw std::invalid_argument("generate: max_events must be >= 1");
  GenLimits limits = s.cfg.gen_limits(max_events);
  // Grammar masking bounds every field, so this budget is a hard backstop.
  const size_t budget =
      static_cast<size_t>(max_events) *
          static_cast<size_t>(2 * (limits.max_int_digits + 2) + limits.max_caption_len + 6) +
      2;

  GenerateOutcome out;
  EventCursor cursor;
  std::vector<HeadKind> cats;
  std::vector<double> active_sums;
  while (!cursor.finished() && out.ids.size() <= budget) {
    HeadKind cat = cursor.head();
    std::vector<int> legal = cursor.legal_next(limits);

    ad::Tape t;
    Binding b = bind_params(t, s, {});
    SequenceBuild seq = build_sequence(t, b, s, input, out.ids, cats, out.tags, {});
    ad::Var row = t.slice_rows(seq.hidden, seq.seq_len - 1, 1);
    ad::Var logits = t.matmul(row, b.of(*head_param(s, cat)));
    const Mat& lv = t.val(logits);

    int best_id = -1;
    double best_score = 0.0;
    for (int id : legal) {
      double sc = lv(0, head_column_for_token(cat, id, s.cfg.text_vocab));
      if (best_id < 0 || sc > best_score) {
        best_id = id;
        best_score = sc;
      }
    }
    ParseError err;
    if (best_id < 0 || !cursor.feed(best_id, &err))
      throw std::logic_error("generate: grammar produced no legal continuation");
    out.ids.push_back(best_id);
    out.tags.push_back(cursor.last_tag());
    cats.push_back(cat);

    if (cursor.finished() || out.ids.size() > budget) {
      // Routing stats from the last forward (covers the full sequence).
      double total = 0.0;
      long long count = 0;
      for (const BlockTrace& trace : seq.blocks) {
        for (const RoutingDecision& d : trace.decisions) {
          total += static_cast<double>(d.active.size());
          ++count;
        }
      }
      out.mean_active_experts = (count > 0) ? total / static_cast<double>(count) : 0.0;
    }
  }

  if (cursor.finished()) {
    out.events = cursor.sequence();
  } else {
    // Budget exhausted mid-event: keep the completed events and terminate.
    out.truncated = true;
    out.events = cursor.partial();
    TokenStream repaired = encode_events(out.events);
    out.ids.clear();
    out.tags.clear();
    for (const Token& tok : repaired) {
      out.ids.push_back(tok.id);
      out.tags.push_back(tok.tag);
    }
  }
  return out;
}

void enter_stage(DecoderState& s, int stage) {
  if (stage < 1 || stage > 3)
    throw std::invalid_argument("enter_stage: stage must be 1, 2 or 3");
  if (s.stage_completed != stage - 1 || s.current_stage != stage - 1)
    throw std::logic_error("enter_stage: stages must run in order 1 -> 2 -> 3 (at stage " +
                           std::to_string(s.current_stage) + ", completed " +
                           std::to_string(s.stage_completed) + ")");
  if (stage == 2) {
    // Clone the dense FFN into k_init noisy experts; gating starts from
    // random unit columns with zero thresholds.
    for (DecoderBlock& blk : s.blocks) {
      if (!blk.dense_ffn) throw std::logic_error("enter_stage 2: dense FFN missing");
      blk.experts.clear();
      for (int e = 0; e < s.cfg.k_init; ++e)
        blk.experts.push_back(clone_with_noise(*blk.dense_ffn, s.rng, 0.02));
      blk.dense_ffn.reset();
      Mat wg = gaussian(s.rng, s.cfg.d, s.cfg.k_init, 1.0);
      for (Index c = 0; c < wg.cols(); ++c) wg.col(c) /= wg.col(c).norm();
      blk.gate.w_g = Param(std::move(wg));
      blk.gate.g = Param(Mat::Zero(1, s.cfg.k_init));
      blk.gate.alpha = s.cfg.alpha;
      blk.gate.mode = s.cfg.gating;
      blk.gate.top_k = s.cfg.top_k;
      blk.gate.scalar_task_rate = s.cfg.scalar_task_rate;
      blk.record = make_record(s.cfg.k_init, s.cfg.d);
    }
  }
  s.current_stage = stage;
  s.adam_t = 0;  // fresh optimizer per stage
  for (NamedParam& np : all_params(s)) np.p->reset_moments();
}

BatchBuild build_batch_loss(ad::Tape& t, const Binding& b, DecoderState& s,
                            const std::vector<const SyntheticSample*>& batch, int stage,
                            const LossWeights& weights,
                            const std::vector<std::vector<RoutingSnapshot>>* frozen) {
  if (batch.empty()) throw std::invalid_argument("build_batch_loss: empty batch");
  BatchBuild out;
  const size_t n_blocks = s.blocks.size();
  out.decisions.resize(n_blocks);
  out.tags.resize(n_blocks);
  out.moe_inputs.resize(n_blocks);
  out.min_gate_margin = std::numeric_limits<double>::infinity();

  ad::Var nll_total = -1;
  ad::Var zsum_total = -1;
  std::vector<ad::Var> n_soft(n_blocks, -1);

  for (size_t si = 0; si < batch.size(); ++si) {
    const SyntheticSample* sample = batch[si];
    TokenStream teacher = encode_events(sample->gold);
    ModelInput in = input_from_sample(*sample);
    ForwardOptions opts;
    if (frozen) opts.frozen = &(*frozen)[si];
    ForwardResult fr = model_forward(t, b, s, in, teacher, opts);
    out.target_count += fr.n_targets;
    for (int hc = 0; hc < 3; ++hc) {
      if (fr.head_logits[hc] < 0) continue;
      ad::Var nll = t.nll_sum(fr.head_logits[hc], fr.head_targets[hc]);
      nll_total = (nll_total < 0) ? nll : t.add(nll_total, nll);
      if (stage >= 2) {
        ad::Var lse = t.logsumexp_rows(fr.head_logits[hc]);
        ad::Var zs = t.sum(t.mul(lse, lse));
        zsum_total = (zsum_total < 0) ? zs : t.add(zsum_total, zs);
      }
    }
    if (stage >= 2) {
      std::vector<Index> task_rows;
      for (size_t i = 0; i < fr.seq_tags.size(); ++i)
        if (fr.seq_tags[i] == TaskType::Time || fr.seq_tags[i] == TaskType::Score)
          task_rows.push_back(static_cast<Index>(i));
      std::vector<RoutingSnapshot> sample_snaps;
      for (size_t bi = 0; bi < n_blocks; ++bi) {
        BlockTrace& trace = fr.blocks[bi];
        if (!task_rows.empty()) {
          ad::Var ns = t.colsum(t.gather_rows(trace.mass, task_rows));
          n_soft[bi] = (n_soft[bi] < 0) ? ns : t.add(n_soft[bi], ns);
        }
        if (s.blocks[bi].gate.mode == GatingMode::Dynamic) {
          // p = mask - offset; the margin is how far every gate sits from the
          // sign discontinuity.
          const Mat& off = trace.snapshot.ste_offset;
          for (Index r = 0; r < off.rows(); ++r) {
            const auto& active = trace.decisions[static_cast<size_t>(r)].active;
            for (Index c = 0; c < off.cols(); ++c) {
              bool on = std::find(active.begin(), active.end(), static_cast<int>(c)) != active.end();
              out.min_gate_margin =
                  std::min(out.min_gate_margin, std::abs((on ? 1.0 : 0.0) - off(r, c)));
            }
          }
        }
        out.decisions[bi].insert(out.decisions[bi].end(), trace.decisions.begin(),
                                 trace.decisions.end());
        out.tags[bi].insert(out.tags[bi].end(), fr.seq_tags.begin(), fr.seq_tags.end());
        if (out.moe_inputs[bi].rows() == 0) {
          out.moe_inputs[bi] = trace.moe_input;
        } else {
          Mat merged(out.moe_inputs[bi].rows() + trace.moe_input.rows(),
                     out.moe_inputs[bi].cols());
          merged << out.moe_inputs[bi], trace.moe_input;
          out.moe_inputs[bi] = std::move(merged);
        }
        sample_snaps.push_back(trace.snapshot);
      }
      out.snapshots.push_back(std::move(sample_snaps));
    }
  }

  const double inv_targets = 1.0 / static_cast<double>(out.target_count);
  out.ce = t.scale(nll_total, inv_targets);
  if (stage >= 2) {
    out.z = (zsum_total >= 0) ? t.scale(zsum_total, inv_targets) : t.constant(Mat::Zero(1, 1));
    ad::Var aux_total = -1;
    for (size_t bi = 0; bi < n_blocks; ++bi) {
      DecoderBlock& blk = s.blocks[bi];
      Mat a_e = blk.record.a_e;
      if (weights.per_batch_rates) {
        a_e = Mat::Zero(1, blk.gate.experts());
        for (const RoutingDecision& d : out.decisions[bi])
          for (int e : d.active) a_e(0, e) += 1.0;
        if (!out.decisions[bi].empty()) a_e /= static_cast<double>(out.decisions[bi].size());
      }
      ad::Var ns = (n_soft[bi] >= 0) ? n_soft[bi] : t.constant(Mat::Zero(1, blk.gate.experts()));
      ad::Var ax = aux_loss(t, a_e, ns, b.of(blk.gate.w_g), weights);
      aux_total = (aux_total < 0) ? ax : t.add(aux_total, ax);
    }
    out.aux = aux_total;
  }
  out.loss = stage_loss(t, stage, out.ce, out.z, out.aux, weights.z_coef);
  return out;
}

StepLosses train_step(DecoderState& s, const std::vector<const SyntheticSample*>& batch,
                      int stage, const LifecycleConfig& lcfg, const LossWeights& weights,
                      std::vector<LifecycleEvent>* events) {
  if (stage != s.current_stage)
    throw std::logic_error("train_step: state is in stage " + std::to_string(s.current_stage) +
                           ", not " + std::to_string(stage));
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");

  ad::Tape t;
  std::vector<NamedParam> trainable = trainable_params(s, stage);
  Binding b = bind_params(t, s, trainable);
  BatchBuild built = build_batch_loss(t, b, s, batch, stage, weights);
  const size_t n_blocks = s.blocks.size();
  auto& decisions = built.decisions;
  auto& tags = built.tags;
  auto& inputs = built.moe_inputs;
  ad::Var loss = built.loss;

  StepLosses result;
  result.ce = t.val(built.ce)(0, 0);
  result.z = built.z ? t.val(*built.z)(0, 0) : 0.0;
  result.aux = built.aux ? t.val(*built.aux)(0, 0) : 0.0;
  result.total = t.val(loss)(0, 0);
  if (!std::isfinite(result.total)) throw TrainingDiverged(result);

  t.backward(loss);

  // Global-norm clip over the trainable set, then Adam.
  double norm_sq = 0.0;
  for (const auto& [param, var] : b.entries) {
    if (!t.needs_grad(var)) continue;
    norm_sq += t.grad(var).squaredNorm();
  }
  const double clip = (std::sqrt(norm_sq) > kGradClip) ? kGradClip / std::sqrt(norm_sq) : 1.0;
  s.adam_t += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(s.adam_t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(s.adam_t));
  for (const auto& [param, var] : b.entries) {
    if (!t.needs_grad(var)) continue;
    Param* p = const_cast<Param*>(param);
    Mat g = t.grad(var) * clip;
    p->m = kAdamBeta1 * p->m + (1.0 - kAdamBeta1) * g;
    p->s = kAdamBeta2 * p->s + (1.0 - kAdamBeta2) * g.cwiseProduct(g);
    Mat m_hat = p->m / bc1;
    Mat s_hat = p->s / bc2;
    p->v -= kAdamLr * (m_hat.array() / (s_hat.array().sqrt() + kAdamEps)).matrix();
  }

  if (stage >= 2) {
    long long active_total = 0, token_total = 0;
    for (size_t bi = 0; bi < n_blocks; ++bi) {
      DecoderBlock& blk = s.blocks[bi];
      if (blk.gate.mode == GatingMode::Dynamic) renormalize_gating_columns(blk.gate);
      for (const RoutingDecision& d : decisions[bi]) {
        active_total += static_cast<long long>(d.active.size());
        ++token_total;
      }
      record_batch(decisions[bi], tags[bi], inputs[bi], lcfg.ema_decay, blk.record);

      bool lifecycle_on = (stage == 2) || (stage == 3 && s.cfg.lifecycle_in_stage3);
      if (lifecycle_on && blk.record.step > lcfg.warmup && blk.record.step % lcfg.window == 0) {
        RemovalResult rem = remove_stale_experts(blk.record, blk.gate, blk.experts, lcfg);
        if (events)
          for (int e : rem.removed)
            events->push_back({s.global_step, static_cast<int>(bi), false, e,
                               blk.gate.experts()});
        std::string warning;
        auto added = maybe_add_expert(blk.record, blk.gate, blk.experts, lcfg, s.rng, &warning);
        if (added && events)
          events->push_back({s.global_step, static_cast<int>(bi), true, *added,
                             blk.gate.experts()});
      }
    }
    result.active_experts_mean =
        (token_total > 0) ? static_cast<double>(active_total) / static_cast<double>(token_total)
                          : 0.0;
  }
  for (const DecoderBlock& blk : s.blocks)
    result.k_per_layer.push_back(blk.experts.empty() && blk.dense_ffn ? 1 : blk.gate.experts());
  s.global_step += 1;
  return result;
}

StageRunResult run_stage(DecoderState& s, int stage, const std::vector<SyntheticSample>& dataset,
                         int steps, int batch_size, const LifecycleConfig& lcfg,
                         const LossWeights& weights) {
  if (dataset.empty()) throw std::invalid_argument("run_stage: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("run_stage: batch_size must be >= 1");
  enter_stage(s, stage);
  StageRunResult out;
  for (int step = 0; step < steps; ++step) {
    std::vector<const SyntheticSample*> batch;
    for (int j = 0; j < batch_size; ++j) {
      size_t idx = (static_cast<size_t>(step) * static_cast<size_t>(batch_size) +
                    static_cast<size_t>(j)) %
                   dataset.size();
      batch.push_back(&dataset[idx]);
    }
    StepLosses losses = train_step(s, batch, stage, lcfg, weights, &out.events);
    out.rows.push_back({s.global_step, stage, std::move(losses)});
  }
  s.stage_completed = stage;
  return out;
}

std::vector<RoutingRecord> measure_routing(DecoderState& s,
                                           const std::vector<SyntheticSample>& dataset) {
  if (s.current_stage < 2)
    throw std::logic_error("measure_routing: no MoE layers before stage 2");
  std::vector<Mat> hits(s.blocks.size());
  std::vector<Eigen::VectorXd> counts(s.blocks.size());
  for (size_t bi = 0; bi < s.blocks.size(); ++bi) {
    hits[bi] = Mat::Zero(kNumTaskTypes, s.blocks[bi].gate.experts());
    counts[bi] = Eigen::VectorXd::Zero(kNumTaskTypes);
  }
  for (const SyntheticSample& sample : dataset) {
    ad::Tape t;
    Binding b = bind_params(t, s, {});
    TokenStream teacher = encode_events(sample.gold);
    ModelInput in = input_from_sample(sample);
    ForwardResult fr = model_forward(t, b, s, in, teacher);
    for (size_t bi = 0; bi < s.blocks.size(); ++bi) {
      for (size_t i = 0; i < fr.seq_tags.size(); ++i) {
        Index tt = static_cast<Index>(fr.seq_tags[i]);
        counts[bi](tt) += 1.0;
        for (int e : fr.blocks[bi].decisions[i].active) hits[bi](tt, e) += 1.0;
      }
    }
  }
  std::vector<RoutingRecord> out;
  for (size_t bi = 0; bi < s.blocks.size(); ++bi) {
    RoutingRecord r = make_record(s.blocks[bi].gate.experts(), s.cfg.d);
    for (Index tt = 0; tt < kNumTaskTypes; ++tt)
      if (counts[bi](tt) > 0.0) r.a.row(tt) = hits[bi].row(tt) / counts[bi](tt);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::pair<HeadKind, Mat>> forward_logit_rows(DecoderState& s, const ModelInput& input,
                                                         const TokenStream& teacher) {
  ad::Tape t;
  Binding b = bind_params(t, s, {});
  ForwardResult fr = model_forward(t, b, s, input, teacher);
  std::vector<std::pair<HeadKind, Mat>> rows(static_cast<size_t>(fr.n_targets));
  for (int hc = 0; hc < 3; ++hc) {
    if (fr.head_logits[hc] < 0) continue;
    const Mat& lv = t.val(fr.head_logits[hc]);
    for (size_t i = 0; i < fr.head_positions[hc].size(); ++i) {
      Index target_index = fr.head_positions[hc][i] - (fr.prefix_len - 1);
      rows[static_cast<size_t>(target_index)] = {static_cast<HeadKind>(hc), lv.row(static_cast<Index>(i))};
    }
  }
  return rows;
}

}  // namespace expertflow
