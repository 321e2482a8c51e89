// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tiny causal decoder with a per-block MoE feed-forward, separate decoding
// heads for time/score/text positions, frame-token fusion, grammar-constrained
// greedy generation, and the three-stage training recipe:
//   stage 1  dense feed-forward path, cross-entropy only
//   stage 2  feed-forward cloned into experts, only gating + experts train,
//            full loss trio, lifecycle active
//   stage 3  everything but the frame fusion table trains, lifecycle active

#pragma once

#include "expertflow/event_codec.hpp"
#include "expertflow/gating.hpp"
#include "expertflow/lifecycle.hpp"
#include "expertflow/losses.hpp"
#include "expertflow/params.hpp"
#include "expertflow/synthdata.hpp"

#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace expertflow {

struct ModelConfig {
  int d = 64;
  int blocks = 2;
  int attn_heads = 2;
  int expert_hidden = 128;
  int k_init = 8;
  int text_vocab = 64;
  int max_frames = 32;
  int context = 256;
  GatingMode gating = GatingMode::Dynamic;
  int top_k = 2;               // TopK mode
  double alpha = 1.0;          // Dynamic mode task-importance coefficient
  bool scalar_task_rate = false;
  bool lifecycle_in_stage3 = true;
  int max_events = 3;          // generation caps
  int max_caption_len = 8;
  int max_int_digits = 4;
  std::uint64_t seed = 1;

  GenLimits gen_limits(int events_cap) const {
    return {max_int_digits, max_caption_len, events_cap, text_vocab};
  }
};

struct DecoderBlock {
  Param wq, wk, wv, wo;        // d x d attention projections
  Param attn_gain, moe_gain;   // 1 x d RMS-norm gains
  std::optional<Expert> dense_ffn;  // stage-1 path, dropped at stage 2
  GatingParams gate;                // populated at stage 2
  std::vector<Expert> experts;
  RoutingRecord record;
};

struct DecoderState {
  ModelConfig cfg;
  int stage_completed = 0;  // highest fully run stage
  int current_stage = 0;    // stage whose transition has been applied
  long long adam_t = 0;     // optimizer step within the current stage
  long long global_step = 0;

  Param time_tab;    // 14 x d, structured-token embeddings (time context)
  Param score_tab;   // 14 x d, structured-token embeddings (score context)
  Param text_tab;    // (V+2) x d, text ids then <sync>, <eos>
  Param pos_tab;     // context x d
  Param frame_proj;  // d x d frame fusion table, identity at init
  Param final_gain;  // 1 x d
  Param head_time;   // d x 14
  Param head_score;  // d x 14
  Param head_text;   // d x (V+2)
  std::vector<DecoderBlock> blocks;

  std::mt19937_64 rng;  // init and lifecycle noise
};

DecoderState init_state(const ModelConfig& cfg);

struct NamedParam {
  std::string name;
  Param* p;
};
std::vector<NamedParam> all_params(DecoderState& s);
// The subset updated by the optimizer in a given stage.
std::vector<NamedParam> trainable_params(DecoderState& s, int stage);

// Visual-and-query prefix of the decoder sequence.
struct ModelInput {
  Mat frames;                            // T x d
  std::vector<double> timestamps;        // seconds per frame, nondecreasing
  std::vector<int> saliency_hints;       // optional, one 0..4 score per frame
  std::vector<int> query;                // text-vocabulary ids
};
ModelInput input_from_sample(const SyntheticSample& s);

// Frame fusion: projected frame embedding plus the mean time-token embedding
// of its timestamp (and, when hints are given, the mean score-token
// embedding). Standalone value form of the in-graph builder.
Mat fuse_frame_tokens(const DecoderState& s, const Mat& frames,
                      const std::vector<double>& timestamps,
                      const std::vector<int>* saliency_hints = nullptr);

// Parameter leaves bound into one tape. Non-trainable parameters become
// constants so backward skips them.
struct Binding {
  std::vector<std::pair<const Param*, ad::Var>> entries;
  ad::Var of(const Param& p) const;
};
Binding bind_params(ad::Tape& t, DecoderState& s, const std::vector<NamedParam>& trainable);

struct BlockTrace {
  ad::Var mass = -1;                      // n x K differentiable gate mass
  std::vector<RoutingDecision> decisions; // per sequence position
  Mat moe_input;                          // post-norm values entering the MoE
  RoutingSnapshot snapshot;
};

struct ForwardOptions {
  const std::vector<RoutingSnapshot>* frozen = nullptr;  // per block; replaces
                                                         // the hard gate for
                                                         // finite differences
};

struct ForwardResult {
  ad::Var head_logits[3] = {-1, -1, -1};   // by HeadKind; -1 when unused
  std::vector<Index> head_targets[3];      // head-local target columns
  std::vector<Index> head_positions[3];    // absolute sequence positions
  int n_targets = 0;
  std::vector<TaskType> seq_tags;
  std::vector<BlockTrace> blocks;
  int prefix_len = 0;
  int seq_len = 0;
};

// Teacher-forced forward: causal attention over fused frames, query tokens
// and the shifted target stream; the head at each target position is fixed by
// the grammar category of the target token.
ForwardResult model_forward(ad::Tape& t, const Binding& b, DecoderState& s,
                            const ModelInput& input, const TokenStream& teacher,
                            const ForwardOptions& opts = {});

struct GenerateOutcome {
  EventSequence events;
  std::vector<int> ids;          // the emitted stream, <eos> included
  std::vector<TaskType> tags;
  double mean_active_experts = 0.0;
  bool truncated = false;        // token budget hit; events up to the last complete one
};

// Greedy decoding under the event grammar: at every step only the
// grammar-legal head and token subset are considered, so the stream always
// parses. max_events must be >= 1.
GenerateOutcome generate(DecoderState& s, const ModelInput& input, int max_events);

struct LifecycleEvent {
  long long step = 0;
  int layer = 0;
  bool added = false;  // false = removed
  int expert = 0;
  int k_after = 0;
};

struct StepLosses {
  double ce = 0.0, z = 0.0, aux = 0.0, total = 0.0;
  double active_experts_mean = 0.0;
  std::vector<int> k_per_layer;
};

struct TrainingDiverged : std::runtime_error {
  StepLosses parts;
  explicit TrainingDiverged(const StepLosses& p)
      : std::runtime_error("training diverged: non-finite loss"), parts(p) {}
};

// The complete stage loss of one batch on one tape, plus the payloads the
// recording and lifecycle steps consume. Shared between train_step and the
// finite-difference harness so both differentiate the same function. When
// `frozen` (per sample, per block) is given, the hard routing decisions are
// replayed as smooth surrogates around the recorded point.
struct BatchBuild {
  ad::Var loss = -1;
  ad::Var ce = -1;
  std::optional<ad::Var> z, aux;
  std::vector<std::vector<RoutingDecision>> decisions;  // per block, batch-concatenated
  std::vector<std::vector<TaskType>> tags;
  std::vector<Mat> moe_inputs;
  std::vector<std::vector<RoutingSnapshot>> snapshots;  // [sample][block]
  double min_gate_margin = 0.0;  // min |pre-activation| across dynamic gates
  long long target_count = 0;
};
BatchBuild build_batch_loss(ad::Tape& t, const Binding& b, DecoderState& s,
                            const std::vector<const SyntheticSample*>& batch, int stage,
                            const LossWeights& weights,
                            const std::vector<std::vector<RoutingSnapshot>>* frozen = nullptr);

// One optimizer step (Adam, lr 3e-4, betas 0.9/0.999, global grad-norm clip
// 1.0) over a batch; stages 2-3 fold routing statistics into the records and
// run the lifecycle on its schedule afterwards.
StepLosses train_step(DecoderState& s, const std::vector<const SyntheticSample*>& batch,
                      int stage, const LifecycleConfig& lcfg, const LossWeights& weights,
                      std::vector<LifecycleEvent>* events = nullptr);

// Applies the stage transition (1: nothing beyond ordering checks; 2: clone
// the dense FFN into k_init noisy experts and initialize gating; 3: freeze the
// frame fusion table). Stages must be entered in order.
void enter_stage(DecoderState& s, int stage);

struct StepRow {
  long long step = 0;
  int stage = 0;
  StepLosses losses;
};
struct StageRunResult {
  std::vector<StepRow> rows;
  std::vector<LifecycleEvent> events;
};

StageRunResult run_stage(DecoderState& s, int stage, const std::vector<SyntheticSample>& dataset,
                         int steps, int batch_size, const LifecycleConfig& lcfg,
                         const LossWeights& weights);

// Forward over the gold stream of each sample, collecting plain (non-EMA)
// per-task activation frequencies per layer; the CSV analogue of the paper's
// expert-assignment visualization.
std::vector<RoutingRecord> measure_routing(DecoderState& s,
                                           const std::vector<SyntheticSample>& dataset);

// Per-position logits of a teacher-forced forward, for tests and inspection.
std::vector<std::pair<HeadKind, Mat>> forward_logit_rows(DecoderState& s, const ModelInput& input,
                                                         const TokenStream& teacher);

}  // namespace expertflow
