// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Procedural desk-scale grounding samples. Each video is a T x d embedding
// sequence at one frame per second: events place a class prototype (a fixed
// unit vector derived from the class index, independent of the run seed) over
// their frames, everything else is a background prototype, and isotropic
// Gaussian noise is added on top. Queries and captions use text-vocabulary
// ids:
//   0..2        task markers (MR, DVC, VHD)
//   3..3+C-1    per-class query token
//   3+C+2c, +1  the two caption template tokens of class c

#pragma once

#include "expertflow/event_codec.hpp"
#include "expertflow/types.hpp"

#include <string>
#include <vector>

namespace expertflow {

enum class TaskKind { MR = 0, DVC = 1, VHD = 2 };

const char* task_kind_name(TaskKind k);

struct SynthConfig {
  int n_classes = 6;
  int frames = 32;        // T, one frame per second
  int max_events = 3;     // events per video drawn from 1..max_events
  double noise = 0.3;     // per-coordinate stdev
  int dim = 64;           // embedding width, matches the model width
};

struct SyntheticSample {
  Mat frames;                             // T x d
  std::vector<double> frame_timestamps;   // seconds, nondecreasing
  std::vector<int> query;                 // text-vocabulary ids
  TaskKind task_kind = TaskKind::MR;
  EventSequence gold;
};

// Fixed unit prototype for a class index (class n_classes = background).
Mat class_prototype(int class_index, int dim);

int class_saliency(int class_index);               // fixed table, 0..4
std::vector<int> class_caption(const SynthConfig& cfg, int class_index);
int class_query_token(const SynthConfig& cfg, int class_index);
int task_marker_token(TaskKind kind);

// Fully determined by (cfg, kind, seed). Events lie on the 0.5 s grid with
// length >= 3 s and >= 1 s gaps, each with a distinct class. MR gold is the
// single event of the queried class; DVC and VHD gold are all events.
// Throws std::runtime_error when cfg cannot fit a single event.
SyntheticSample gen_sample(const SynthConfig& cfg, TaskKind kind, std::uint64_t seed);

// Samples i = 0..n-1 with seeds base+i and task kinds round-robin MR/DVC/VHD.
std::vector<SyntheticSample> gen_split(const SynthConfig& cfg, int n, std::uint64_t base_seed);

// One structured-text record per sample; float arrays as base64 of
// little-endian f64, for cross-implementation comparison.
std::string dump_dataset(const std::vector<SyntheticSample>& samples);

}  // namespace expertflow
