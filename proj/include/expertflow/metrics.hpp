// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Temporal grounding metrics over predicted vs. gold event sequences.

#pragma once

#include "expertflow/event_codec.hpp"
#include "expertflow/synthdata.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace expertflow {

// |a n b| / |a u b| for [start, end) intervals. Throws std::invalid_argument
// on degenerate intervals (start >= end).
double temporal_iou(double a_start, double a_end, double b_start, double b_end);
double temporal_iou(const Event& a, const Event& b);

// Fraction of samples whose top-1 prediction reaches IoU >= tau against the
// best-matching gold event. Missing predictions count as misses.
double recall_at_iou(const std::vector<std::optional<Event>>& top1,
                     const std::vector<EventSequence>& golds, double tau);
double mean_iou(const std::vector<std::optional<Event>>& top1,
                const std::vector<EventSequence>& golds);

// Greedy one-to-one matching in descending IoU order at each tau in
// {0.3, 0.5, 0.7, 0.9}; F1 per tau from precision = matches/|preds| and
// recall = matches/|golds| (both-empty instances score 1); mean over taus.
double dvc_f1(const EventSequence& preds, const EventSequence& golds);

// Matched (pred, gold) index pairs of the greedy matching at one tau,
// ordered by descending IoU (ties: lower pred index, then lower gold index).
std::vector<std::pair<int, int>> greedy_match(const EventSequence& preds,
                                              const EventSequence& golds, double tau);

// Mean average precision over IoU thresholds {0.5, 0.75}: predictions ranked
// by saliency (ties: earlier start), TP when IoU >= tau against an unmatched
// gold, AP = sum of precisions at TP ranks / |golds|.
double highlight_map(const EventSequence& preds, const EventSequence& golds);

// 1 iff the top-scored prediction has IoU >= 0.5 with a gold event of
// maximal saliency; 0 without predictions.
int hit_at_1(const EventSequence& preds, const EventSequence& golds);

// The highest-saliency (ties: earliest) prediction, used as the top-1 answer.
std::optional<Event> pick_top1(const EventSequence& preds);

struct TaskReport {
  int count = 0;
  double r1_iou50 = 0.0;
  double r1_iou70 = 0.0;
  double mean_iou = 0.0;
  double dvc_f1 = 0.0;
  double caption_token_acc = 0.0;
  double map_avg = 0.0;
  double hit_at_1 = 0.0;
  double mean_active_experts = 0.0;
};

struct EvalReport {
  TaskReport mr, dvc, vhd;
  int total = 0;
  double mean_active_experts = 0.0;

  std::string to_json() const;  // canonical, key-sorted
  std::string to_csv() const;   // one row per task kind
};

// What the model (or an oracle) produced for one sample.
struct SampleOutcome {
  EventSequence predicted;
  double mean_active_experts = 0.0;
};

// Runs `predict` over the dataset (fanning out over at most `threads`
// workers; results merged in sample order) and aggregates per task kind.
// Exact caption token accuracy is computed over pairs matched at IoU 0.5.
EvalReport evaluate(const std::function<SampleOutcome(const SyntheticSample&)>& predict,
                    const std::vector<SyntheticSample>& dataset, int threads = 1);

}  // namespace expertflow
