// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <future>
#include <stdexcept>

namespace expertflow {

namespace {

constexpr double kF1Taus[] = {0.3, 0.5, 0.7, 0.9};
constexpr double kMapTaus[] = {0.5, 0.75};

double best_iou_against(const Event& pred, const EventSequence& golds) {
  double best = 0.0;
  for (const Event& g : golds.events) best = std::max(best, temporal_iou(pred, g));
  return best;
}

// Prediction order for score-ranked metrics: saliency descending, earlier
// start on ties, original index as the last resort.
std::vector<int> rank_by_score(const EventSequence& preds) {
  std::vector<int> order(preds.events.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const Event& ea = preds.events[static_cast<size_t>(a)];
    const Event& eb = preds.events[static_cast<size_t>(b)];
    if (ea.saliency != eb.saliency) return ea.saliency > eb.saliency;
    return ea.start_s < eb.start_s;
  });
  return order;
}

double average_precision(const EventSequence& preds, const EventSequence& golds, double tau) {
  if (golds.events.empty()) return 0.0;
  std::vector<int> order = rank_by_score(preds);
  std::vector<bool> gold_used(golds.events.size(), false);
  double precision_sum = 0.0;
  int tp = 0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    const Event& p = preds.events[static_cast<size_t>(order[rank])];
    // Best unmatched gold at or above the threshold; ties keep the earlier one.
    int best_gold = -1;
    double best = -1.0;
    for (size_t g = 0; g < golds.events.size(); ++g) {
      if (gold_used[g]) continue;
      double iou = temporal_iou(p, golds.events[g]);
      if (iou >= tau && iou > best) {
        best = iou;
        best_gold = static_cast<int>(g);
      }
    }
    if (best_gold >= 0) {
      gold_used[static_cast<size_t>(best_gold)] = true;
      ++tp;
      precision_sum += static_cast<double>(tp) / static_cast<double>(rank + 1);
    }
  }
  return precision_sum / static_cast<double>(golds.events.size());
}

}  // namespace

double temporal_iou(double a_start, double a_end, double b_start, double b_end) {
  if (!(a_start < a_end) || !(b_start < b_end))
    throw std::invalid_argument("temporal_iou: degenerate interval");
  double inter = std::min(a_end, b_end) - std::max(a_start, b_start);
  if (inter <= 0.0) return 0.0;
  double uni = (a_end - a_start) + (b_end - b_start) - inter;
  return inter / uni;
}

double temporal_iou(const Event& a, const Event& b) {
  return temporal_iou(a.start_s, a.end_s, b.start_s, b.end_s);
}

double recall_at_iou(const std::vector<std::optional<Event>>& top1,
                     const std::vector<EventSequence>& golds, double tau) {
  if (top1.size() != golds.size())
    throw std::invalid_argument("recall_at_iou: preds and golds must align");
  if (top1.empty()) return 0.0;
  int hits = 0;
  for (size_t i = 0; i < top1.size(); ++i)
    if (top1[i] && best_iou_against(*top1[i], golds[i]) >= tau) ++hits;
  return static_cast<double>(hits) / static_cast<double>(top1.size());
}

double mean_iou(const std::vector<std::optional<Event>>& top1,
                const std::vector<EventSequence>& golds) {
  if (top1.size() != golds.size())
    throw std::invalid_argument("mean_iou: preds and golds must align");
  if (top1.empty()) return 0.0;
  double total = 0.0;
  for (size_t i = 0; i < top1.size(); ++i)
    if (top1[i]) total += best_iou_against(*top1[i], golds[i]);
  return total / static_cast<double>(top1.size());
}

std::vector<std::pair<int, int>> greedy_match(const EventSequence& preds,
                                              const EventSequence& golds, double tau) {
  struct Pair {
    double iou;
    int p, g;
  };
  std::vector<Pair> pairs;
  for (size_t p = 0; p < preds.events.size(); ++p)
    for (size_t g = 0; g < golds.events.size(); ++g) {
      double iou = temporal_iou(preds.events[p], golds.events[g]);
      if (iou >= tau) pairs.push_back({iou, static_cast<int>(p), static_cast<int>(g)});
    }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  std::vector<bool> p_used(preds.events.size(), false), g_used(golds.events.size(), false);
  std::vector<std::pair<int, int>> matches;
  for (const Pair& pr : pairs) {
    if (p_used[static_cast<size_t>(pr.p)] || g_used[static_cast<size_t>(pr.g)]) continue;
    p_used[static_cast<size_t>(pr.p)] = true;
    g_used[static_cast<size_t>(pr.g)] = true;
    matches.emplace_back(pr.p, pr.g);
  }
  return matches;
}

double dvc_f1(const EventSequence& preds, const EventSequence& golds) {
  double total = 0.0;
  for (double tau : kF1Taus) {
    if (preds.events.empty() && golds.events.empty()) {
      total += 1.0;
      continue;
    }
    double m = static_cast<double>(greedy_match(preds, golds, tau).size());
    double precision = preds.events.empty() ? 0.0 : m / static_cast<double>(preds.events.size());
    double recall = golds.events.empty() ? 0.0 : m / static_cast<double>(golds.events.size());
    total += (precision + recall > 0.0) ? 2.0 * precision * recall / (precision + recall) : 0.0;
  }
  return total / static_cast<double>(std::size(kF1Taus));
}

double highlight_map(const EventSequence& preds, const EventSequence& golds) {
  double total = 0.0;
  for (double tau : kMapTaus) total += average_precision(preds, golds, tau);
  return total / static_cast<double>(std::size(kMapTaus));
}

int hit_at_1(const EventSequence& preds, const EventSequence& golds) {
  std::optional<Event> top = pick_top1(preds);
  if (!top || golds.events.empty()) return 0;
  int max_sal = 0;
  for (const Event& g : golds.events) max_sal = std::max(max_sal, g.saliency);
  for (const Event& g : golds.events)
    if (g.saliency == max_sal && temporal_iou(*top, g) >= 0.5) return 1;
  return 0;
}

std::optional<Event> pick_top1(const EventSequence& preds) {
  if (preds.events.empty()) return std::nullopt;
  std::vector<int> order = rank_by_score(preds);
  return preds.events[static_cast<size_t>(order.front())];
}

std::string EvalReport::to_json() const {
  auto task = [](const TaskReport& t) {
    return nlohmann::json{{"count", t.count},
                          {"r1_iou50", t.r1_iou50},
                          {"r1_iou70", t.r1_iou70},
                          {"mean_iou", t.mean_iou},
                          {"dvc_f1", t.dvc_f1},
                          {"caption_token_acc", t.caption_token_acc},
                          {"map_avg", t.map_avg},
                          {"hit_at_1", t.hit_at_1},
                          {"mean_active_experts", t.mean_active_experts}};
  };
  nlohmann::json j{{"MR", task(mr)},
                   {"DVC", task(dvc)},
                   {"VHD", task(vhd)},
                   {"total", total},
                   {"mean_active_experts", mean_active_experts}};
  return j.dump(2) + "\n";
}

std::string EvalReport::to_csv() const {
  std::string out =
      "task,count,r1_iou50,r1_iou70,mean_iou,dvc_f1,caption_token_acc,map_avg,hit_at_1,"
      "mean_active_experts\n";
  char buf[256];
  auto row = [&](const char* name, const TaskReport& t) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", name,
                  t.count, t.r1_iou50, t.r1_iou70, t.mean_iou, t.dvc_f1, t.caption_token_acc,
                  t.map_avg, t.hit_at_1, t.mean_active_experts);
    out += buf;
  };
  row("MR", mr);
  row("DVC", dvc);
  row("VHD", vhd);
  return out;
}

EvalReport evaluate(const std::function<SampleOutcome(const SyntheticSample&)>& predict,
                    const std::vector<SyntheticSample>& dataset, int threads) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: dataset is empty");
  std::vector<SampleOutcome> outcomes(dataset.size());
  if (threads <= 1) {
    for (size_t i = 0; i < dataset.size(); ++i) outcomes[i] = predict(dataset[i]);
  } else {
    // Fan out in fixed-size strides; outcomes land at their sample index, so
    // aggregation below is order-invariant regardless of scheduling.
    std::vector<std::future<void>> jobs;
    size_t stride = (dataset.size() + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
    for (int w = 0; w < threads; ++w) {
      size_t lo = static_cast<size_t>(w) * stride;
      size_t hi = std::min(dataset.size(), lo + stride);
      if (lo >= hi) break;
      jobs.push_back(std::async(std::launch::async, [&, lo, hi] {
        for (size_t i = lo; i < hi; ++i) outcomes[i] = predict(dataset[i]);
      }));
    }
    for (auto& j : jobs) j.get();
  }

  struct Acc {
    int count = 0;
    double r50 = 0, r70 = 0, miou = 0, f1 = 0, cap_correct = 0, cap_total = 0, map = 0, hit = 0,
           active = 0;
  };
  Acc acc[3];
  double active_total = 0.0;
  for (size_t i = 0; i < dataset.size(); ++i) {
    const SyntheticSample& s = dataset[i];
    const EventSequence& pred = outcomes[i].predicted;
    Acc& a = acc[static_cast<int>(s.task_kind)];
    a.count += 1;
    std::optional<Event> top = pick_top1(pred);
    if (top) {
      double iou = best_iou_against(*top, s.gold);
      a.miou += iou;
      if (iou >= 0.5) a.r50 += 1;
      if (iou >= 0.7) a.r70 += 1;
    }
    a.f1 += dvc_f1(pred, s.gold);
    for (auto [p, g] : greedy_match(pred, s.gold, 0.5)) {
      const auto& pc = pred.events[static_cast<size_t>(p)].caption;
      const auto& gc = s.gold.events[static_cast<size_t>(g)].caption;
      for (size_t k = 0; k < std::min(pc.size(), gc.size()); ++k)
        if (pc[k] == gc[k]) a.cap_correct += 1;
      a.cap_total += static_cast<double>(std::max(pc.size(), gc.size()));
    }
    a.map += highlight_map(pred, s.gold);
    a.hit += hit_at_1(pred, s.gold);
    a.active += outcomes[i].mean_active_experts;
    active_total += outcomes[i].mean_active_experts;
  }

  EvalReport rep;
  rep.total = static_cast<int>(dataset.size());
  rep.mean_active_experts = active_total / static_cast<double>(dataset.size());
  TaskReport* outs[3] = {&rep.mr, &rep.dvc, &rep.vhd};
  for (int k = 0; k < 3; ++k) {
    const Acc& a = acc[k];
    TaskReport& t = *outs[k];
    t.count = a.count;
    if (a.count == 0) continue;
    double n = static_cast<double>(a.count);
    t.r1_iou50 = a.r50 / n;
    t.r1_iou70 = a.r70 / n;
    t.mean_iou = a.miou / n;
    t.dvc_f1 = a.f1 / n;
    t.caption_token_acc = (a.cap_total > 0) ? a.cap_correct / a.cap_total : 0.0;
    t.map_avg = a.map / n;
    t.hit_at_1 = a.hit / n;
    t.mean_active_experts = a.active / n;
  }
  return rep;
}

}  // namespace expertflow
