// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/synthdata.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <numeric>
#include <random>
#include <stdexcept>

namespace expertflow {

namespace {

constexpr std::int64_t kMinEventDs = 30;   // 3.0 s, keeps events several frames long
constexpr std::int64_t kMaxEventDs = 60;   // 6.0 s
constexpr std::int64_t kMinGapDs = 10;     // 1.0 s between events
constexpr std::int64_t kGridDs = 5;        // 0.5 s timestamp grid

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string base64_f64(const std::vector<double>& values) {
  static const char* alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::vector<unsigned char> bytes(values.size() * 8);
  // Little-endian f64; asserted at build time for the checkpoint writer too.
  std::memcpy(bytes.data(), values.data(), bytes.size());
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (size_t i = 0; i < bytes.size(); i += 3) {
    unsigned v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    if (i + 2 < bytes.size()) v |= bytes[i + 2];
    out += alphabet[(v >> 18) & 63];
    out += alphabet[(v >> 12) & 63];
    out += (i + 1 < bytes.size()) ? alphabet[(v >> 6) & 63] : '=';
    out += (i + 2 < bytes.size()) ? alphabet[v & 63] : '=';
  }
  return out;
}

}  // namespace

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::MR: return "MR";
    case TaskKind::DVC: return "DVC";
    case TaskKind::VHD: return "VHD";
  }
  return "?";
}

Mat class_prototype(int class_index, int dim) {
  std::mt19937_64 rng(splitmix64(0xC1A55ull * 1315423911ull + static_cast<std::uint64_t>(class_index)));
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat p(1, dim);
  for (Index j = 0; j < dim; ++j) p(0, j) = gauss(rng);
  double n = p.norm();
  if (n == 0.0) p(0, 0) = 1.0; else p /= n;
  return p;
}

int class_saliency(int class_index) { return (class_index * 2 + 1) % 5; }

std::vector<int> class_caption(const SynthConfig& cfg, int class_index) {
  int base = 3 + cfg.n_classes + 2 * class_index;
  return {base, base + 1};
}

int class_query_token(const SynthConfig& cfg, int class_index) {
  (void)cfg;
  return 3 + class_index;
}

int task_marker_token(TaskKind kind) { return static_cast<int>(kind); }

SyntheticSample gen_sample(const SynthConfig& cfg, TaskKind kind, std::uint64_t seed) {
  if (cfg.n_classes < 1 || cfg.dim < 1 || cfg.frames < 1)
    throw std::runtime_error("gen_sample: invalid config");
  const std::int64_t total_ds = static_cast<std::int64_t>(cfg.frames) * 10;
  if (kMinEventDs > total_ds)
    throw std::runtime_error("gen_sample: video too short for a single event");

  std::mt19937_64 rng(splitmix64(seed * 4 + static_cast<std::uint64_t>(kind) + 1));
  auto uniform_int = [&](std::int64_t lo, std::int64_t hi) {  // inclusive
    return lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };

  // Pick the largest feasible event count, then lengths and grid-aligned gaps.
  int m_cap = cfg.max_events;
  while (m_cap > 1 &&
         m_cap * kMinEventDs + (m_cap - 1) * kMinGapDs > total_ds)
    --m_cap;
  int m = static_cast<int>(uniform_int(1, m_cap));
  if (m > cfg.n_classes) m = cfg.n_classes;  // classes are distinct per event

  std::vector<std::int64_t> lengths(static_cast<size_t>(m));
  std::int64_t used = (m - 1) * kMinGapDs;
  for (auto& len : lengths) {
    len = uniform_int(0, (kMaxEventDs - kMinEventDs) / kGridDs) * kGridDs + kMinEventDs;
    used += len;
  }
  // Shrink uniformly if the draw overflowed the timeline.
  while (used > total_ds) {
    bool shrunk = false;
    for (auto& len : lengths) {
      if (used <= total_ds) break;
      if (len > kMinEventDs) {
        len -= kGridDs;
        used -= kGridDs;
        shrunk = true;
      }
    }
    if (!shrunk) throw std::runtime_error("gen_sample: cannot fit events");
  }
  std::int64_t slack_units = (total_ds - used) / kGridDs;

  // Distribute slack before each event.
  std::vector<std::int64_t> offsets(static_cast<size_t>(m));
  for (auto& off : offsets) {
    off = uniform_int(0, slack_units);
    slack_units -= off;
  }

  std::vector<int> classes(static_cast<size_t>(cfg.n_classes));
  std::iota(classes.begin(), classes.end(), 0);
  for (size_t i = classes.size() - 1; i > 0; --i)
    std::swap(classes[i], classes[static_cast<size_t>(rng() % (i + 1))]);
  classes.resize(static_cast<size_t>(m));

  SyntheticSample s;
  s.task_kind = kind;
  std::int64_t cursor = 0;
  for (int i = 0; i < m; ++i) {
    cursor += offsets[static_cast<size_t>(i)] * kGridDs;
    Event e;
    e.start_s = static_cast<double>(cursor) / 10.0;
    cursor += lengths[static_cast<size_t>(i)];
    e.end_s = static_cast<double>(cursor) / 10.0;
    cursor += (i + 1 < m) ? kMinGapDs : 0;
    int cls = classes[static_cast<size_t>(i)];
    e.saliency = class_saliency(cls);
    e.caption = class_caption(cfg, cls);
    s.gold.events.push_back(std::move(e));
  }

  s.frames = Mat(cfg.frames, cfg.dim);
  s.frame_timestamps.resize(static_cast<size_t>(cfg.frames));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int t = 0; t < cfg.frames; ++t) {
    s.frame_timestamps[static_cast<size_t>(t)] = static_cast<double>(t);
    int cls = cfg.n_classes;  // background
    for (int i = 0; i < m; ++i) {
      const Event& e = s.gold.events[static_cast<size_t>(i)];
      if (e.start_s <= t && t < e.end_s) {
        cls = classes[static_cast<size_t>(i)];
        break;
      }
    }
    Mat noise(1, cfg.dim);
    for (Index j = 0; j < cfg.dim; ++j) noise(0, j) = gauss(rng);
    s.frames.row(t) = class_prototype(cls, cfg.dim) + cfg.noise * noise;
  }

  switch (kind) {
    case TaskKind::MR: {
      int pick = static_cast<int>(uniform_int(0, m - 1));
      int cls = classes[static_cast<size_t>(pick)];
      s.query = {task_marker_token(kind), class_query_token(cfg, cls)};
      EventSequence gold;
      gold.events.push_back(s.gold.events[static_cast<size_t>(pick)]);
      s.gold = std::move(gold);
      break;
    }
    case TaskKind::DVC:
    case TaskKind::VHD:
      s.query = {task_marker_token(kind)};
      break;
  }
  return s;
}

std::vector<SyntheticSample> gen_split(const SynthConfig& cfg, int n, std::uint64_t base_seed) {
  if (n < 1) throw std::invalid_argument("gen_split: need at least one sample");
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    out.push_back(gen_sample(cfg, static_cast<TaskKind>(i % 3), base_seed + static_cast<std::uint64_t>(i)));
  return out;
}

std::string dump_dataset(const std::vector<SyntheticSample>& samples) {
  std::string out;
  for (const SyntheticSample& s : samples) {
    nlohmann::json rec;
    rec["task"] = task_kind_name(s.task_kind);
    std::vector<double> flat(s.frames.data(), s.frames.data() + s.frames.size());
    rec["frames_rows"] = s.frames.rows();
    rec["frames_cols"] = s.frames.cols();
    rec["frames_b64"] = base64_f64(flat);
    rec["timestamps_b64"] = base64_f64(s.frame_timestamps);
    rec["query"] = s.query;
    nlohmann::json events = nlohmann::json::array();
    for (const Event& e : s.gold.events) {
      events.push_back({{"start", e.start_s},
                        {"end", e.end_s},
                        {"saliency", e.saliency},
                        {"caption", e.caption}});
    }
    rec["gold"] = events;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

}  // namespace expertflow
