// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace expertflow {

namespace {

using nlohmann::json;

constexpr char kMagic[5] = {'E', 'X', 'P', 'F', '1'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("checkpoint: truncated file");
  return v;
}

void write_record(std::ofstream& out, const std::string& name, const Mat& m) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint32_t>(out, 2);
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(m.size())));
}

std::pair<std::string, Mat> read_record(std::ifstream& in) {
  auto name_len = read_pod<std::uint32_t>(in);
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  auto rank = read_pod<std::uint32_t>(in);
  if (rank != 2) throw CheckpointError("checkpoint: unsupported record rank");
  auto rows = read_pod<std::uint64_t>(in);
  auto cols = read_pod<std::uint64_t>(in);
  Mat m(static_cast<Index>(rows), static_cast<Index>(cols));
  in.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * rows * cols));
  if (!in) throw CheckpointError("checkpoint: truncated record " + name);
  return {std::move(name), std::move(m)};
}

}  // namespace

void save_checkpoint(const std::string& path, DecoderState& state, const RunConfig& run_cfg) {
  json meta;
  meta["run_config"] = json::parse(run_config_to_json(run_cfg));
  meta["stage_completed"] = state.stage_completed;
  meta["current_stage"] = state.current_stage;
  meta["adam_t"] = state.adam_t;
  meta["global_step"] = state.global_step;
  json blocks = json::array();
  for (const DecoderBlock& blk : state.blocks) {
    blocks.push_back(json{{"k", blk.experts.empty() ? 0 : blk.gate.experts()},
                          {"r_e", blk.record.r_e},
                          {"r_s_count", blk.record.r_s_count},
                          {"unrouted_frac", blk.record.unrouted_frac},
                          {"step", blk.record.step}});
  }
  meta["blocks"] = blocks;
  std::string meta_text = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod<std::uint16_t>(out, kVersion);
  write_pod<std::uint64_t>(out, meta_text.size());
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

  std::vector<std::pair<std::string, const Mat*>> records;
  for (NamedParam& np : all_params(state)) records.emplace_back(np.name, &np.p->v);
  for (size_t i = 0; i < state.blocks.size(); ++i) {
    std::string p = "b" + std::to_string(i) + ".record.";
    records.emplace_back(p + "a", &state.blocks[i].record.a);
    records.emplace_back(p + "a_e", &state.blocks[i].record.a_e);
    records.emplace_back(p + "r_s_mean", &state.blocks[i].record.r_s_mean);
  }
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, m] : records) write_record(out, name, *m);
  if (!out) throw CheckpointError("checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path);
  char magic[5];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path);
  auto version = read_pod<std::uint16_t>(in);
  if (version != kVersion)
    throw CheckpointVersionError("checkpoint: version " + std::to_string(version) +
                                 " not supported (expected " + std::to_string(kVersion) + ")");
  auto meta_len = read_pod<std::uint64_t>(in);
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw CheckpointError("checkpoint: truncated meta");
  json meta = json::parse(meta_text, nullptr, false);
  if (meta.is_discarded()) throw CheckpointError("checkpoint: corrupt meta JSON");

  LoadedCheckpoint loaded;
  loaded.run_cfg = run_config_from_json(meta.at("run_config").dump());
  DecoderState& s = loaded.state;
  s = init_state(loaded.run_cfg.model);
  s.stage_completed = meta.at("stage_completed").get<int>();
  s.current_stage = meta.at("current_stage").get<int>();
  s.adam_t = meta.at("adam_t").get<long long>();
  s.global_step = meta.at("global_step").get<long long>();

  const json& blocks = meta.at("blocks");
  if (blocks.size() != s.blocks.size()) throw CheckpointError("checkpoint: block count mismatch");
  for (size_t i = 0; i < s.blocks.size(); ++i) {
    DecoderBlock& blk = s.blocks[i];
    const json& bj = blocks[i];
    int k = bj.at("k").get<int>();
    if (s.current_stage >= 2) {
      // Rebuild the MoE skeleton at the recorded width; payloads overwrite it.
      blk.dense_ffn.reset();
      blk.experts.clear();
      const int d = s.cfg.d, h = s.cfg.expert_hidden;
      for (int e = 0; e < k; ++e) {
        Expert ex;
        ex.w1 = Param(Mat::Zero(d, h));
        ex.b1 = Param(Mat::Zero(1, h));
        ex.w2 = Param(Mat::Zero(h, d));
        ex.b2 = Param(Mat::Zero(1, d));
        blk.experts.push_back(std::move(ex));
      }
      blk.gate.w_g = Param(Mat::Zero(d, k));
      blk.gate.g = Param(Mat::Zero(1, k));
      blk.gate.alpha = s.cfg.alpha;
      blk.gate.mode = s.cfg.gating;
      blk.gate.top_k = s.cfg.top_k;
      blk.gate.scalar_task_rate = s.cfg.scalar_task_rate;
      blk.record = make_record(k, d);
    }
    blk.record.r_e = bj.at("r_e").get<std::vector<long long>>();
    blk.record.r_s_count = bj.at("r_s_count").get<long long>();
    blk.record.unrouted_frac = bj.at("unrouted_frac").get<double>();
    blk.record.step = bj.at("step").get<long long>();
  }

  std::map<std::string, Mat*> slots;
  for (NamedParam& np : all_params(s)) slots[np.name] = &np.p->v;
  for (size_t i = 0; i < s.blocks.size(); ++i) {
    std::string p = "b" + std::to_string(i) + ".record.";
    slots[p + "a"] = &s.blocks[i].record.a;
    slots[p + "a_e"] = &s.blocks[i].record.a_e;
    slots[p + "r_s_mean"] = &s.blocks[i].record.r_s_mean;
  }
  auto count = read_pod<std::uint32_t>(in);
  for (std::uint32_t r = 0; r < count; ++r) {
    auto [name, m] = read_record(in);
    auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError("checkpoint: unexpected record " + name);
    if (it->second->rows() != m.rows() || it->second->cols() != m.cols())
      throw CheckpointError("checkpoint: shape mismatch for " + name);
    *it->second = std::move(m);
    slots.erase(it);
  }
  if (!slots.empty())
    throw CheckpointError("checkpoint: missing record " + slots.begin()->first);
  return loaded;
}

}  // namespace expertflow
