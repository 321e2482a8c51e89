// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: `expertflow train|eval|inspect-routing|gradcheck`.
// Dotted flags like `--model.gating=topk --model.k_init=8` override any
// config field. EXPERTFLOW_THREADS caps evaluation parallelism.

#include "expertflow/checkpoint.hpp"
#include "expertflow/config.hpp"
#include "expertflow/gradcheck.hpp"
#include "expertflow/metrics.hpp"
#include "expertflow/model.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using namespace expertflow;

namespace {

int eval_threads() {
  unsigned n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("EXPERTFLOW_THREADS")) {
    long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1 && static_cast<unsigned>(cap) < n) n = static_cast<unsigned>(cap);
  }
  return static_cast<int>(n);
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

// Splits argv into dotted-key overrides and everything else. An override is
// `--a.b=value` (the key has at least one dot before `=`).
std::vector<std::pair<std::string, std::string>> extract_overrides(std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> overrides;
  std::vector<std::string> kept;
  for (std::string& a : args) {
    if (a.rfind("--", 0) == 0) {
      size_t eq = a.find('=');
      size_t dot = a.find('.');
      if (eq != std::string::npos && dot != std::string::npos && dot < eq) {
        overrides.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
        continue;
      }
    }
    kept.push_back(std::move(a));
  }
  args = std::move(kept);
  return overrides;
}

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg = config_path.empty() ? default_run_config() : load_run_config(config_path);
  for (const auto& [key, value] : overrides) apply_override(cfg, key, value);
  cfg.model.seed = cfg.seed;
  validate_run_config(cfg);
  return cfg;
}

std::string loss_curve_csv(const std::vector<StepRow>& rows, int blocks) {
  std::string out = "step,stage,ce,z,aux,total,active_experts_mean";
  for (int i = 0; i < blocks; ++i) out += ",k" + std::to_string(i);
  out += "\n";
  char buf[256];
  for (const StepRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.9f,%.9f,%.9f,%.9f,%.6f", r.step, r.stage,
                  r.losses.ce, r.losses.z, r.losses.aux, r.losses.total,
                  r.losses.active_experts_mean);
    out += buf;
    for (int k : r.losses.k_per_layer) out += "," + std::to_string(k);
    out += "\n";
  }
  return out;
}

std::string lifecycle_csv(const std::vector<LifecycleEvent>& events) {
  std::string out = "step,layer,event,expert,k_after\n";
  for (const LifecycleEvent& e : events) {
    out += std::to_string(e.step) + "," + std::to_string(e.layer) + "," +
           (e.added ? "add" : "remove") + "," + std::to_string(e.expert) + "," +
           std::to_string(e.k_after) + "\n";
  }
  return out;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig cfg = resolve_config(config_path, overrides);
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "config.json", run_config_to_json(cfg));

  std::vector<SyntheticSample> train_set =
      gen_split(cfg.data.synth, cfg.data.train_samples, train_seed_base(cfg));
  DecoderState state = init_state(cfg.model);

  std::vector<StepRow> rows;
  std::vector<LifecycleEvent> events;
  const int steps[3] = {cfg.train.s1, cfg.train.s2, cfg.train.s3};
  try {
    for (int stage = 1; stage <= 3; ++stage) {
      StageRunResult res = run_stage(state, stage, train_set, steps[stage - 1], cfg.train.batch,
                                     cfg.lifecycle, cfg.losses);
      rows.insert(rows.end(), res.rows.begin(), res.rows.end());
      events.insert(events.end(), res.events.begin(), res.events.end());
      save_checkpoint((fs::path(out_dir) / ("stage" + std::to_string(stage) + ".ckpt")).string(),
                      state, cfg);
      std::cout << "stage " << stage << " done (" << steps[stage - 1] << " steps)\n";
    }
  } catch (const TrainingDiverged& e) {
    nlohmann::json diag{{"ce", e.parts.ce},
                        {"z", e.parts.z},
                        {"aux", e.parts.aux},
                        {"total", e.parts.total},
                        {"step", state.global_step}};
    fs::path diag_path = fs::path(out_dir) / "diagnostics.json";
    write_file(diag_path, diag.dump(2) + "\n");
    std::cerr << "error: " << e.what() << "; diagnostics at " << diag_path << "\n";
    return 3;
  }

  write_file(fs::path(out_dir) / "loss_curve.csv", loss_curve_csv(rows, cfg.model.blocks));
  write_file(fs::path(out_dir) / "lifecycle_events.csv", lifecycle_csv(events));
  std::vector<const RoutingRecord*> records;
  for (const DecoderBlock& blk : state.blocks) records.push_back(&blk.record);
  write_file(fs::path(out_dir) / "routing.csv", export_activation_csv(records));
  std::cout << "outputs in " << out_dir << "\n";
  return 0;
}

std::vector<SyntheticSample> split_for(const RunConfig& cfg, const std::string& split) {
  if (split == "train")
    return gen_split(cfg.data.synth, cfg.data.train_samples, train_seed_base(cfg));
  if (split == "val") return gen_split(cfg.data.synth, cfg.data.val_samples, val_seed_base(cfg));
  throw ConfigError("split must be `train` or `val`");
}

int cmd_eval(const std::string& ckpt_path, const std::string& split, const std::string& out_dir,
             bool oracle_replay) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  std::vector<SyntheticSample> data = split_for(loaded.run_cfg, split);
  EvalReport report;
  if (oracle_replay) {
    report = evaluate([](const SyntheticSample& s) { return SampleOutcome{s.gold, 0.0}; }, data,
                      eval_threads());
  } else {
    DecoderState& state = loaded.state;
    report = evaluate(
        [&state](const SyntheticSample& s) {
          GenerateOutcome g =
              generate(state, input_from_sample(s), state.cfg.max_events);
          return SampleOutcome{g.events, g.mean_active_experts};
        },
        data, eval_threads());
  }
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "report.json", report.to_json());
  write_file(fs::path(out_dir) / "report.csv", report.to_csv());
  std::cout << report.to_csv();
  return 0;
}

int cmd_inspect_routing(const std::string& ckpt_path, const std::string& split,
                        const std::string& out_dir) {
  LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
  std::vector<SyntheticSample> data = split_for(loaded.run_cfg, split);
  std::vector<RoutingRecord> measured = measure_routing(loaded.state, data);
  std::vector<const RoutingRecord*> ptrs;
  for (const RoutingRecord& r : measured) ptrs.push_back(&r);
  std::string csv = export_activation_csv(ptrs);
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "routing_inspect.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_gradcheck() {
  std::vector<GradCheckEntry> ops = run_op_gradchecks();
  double op_max = 0.0;
  std::string op_worst;
  for (const GradCheckEntry& e : ops) {
    if (e.rel_err > op_max) {
      op_max = e.rel_err;
      op_worst = e.name;
    }
  }
  std::printf("per-op max rel err: %.3e (%s)\n", op_max, op_worst.c_str());

  GradCheckReport report = run_model_gradcheck();
  for (const GradCheckEntry& e : report.params)
    std::printf("  %-16s %.3e\n", e.name.c_str(), e.rel_err);
  std::printf("full-model max rel err: %.3e (%s), gate margin %.3f\n", report.max_rel_err,
              report.worst_param.c_str(), report.gate_margin);
  if (op_max >= 1e-4) {
    std::printf("FAIL: op %s exceeds 1e-4\n", op_worst.c_str());
    return 1;
  }
  if (report.max_rel_err >= 1e-3) {
    std::printf("FAIL: parameter %s exceeds 1e-3\n", report.worst_param.c_str());
    return 1;
  }
  std::printf("OK\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  auto overrides = extract_overrides(args);

  CLI::App app{"desk-scale dynamic mixture-of-experts grounding lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", ckpt_path, split = "val";
  bool oracle_replay = false;

  CLI::App* train = app.add_subcommand("train", "run the three training stages");
  train->add_option("--config", config_path, "run config JSON");
  train->add_option("--out", out_dir, "output directory");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  eval->add_option("--split", split, "train|val");
  eval->add_option("--out", out_dir, "output directory");
  eval->add_flag("--oracle-replay", oracle_replay, "score the gold sequences themselves");

  CLI::App* inspect = app.add_subcommand("inspect-routing", "export activation rates per layer");
  inspect->add_option("--checkpoint", ckpt_path, "checkpoint path")->required();
  inspect->add_option("--split", split, "train|val");
  inspect->add_option("--out", out_dir, "output directory");

  app.add_subcommand("gradcheck", "finite-difference gradient verification");

  std::vector<char*> cargs;
  std::string prog = "expertflow";
  cargs.push_back(prog.data());
  for (std::string& a : args) cargs.push_back(a.data());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("train")) return cmd_train(config_path, out_dir, overrides);
    if (app.got_subcommand("eval")) return cmd_eval(ckpt_path, split, out_dir, oracle_replay);
    if (app.got_subcommand("inspect-routing"))
      return cmd_inspect_routing(ckpt_path, split, out_dir);
    if (app.got_subcommand("gradcheck")) return cmd_gradcheck();
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
