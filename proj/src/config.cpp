// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#include "expertflow/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

namespace expertflow {

namespace {

using nlohmann::json;

// Tracks which keys of one JSON object were consumed, so leftovers can be
// reported by path.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;  // keep default
    seen_.insert(key);
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + ": type mismatch");
    }
  }

  void get_enum(const char* key, GatingMode& out) {
    std::string text;
    get(key, text);
    if (text.empty()) return;
    if (text == "dynamic") out = GatingMode::Dynamic;
    else if (text == "topk") out = GatingMode::TopK;
    else throw ConfigError(path_ + "." + key + ": expected \"dynamic\" or \"topk\"");
  }

  const json* child(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError(path_ + "." + it.key() + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json model_to_json(const ModelConfig& m) {
  return json{{"d", m.d},
              {"blocks", m.blocks},
              {"attn_heads", m.attn_heads},
              {"expert_hidden", m.expert_hidden},
              {"k_init", m.k_init},
              {"text_vocab", m.text_vocab},
              {"max_frames", m.max_frames},
              {"context", m.context},
              {"gating", m.gating == GatingMode::Dynamic ? "dynamic" : "topk"},
              {"top_k", m.top_k},
              {"alpha", m.alpha},
              {"scalar_task_rate", m.scalar_task_rate},
              {"lifecycle_in_stage3", m.lifecycle_in_stage3},
              {"max_events", m.max_events},
              {"max_caption_len", m.max_caption_len},
              {"max_int_digits", m.max_int_digits}};
}

void model_from_json(const json& j, ModelConfig& m) {
  StrictObject o(j, "model");
  o.get("d", m.d);
  o.get("blocks", m.blocks);
  o.get("attn_heads", m.attn_heads);
  o.get("expert_hidden", m.expert_hidden);
  o.get("k_init", m.k_init);
  o.get("text_vocab", m.text_vocab);
  o.get("max_frames", m.max_frames);
  o.get("context", m.context);
  o.get_enum("gating", m.gating);
  o.get("top_k", m.top_k);
  o.get("alpha", m.alpha);
  o.get("scalar_task_rate", m.scalar_task_rate);
  o.get("lifecycle_in_stage3", m.lifecycle_in_stage3);
  o.get("max_events", m.max_events);
  o.get("max_caption_len", m.max_caption_len);
  o.get("max_int_digits", m.max_int_digits);
  o.finish();
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

std::string run_config_to_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["model"] = model_to_json(cfg.model);
  j["lifecycle"] = json{{"ema_decay", cfg.lifecycle.ema_decay},
                        {"tau_min", cfg.lifecycle.tau_min},
                        {"tau_add", cfg.lifecycle.tau_add},
                        {"window", cfg.lifecycle.window},
                        {"warmup", cfg.lifecycle.warmup},
                        {"k_min", cfg.lifecycle.k_min},
                        {"k_max", cfg.lifecycle.k_max}};
  j["losses"] = json{{"lambda1", cfg.losses.lambda1},
                     {"lambda2", cfg.losses.lambda2},
                     {"z_coef", cfg.losses.z_coef},
                     {"per_batch_rates", cfg.losses.per_batch_rates}};
  j["data"] = json{{"n_classes", cfg.data.synth.n_classes},
                   {"frames", cfg.data.synth.frames},
                   {"max_events", cfg.data.synth.max_events},
                   {"noise", cfg.data.synth.noise},
                   {"dim", cfg.data.synth.dim},
                   {"train_samples", cfg.data.train_samples},
                   {"val_samples", cfg.data.val_samples}};
  j["train"] = json{{"s1", cfg.train.s1},
                    {"s2", cfg.train.s2},
                    {"s3", cfg.train.s3},
                    {"batch", cfg.train.batch}};
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  StrictObject root(j, "config");
  root.get("seed", cfg.seed);
  if (const json* m = root.child("model")) model_from_json(*m, cfg.model);
  if (const json* l = root.child("lifecycle")) {
    StrictObject o(*l, "lifecycle");
    o.get("ema_decay", cfg.lifecycle.ema_decay);
    o.get("tau_min", cfg.lifecycle.tau_min);
    o.get("tau_add", cfg.lifecycle.tau_add);
    o.get("window", cfg.lifecycle.window);
    o.get("warmup", cfg.lifecycle.warmup);
    o.get("k_min", cfg.lifecycle.k_min);
    o.get("k_max", cfg.lifecycle.k_max);
    o.finish();
  }
  if (const json* l = root.child("losses")) {
    StrictObject o(*l, "losses");
    o.get("lambda1", cfg.losses.lambda1);
    o.get("lambda2", cfg.losses.lambda2);
    o.get("z_coef", cfg.losses.z_coef);
    o.get("per_batch_rates", cfg.losses.per_batch_rates);
    o.finish();
  }
  if (const json* d = root.child("data")) {
    StrictObject o(*d, "data");
    o.get("n_classes", cfg.data.synth.n_classes);
    o.get("frames", cfg.data.synth.frames);
    o.get("max_events", cfg.data.synth.max_events);
    o.get("noise", cfg.data.synth.noise);
    o.get("dim", cfg.data.synth.dim);
    o.get("train_samples", cfg.data.train_samples);
    o.get("val_samples", cfg.data.val_samples);
    o.finish();
  }
  if (const json* tr = root.child("train")) {
    StrictObject o(*tr, "train");
    o.get("s1", cfg.train.s1);
    o.get("s2", cfg.train.s2);
    o.get("s3", cfg.train.s3);
    o.get("batch", cfg.train.batch);
    o.finish();
  }
  root.finish();
  cfg.model.seed = cfg.seed;
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return run_config_from_json(text);
}

void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value) {
  json root = json::parse(run_config_to_json(cfg));
  json* node = &root;
  std::string rest = dotted_key;
  std::string path;
  while (true) {
    size_t dot = rest.find('.');
    std::string key = rest.substr(0, dot);
    path += (path.empty() ? "" : ".") + key;
    if (!node->contains(key)) throw ConfigError(path + ": unknown key");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    rest = rest.substr(dot + 1);
  }
  if (node->is_object()) throw ConfigError(path + ": cannot assign to a section");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare strings like `dynamic`
  }
  *node = parsed;
  cfg = run_config_from_json(root.dump());
}

void validate_run_config(const RunConfig& cfg) {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  const ModelConfig& m = cfg.model;
  if (m.d < 2 || m.blocks < 1 || m.attn_heads < 1 || m.expert_hidden < 1)
    fail("model dimensions must be positive");
  if (m.d % m.attn_heads != 0) fail("model.d must be divisible by model.attn_heads");
  if (m.k_init < cfg.lifecycle.k_min || m.k_init > cfg.lifecycle.k_max)
    fail("model.k_init must lie in [lifecycle.k_min, lifecycle.k_max]");
  if (m.top_k < 1 || m.top_k > m.k_init) fail("model.top_k must lie in [1, model.k_init]");
  if (m.alpha < 0.0) fail("model.alpha must be >= 0");
  if (m.text_vocab < 3 + 3 * cfg.data.synth.n_classes)
    fail("model.text_vocab too small for the synthetic query/caption layout");
  if (cfg.data.synth.dim != m.d) fail("data.dim must equal model.d");
  if (cfg.data.synth.frames > m.max_frames) fail("data.frames exceeds model.max_frames");
  if (cfg.data.synth.max_events < 1) fail("data.max_events must be >= 1");
  if (cfg.data.synth.noise < 0.0) fail("data.noise must be >= 0");
  const int stream_cap =
      m.max_events * (2 * (m.max_int_digits + 2) + m.max_caption_len + 6) + 1;
  if (cfg.data.synth.frames + 2 + stream_cap > m.context)
    fail("model.context too small for frames + query + the longest stream");
  const LifecycleConfig& l = cfg.lifecycle;
  if (!(l.ema_decay > 0.0 && l.ema_decay < 1.0)) fail("lifecycle.ema_decay must be in (0, 1)");
  if (!(l.tau_min > 0.0 && l.tau_min < 1.0)) fail("lifecycle.tau_min must be in (0, 1)");
  if (l.k_min < 1 || l.k_min > l.k_max) fail("lifecycle.k_min must be in [1, k_max]");
  if (l.window < 1) fail("lifecycle.window must be >= 1");
  if (cfg.losses.lambda1 < 0 || cfg.losses.lambda2 < 0 || cfg.losses.z_coef < 0)
    fail("loss coefficients must be >= 0");
  if (cfg.train.batch < 1) fail("train.batch must be >= 1");
  if (cfg.train.s1 < 0 || cfg.train.s2 < 0 || cfg.train.s3 < 0)
    fail("stage step counts must be >= 0");
  if (cfg.data.train_samples < 1 || cfg.data.val_samples < 1)
    fail("data splits must contain at least one sample");
}

}  // namespace expertflow
