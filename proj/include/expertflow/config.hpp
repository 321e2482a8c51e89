// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: structured-text (JSON) files with strict parsing
// (unknown keys and type mismatches fail with the offending key path) and
// dotted-path command-line overrides.

#pragma once

#include "expertflow/lifecycle.hpp"
#include "expertflow/losses.hpp"
#include "expertflow/model.hpp"
#include "expertflow/synthdata.hpp"

#include <stdexcept>
#include <string>

namespace expertflow {

struct DataConfig {
  SynthConfig synth;
  int train_samples = 300;
  int val_samples = 60;
};

struct TrainSchedule {
  int s1 = 500;
  int s2 = 1000;
  int s3 = 1000;
  int batch = 4;
};

struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  LifecycleConfig lifecycle;
  LossWeights losses;
  DataConfig data;
  TrainSchedule train;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig default_run_config();

// Canonical key-sorted JSON text (trailing newline included).
std::string run_config_to_json(const RunConfig& cfg);

// Strict parse; rejects unknown keys and wrong types with the key path.
RunConfig run_config_from_json(const std::string& text);

RunConfig load_run_config(const std::string& path);

// Applies `--a.b.c=value` style overrides: the dotted key must name an
// existing field; the value is parsed as a JSON literal when possible and as
// a string otherwise.
void apply_override(RunConfig& cfg, const std::string& dotted_key, const std::string& value);

// Cross-field checks (dimension agreement, context budget, threshold ranges).
void validate_run_config(const RunConfig& cfg);

// Disjoint seed ranges for the two splits.
inline std::uint64_t train_seed_base(const RunConfig& cfg) {
  return cfg.seed * 1000003ull + 17;
}
inline std::uint64_t val_seed_base(const RunConfig& cfg) {
  return train_seed_base(cfg) + 1000000ull;
}

}  // namespace expertflow
