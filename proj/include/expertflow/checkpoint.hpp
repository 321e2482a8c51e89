// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format, bit-exact across save/load:
//   magic "EXPF1" | u16 version | u64 meta length | canonical key-sorted JSON
//   | u32 record count | records
// each record: u32 name length | UTF-8 name | u32 rank | u64 dims[rank] |
// row-major little-endian f64 payload. The meta JSON embeds the full run
// configuration plus the routing-record scalars per block.

#pragma once

#include "expertflow/config.hpp"
#include "expertflow/model.hpp"

#include <stdexcept>
#include <string>

namespace expertflow {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};

void save_checkpoint(const std::string& path, DecoderState& state, const RunConfig& run_cfg);

struct LoadedCheckpoint {
  DecoderState state;
  RunConfig run_cfg;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace expertflow
