// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace expertflow {

// Dense 64-bit matrices, row-major so serialized buffers match the on-disk
// checkpoint layout without a transpose.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// Category of a token inside a decoded stream. The codec only ever emits the
// first six; Visual marks fused frame tokens inside the decoder sequence and
// exists so routing statistics can be kept for them too.
enum class TaskType : std::uint8_t {
  Time = 0,
  Score = 1,
  Text = 2,
  Sep = 3,
  Sync = 4,
  Eos = 5,
  Visual = 6,
};

inline constexpr int kNumTaskTypes = 7;

inline const char* task_type_name(TaskType t) {
  switch (t) {
    case TaskType::Time: return "TIME";
    case TaskType::Score: return "SCORE";
    case TaskType::Text: return "TEXT";
    case TaskType::Sep: return "SEP";
    case TaskType::Sync: return "SYNC";
    case TaskType::Eos: return "EOS";
    case TaskType::Visual: return "VISUAL";
  }
  return "?";
}

}  // namespace expertflow
