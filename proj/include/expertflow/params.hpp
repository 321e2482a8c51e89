// Copyright 2026 The ExpertFlow Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "expertflow/types.hpp"

namespace expertflow {

// A trainable matrix with its Adam moments. Lifecycle events (expert
// addition/removal) resize value and moments together so the optimizer never
// sees stale state.
struct Param {
  Mat v;  // value
  Mat m;  // Adam first moment
  Mat s;  // Adam second moment

  Param() = default;
  explicit Param(Mat value)
      : v(std::move(value)), m(Mat::Zero(v.rows(), v.cols())), s(Mat::Zero(v.rows(), v.cols())) {}

  void reset_moments() {
    m.setZero();
    s.setZero();
  }
};

}  // namespace expertflow
