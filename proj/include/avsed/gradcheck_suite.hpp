// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "avsed/gradcheck.hpp"

namespace avsed {

/// Micro dimensions for checking every layer and the full fused CRNN.
struct GradCheckSuiteOptions {
  std::size_t frames = 8;  // spectral frames; model output has frames / 4
  std::size_t n_classes = 3;
  std::size_t gru_hidden = 6;
  std::size_t pre_audio_dim = 6;
  std::size_t pre_visual_dim = 10;
  double eps = 1e-4;
  double tolerance = 1e-4;
  std::size_t max_coords_per_tensor = 48;
  std::uint64_t seed = 1;
  /// Negative control: scales one analytic gradient so the check must fail.
  bool inject_fault = false;
};

struct GradCheckSuiteResult {
  std::vector<GradCheckReport> reports;
  double max_relative_error = 0.0;
  bool passed = false;
};

GradCheckSuiteResult run_gradcheck_suite(const GradCheckSuiteOptions& opts);

}  // namespace avsed
