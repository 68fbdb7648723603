// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "avsed/tensor.hpp"

namespace avsed {

struct GradCheckOptions {
  double eps = 1e-4;
  /// Tensors larger than this are checked on a seeded random subset of
  /// coordinates; 0 checks every coordinate.
  std::size_t max_coords_per_tensor = 48;
  std::uint64_t seed = 7;
  /// When a +/-eps perturbation flips the sign of any ReLU input the central
  /// difference is not valid; retry with eps/10 and eps/100, then replace
  /// the coordinate.
  bool skip_kinks = true;
};

/// A differentiable computation in 64-bit. `forward` reads the current
/// values of `params` and `inputs`; `backward` receives d(loss)/d(output),
/// accumulates parameter gradients and returns input gradients in the order
/// of `inputs`. Stochastic elements must be frozen by the caller.
struct GradCheckTarget {
  std::string name;
  std::vector<NamedParam<double>> params;
  std::vector<std::pair<std::string, Tensor<double>*>> inputs;
  std::function<Tensor<double>()> forward;
  std::function<std::vector<Tensor<double>>(const Tensor<double>&)> backward;
};

struct GradCheckEntry {
  std::string tensor;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  double max_relative_error = 0.0;
};

struct GradCheckReport {
  std::string target;
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::vector<GradCheckEntry> entries;
};

/// Compares analytic gradients of loss = sum(w * output), with w drawn
/// from the seed, against central differences. Per coordinate the error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(GradCheckTarget& target,
                           const GradCheckOptions& opts = {});

}  // namespace avsed
