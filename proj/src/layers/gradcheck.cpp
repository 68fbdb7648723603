// SPDX-License-Identifier: Apache-2.0
#include "avsed/gradcheck.hpp"

#include "avsed/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace avsed {
namespace {

double weighted_sum(const Tensor<double>& y, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
  return s;
}

// Candidate coordinates in visiting order: all of them when the tensor is
// small enough, otherwise a seeded permutation consumed until `limit` pass.
std::vector<std::size_t> candidate_coords(std::size_t n, std::size_t limit,
                                          Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit != 0 && n > limit) std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace

GradCheckReport grad_check(GradCheckTarget& target,
                           const GradCheckOptions& opts) {
  GradCheckReport report;
  report.target = target.name;
  Rng rng(opts.seed);

  for (auto& np : target.params) np.param->zero_grad();
  Tensor<double> y = target.forward();
  if (!y.all_finite())
    throw RuntimeError(target.name + ": non-finite forward output");
  std::uniform_real_distribution<double> wdist(-1.0, 1.0);
  std::vector<double> w(y.size());
  for (auto& v : w) v = wdist(rng);
  Tensor<double> gy(y.shape(), w);
  std::vector<Tensor<double>> input_grads = target.backward(gy);
  if (input_grads.size() != target.inputs.size())
    throw RuntimeError(target.name + ": backward returned " +
                       std::to_string(input_grads.size()) +
                       " input gradients for " +
                       std::to_string(target.inputs.size()) + " inputs");

  auto check_tensor = [&](const std::string& name, Tensor<double>& value,
                          const Tensor<double>& analytic) {
    if (!analytic.all_finite())
      throw RuntimeError(target.name + ": non-finite analytic gradient in " +
                         name);
    if (analytic.shape() != value.shape())
      throw ShapeError(target.name + ": gradient shape of " + name + " is " +
                       shape_str(analytic.shape()) + ", value is " +
                       shape_str(value.shape()));
    GradCheckEntry entry{name, 0, 0, 0.0};
    const std::size_t limit = opts.max_coords_per_tensor == 0
                                  ? value.size()
                                  : opts.max_coords_per_tensor;
    for (std::size_t i :
         candidate_coords(value.size(), opts.max_coords_per_tensor, rng)) {
      if (entry.checked >= limit) break;
      const double orig = value[i];
      double numeric = 0.0;
      bool valid = false;
      double step = opts.eps;
      for (int attempt = 0; attempt < 3 && !valid; ++attempt, step *= 0.1) {
        std::vector<std::uint8_t> signs_up, signs_down;
        value[i] = orig + step;
        if (opts.skip_kinks) relu_trace_begin();
        const double up = weighted_sum(target.forward(), w);
        if (opts.skip_kinks) signs_up = relu_trace_end();
        value[i] = orig - step;
        if (opts.skip_kinks) relu_trace_begin();
        const double down = weighted_sum(target.forward(), w);
        if (opts.skip_kinks) signs_down = relu_trace_end();
        value[i] = orig;
        numeric = (up - down) / (2.0 * step);
        valid = signs_up == signs_down;
      }
      if (!valid) {
        ++entry.skipped_kinks;
        continue;
      }
      const double a = analytic[i];
      if (!std::isfinite(numeric))
        throw RuntimeError(target.name + ": non-finite finite difference in " +
                           name + "[" + std::to_string(i) + "]");
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      entry.max_relative_error =
          std::max(entry.max_relative_error, std::abs(a - numeric) / denom);
      ++entry.checked;
    }
    if (entry.max_relative_error >= report.max_relative_error) {
      report.max_relative_error = entry.max_relative_error;
      report.worst_tensor = name;
    }
    report.entries.push_back(entry);
  };

  // Snapshot analytic parameter gradients before the finite-difference
  // forwards run.
  std::vector<Tensor<double>> param_grads;
  for (auto& np : target.params) param_grads.push_back(np.param->grad);
  for (std::size_t k = 0; k < target.params.size(); ++k)
    check_tensor(target.params[k].name, target.params[k].param->value,
                 param_grads[k]);
  for (std::size_t k = 0; k < target.inputs.size(); ++k)
    check_tensor(target.inputs[k].first, *target.inputs[k].second,
                 input_grads[k]);
  return report;
}

}  // namespace avsed
