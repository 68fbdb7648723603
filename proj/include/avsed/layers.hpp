// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include <optional>
#include <string>
#include <vector>

#include "avsed/tensor.hpp"

namespace avsed {

enum class Mode { kTrain, kEval };

// ---------------------------------------------------------------------------
// Convolution: 3x3 kernel, stride 1, zero padding 1 on both spatial axes.
// Layout is [B, C, T, F] for activations and [Cout, Cin, 3, 3] for weights.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias);

template <typename T>
class Conv2d {
 public:
  static constexpr std::size_t kKernel = 3;

  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels);

  void init(Rng& rng);

  Tensor<T> forward(const Tensor<T>& input);
  /// Accumulates into weight.grad / bias.grad and returns d(loss)/d(input).
  Tensor<T> backward(const Tensor<T>& grad_out);

  std::size_t in_channels() const { return weight.value.dim(1); }
  std::size_t out_channels() const { return weight.value.dim(0); }

  Param<T> weight;
  Param<T> bias;

 private:
  std::optional<Tensor<T>> input_;
};

// ---------------------------------------------------------------------------
// Batch normalization over (B, T, F) per channel.
// ---------------------------------------------------------------------------

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(std::size_t channels, BatchNormOptions opts = {});

  /// In train mode the output uses batch statistics; running statistics are
  /// only updated when `update_running` is set. Eval mode before any update
  /// uses the initial running statistics (mean 0, var 1).
  Tensor<T> forward(const Tensor<T>& input, Mode mode,
                    bool update_running = true);
  Tensor<T> backward(const Tensor<T>& grad_out);

  std::size_t channels() const { return gamma.value.size(); }
  const BatchNormOptions& options() const { return opts_; }

  Param<T> gamma;
  Param<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

 private:
  BatchNormOptions opts_;
  Mode mode_ = Mode::kEval;
  bool has_cache_ = false;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

// ---------------------------------------------------------------------------
// Average pooling with kernel == stride. Extents must divide exactly.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& input, std::size_t kt, std::size_t kf);

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& grad_out, const Shape& input_shape,
                             std::size_t kt, std::size_t kf);

// ---------------------------------------------------------------------------
// Elementwise activations.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input);
/// While a trace is open on the calling thread, relu() appends the sign of
/// every input element. Finite-difference checks use this to detect
/// perturbations that cross a kink.
void relu_trace_begin();
std::vector<std::uint8_t> relu_trace_end();

/// `output` is the forward result; relu'(0) is taken as 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& output);

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& output);

// ---------------------------------------------------------------------------
// Inverted dropout. Survivors are scaled by 1 / (1 - rate).
// ---------------------------------------------------------------------------

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  Tensor<T> mask;  // per-element multiplier: 0 or 1 / (1 - rate); empty in eval
};

void check_dropout_rate(double rate);

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double rate, Rng& rng,
                         Mode mode);

template <typename T>
class Dropout {
 public:
  Dropout() = default;
  explicit Dropout(double rate);

  Tensor<T> forward(const Tensor<T>& input, Mode mode, Rng* rng);
  Tensor<T> backward(const Tensor<T>& grad_out) const;

  /// Reuse the last mask on subsequent train-mode forwards (gradient checks).
  void set_frozen(bool frozen) { frozen_ = frozen; }
  double rate() const { return rate_; }

 private:
  double rate_ = 0.0;
  bool frozen_ = false;
  bool applied_ = false;
  Tensor<T> mask_;
};

// ---------------------------------------------------------------------------
// Affine map on the trailing dimension: y = x W^T + b, W is [Dout, Din].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias);

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features);

  void init(Rng& rng);

  Tensor<T> forward(const Tensor<T>& input);
  Tensor<T> backward(const Tensor<T>& grad_out);

  std::size_t in_features() const { return weight.value.dim(1); }
  std::size_t out_features() const { return weight.value.dim(0); }

  Param<T> weight;
  Param<T> bias;

 private:
  std::optional<Tensor<T>> input_;
};

}  // namespace avsed
