// SPDX-License-Identifier: Apache-2.0
#include "avsed/layers.hpp"

namespace avsed {

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels, BatchNormOptions opts)
    : gamma({channels}),
      beta({channels}),
      running_mean({channels}, T{0}),
      running_var({channels}, T{1}),
      opts_(opts) {
  if (!(opts.momentum > 0.0 && opts.momentum <= 1.0))
    throw ConfigError("batch-norm momentum must lie in (0,1]");
  if (!(opts.epsilon > 0.0))
    throw ConfigError("batch-norm epsilon must be positive");
  gamma.value.fill(T{1});
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& input, Mode mode,
                                  bool update_running) {
  if (input.ndim() != 4 || input.dim(1) != channels())
    throw ShapeError("batchnorm2d expects [B," + std::to_string(channels()) +
                     ",T,F], got " + shape_str(input.shape()));
  const std::size_t nb = input.dim(0), nc = input.dim(1),
                    plane = input.dim(2) * input.dim(3);
  const std::size_t count = nb * plane;
  Tensor<T> out(input.shape());
  xhat_ = Tensor<T>(input.shape());
  inv_std_.assign(nc, T{0});
  for (std::size_t c = 0; c < nc; ++c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const T* x = input.ptr() + (b * nc + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += x[i];
      }
      mean = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const T* x = input.ptr() + (b * nc + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = x[i] - mean;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(count);
      if (update_running) {
        const double m = opts_.momentum;
        const double unbiased =
            count > 1 ? ss / static_cast<double>(count - 1) : var;
        running_mean[c] =
            static_cast<T>((1.0 - m) * running_mean[c] + m * mean);
        running_var[c] =
            static_cast<T>((1.0 - m) * running_var[c] + m * unbiased);
      }
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + opts_.epsilon));
    const T mu = static_cast<T>(mean);
    inv_std_[c] = inv;
    const T g = gamma.value[c], bt = beta.value[c];
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t off = (b * nc + c) * plane;
      const T* x = input.ptr() + off;
      T* xh = xhat_.ptr() + off;
      T* y = out.ptr() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (x[i] - mu) * inv;
        y[i] = g * xh[i] + bt;
      }
    }
  }
  mode_ = mode;
  has_cache_ = true;
  return out;
}

template <typename T>
Tensor<T> BatchNorm2d<T>::backward(const Tensor<T>& grad_out) {
  if (!has_cache_) throw RuntimeError("batchnorm2d: backward before forward");
  if (grad_out.shape() != xhat_.shape())
    throw ShapeError("batchnorm2d backward: grad_out " +
                     shape_str(grad_out.shape()) + " != forward output " +
                     shape_str(xhat_.shape()));
  const std::size_t nb = xhat_.dim(0), nc = xhat_.dim(1),
                    plane = xhat_.dim(2) * xhat_.dim(3);
  const double count = static_cast<double>(nb * plane);
  Tensor<T> grad_in(xhat_.shape());
  for (std::size_t c = 0; c < nc; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t off = (b * nc + c) * plane;
      const T* g = grad_out.ptr() + off;
      const T* xh = xhat_.ptr() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gx += static_cast<double>(g[i]) * xh[i];
      }
    }
    gamma.grad[c] += static_cast<T>(sum_gx);
    beta.grad[c] += static_cast<T>(sum_g);
    const T scale = gamma.value[c] * inv_std_[c];
    const T mean_g = static_cast<T>(sum_g / count);
    const T mean_gx = static_cast<T>(sum_gx / count);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t off = (b * nc + c) * plane;
      const T* g = grad_out.ptr() + off;
      const T* xh = xhat_.ptr() + off;
      T* gi = grad_in.ptr() + off;
      if (mode_ == Mode::kTrain) {
        for (std::size_t i = 0; i < plane; ++i)
          gi[i] = scale * (g[i] - mean_g - xh[i] * mean_gx);
      } else {
        for (std::size_t i = 0; i < plane; ++i) gi[i] = scale * g[i];
      }
    }
  }
  return grad_in;
}

template class BatchNorm2d<float>;
template class BatchNorm2d<double>;

}  // namespace avsed
