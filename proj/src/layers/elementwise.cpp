// SPDX-License-Identifier: Apache-2.0
#include "avsed/layers.hpp"

namespace avsed {

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& input, std::size_t kt, std::size_t kf) {
  if (input.ndim() != 4)
    throw ShapeError("avgpool2d expects [B,C,T,F], got " +
                     shape_str(input.shape()));
  if (kt == 0 || kf == 0) throw ConfigError("avgpool2d kernel must be positive");
  const std::size_t nb = input.dim(0), nc = input.dim(1), nt = input.dim(2),
                    nf = input.dim(3);
  if (nt % kt != 0 || nf % kf != 0)
    throw ShapeError("avgpool2d: extents " + shape_str(input.shape()) +
                     " not divisible by kernel (" + std::to_string(kt) + "," +
                     std::to_string(kf) + ")");
  const std::size_t ot = nt / kt, of = nf / kf;
  Tensor<T> out({nb, nc, ot, of});
  const T scale = T{1} / static_cast<T>(kt * kf);
  for (std::size_t p = 0; p < nb * nc; ++p) {
    const T* x = input.ptr() + p * nt * nf;
    T* y = out.ptr() + p * ot * of;
    for (std::size_t t = 0; t < ot; ++t)
      for (std::size_t f = 0; f < of; ++f) {
        T s{0};
        for (std::size_t i = 0; i < kt; ++i)
          for (std::size_t j = 0; j < kf; ++j)
            s += x[(t * kt + i) * nf + f * kf + j];
        y[t * of + f] = s * scale;
      }
  }
  return out;
}

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& grad_out, const Shape& input_shape,
                             std::size_t kt, std::size_t kf) {
  const std::size_t nb = input_shape.at(0), nc = input_shape.at(1),
                    nt = input_shape.at(2), nf = input_shape.at(3);
  const std::size_t ot = nt / kt, of = nf / kf;
  const Shape expected{nb, nc, ot, of};
  if (grad_out.shape() != expected)
    throw ShapeError("avgpool2d backward: grad_out " +
                     shape_str(grad_out.shape()) + " != " +
                     shape_str(expected));
  Tensor<T> grad_in(input_shape);
  const T scale = T{1} / static_cast<T>(kt * kf);
  for (std::size_t p = 0; p < nb * nc; ++p) {
    const T* g = grad_out.ptr() + p * ot * of;
    T* gi = grad_in.ptr() + p * nt * nf;
    for (std::size_t t = 0; t < nt; ++t)
      for (std::size_t f = 0; f < nf; ++f)
        gi[t * nf + f] = g[(t / kt) * of + f / kf] * scale;
  }
  return grad_in;
}

namespace {
thread_local std::vector<std::uint8_t>* relu_trace = nullptr;
thread_local std::vector<std::uint8_t> relu_trace_storage;
}  // namespace

void relu_trace_begin() {
  relu_trace_storage.clear();
  relu_trace = &relu_trace_storage;
}

std::vector<std::uint8_t> relu_trace_end() {
  relu_trace = nullptr;
  return std::move(relu_trace_storage);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  if (relu_trace != nullptr)
    for (const T v : input.data()) relu_trace->push_back(v > T{0});
  Tensor<T> out = input;
  // NaN passes through so that non-finite inputs stay visible downstream.
  for (auto& v : out.data()) v = (v > T{0} || std::isnan(v)) ? v : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
  if (grad_out.shape() != output.shape())
    throw ShapeError("relu backward shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(output[i] > T{0})) g[i] = T{0};
  return g;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (auto& v : out.data()) v = sigmoid_scalar(v);
  return out;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& grad_out, const Tensor<T>& output) {
  if (grad_out.shape() != output.shape())
    throw ShapeError("sigmoid backward shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] *= output[i] * (T{1} - output[i]);
  return g;
}

void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ConfigError("dropout rate must lie in [0,1), got " +
                      std::to_string(rate));
}

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double rate, Rng& rng,
                         Mode mode) {
  check_dropout_rate(rate);
  if (mode == Mode::kEval) return {input, Tensor<T>()};
  Tensor<T> mask(input.shape());
  Tensor<T> out = input;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // One draw from `rng` seeds a splitmix64 counter stream; each 64-bit
  // output yields two 32-bit uniforms compared against P(keep).
  const auto threshold =
      static_cast<std::uint64_t>(std::llround((1.0 - rate) * 4294967296.0));
  const std::uint64_t seed = rng();
  const std::size_t n = out.size();
  T* m = mask.ptr();
  T* o = out.ptr();
  for (std::size_t i = 0; i < n; i += 2) {
    std::uint64_t z = seed + (i / 2 + 1) * 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
    m[i] = (z & 0xffffffffu) < threshold ? keep_scale : T{0};
    o[i] *= m[i];
    if (i + 1 < n) {
      m[i + 1] = (z >> 32) < threshold ? keep_scale : T{0};
      o[i + 1] *= m[i + 1];
    }
  }
  return {std::move(out), std::move(mask)};
}

template <typename T>
Dropout<T>::Dropout(double rate) : rate_(rate) {
  check_dropout_rate(rate);
}

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& input, Mode mode, Rng* rng) {
  applied_ = false;
  if (mode == Mode::kEval || rate_ == 0.0) {
    if (!frozen_) mask_ = Tensor<T>();
    return input;
  }
  applied_ = true;
  if (frozen_ && mask_.shape() == input.shape()) {
    Tensor<T> out = input;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask_[i];
    return out;
  }
  if (!rng) throw RuntimeError("dropout: train mode requires an rng");
  auto r = dropout(input, rate_, *rng, mode);
  mask_ = std::move(r.mask);
  return std::move(r.output);
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out) const {
  if (!applied_) return grad_out;
  if (grad_out.shape() != mask_.shape())
    throw ShapeError("dropout backward shape mismatch");
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask_[i];
  return g;
}

#define AVSED_INSTANTIATE(T)                                                 \
  template Tensor<T> avgpool2d(const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> avgpool2d_backward(const Tensor<T>&, const Shape&,     \
                                        std::size_t, std::size_t);          \
  template Tensor<T> relu(const Tensor<T>&);                                \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> sigmoid(const Tensor<T>&);                             \
  template Tensor<T> sigmoid_backward(const Tensor<T>&, const Tensor<T>&);  \
  template DropoutResult<T> dropout(const Tensor<T>&, double, Rng&, Mode);  \
  template class Dropout<T>;

AVSED_INSTANTIATE(float)
AVSED_INSTANTIATE(double)
#undef AVSED_INSTANTIATE

}  // namespace avsed
