// SPDX-License-Identifier: Apache-2.0
#include "avsed/layers.hpp"

namespace avsed {
namespace {

void check_linear_shapes(const Shape& in, const Shape& w, const Shape& b) {
  if (w.size() != 2)
    throw ShapeError("linear weight must be [Dout,Din], got " + shape_str(w));
  if (in.empty() || in.back() != w[1])
    throw ShapeError("linear: input trailing dim of " + shape_str(in) +
                     " != Din " + std::to_string(w[1]));
  if (b.size() != 1 || b[0] != w[0])
    throw ShapeError("linear bias must be [" + std::to_string(w[0]) +
                     "], got " + shape_str(b));
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  check_linear_shapes(input.shape(), weight.shape(), bias.shape());
  const std::size_t din = weight.dim(1), dout = weight.dim(0);
  const std::size_t rows = input.size() / din;
  Shape out_shape = input.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(bias.ptr(), bias.ptr() + dout, out.ptr() + r * dout);
  gemm<T>(false, true, rows, dout, din, T{1}, input.ptr(), weight.ptr(), T{1},
          out.ptr());
  return out;
}

template <typename T>
Linear<T>::Linear(std::size_t in_features, std::size_t out_features)
    : weight({out_features, in_features}), bias({out_features}) {}

template <typename T>
void Linear<T>::init(Rng& rng) {
  xavier_uniform(weight.value, in_features(), out_features(), rng);
  bias.value.zero();
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& input) {
  Tensor<T> out = linear(input, weight.value, bias.value);
  input_ = input;
  return out;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& grad_out) {
  if (!input_) throw RuntimeError("linear: backward before forward");
  const Tensor<T>& x = *input_;
  const std::size_t din = in_features(), dout = out_features();
  const std::size_t rows = x.size() / din;
  if (grad_out.size() != rows * dout || grad_out.shape().back() != dout)
    throw ShapeError("linear backward: grad_out " +
                     shape_str(grad_out.shape()) + " mismatches input " +
                     shape_str(x.shape()));
  gemm<T>(true, false, dout, din, rows, T{1}, grad_out.ptr(), x.ptr(), T{1},
          weight.grad.ptr());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o)
      bias.grad[o] += grad_out[r * dout + o];
  Tensor<T> grad_in(x.shape());
  gemm<T>(false, false, rows, din, dout, T{1}, grad_out.ptr(),
          weight.value.ptr(), T{0}, grad_in.ptr());
  return grad_in;
}

template Tensor<float> linear(const Tensor<float>&, const Tensor<float>&,
                              const Tensor<float>&);
template Tensor<double> linear(const Tensor<double>&, const Tensor<double>&,
                               const Tensor<double>&);
template class Linear<float>;
template class Linear<double>;

}  // namespace avsed
