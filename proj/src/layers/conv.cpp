// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "avsed/layers.hpp"

namespace avsed {
namespace {

constexpr std::size_t kK = 3;

void check_conv_shapes(const Shape& in, const Shape& w, const Shape& b) {
  if (in.size() != 4)
    throw ShapeError("conv2d expects input [B,Cin,T,F], got " + shape_str(in));
  if (w.size() != 4 || w[2] != kK || w[3] != kK)
    throw ShapeError("conv2d expects weights [Cout,Cin,3,3], got " +
                     shape_str(w));
  if (in[1] != w[1])
    throw ShapeError("conv2d input channels " + std::to_string(in[1]) +
                     " do not match weight Cin " + std::to_string(w[1]) +
                     " (input " + shape_str(in) + ", weights " + shape_str(w) +
                     ")");
  if (b.size() != 1 || b[0] != w[0])
    throw ShapeError("conv2d bias must be [" + std::to_string(w[0]) +
                     "], got " + shape_str(b));
}

// col is [Cin*9, T*F]; row (c*9 + ky*3 + kx) holds x[c, t+ky-1, f+kx-1].
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t nt, std::size_t nf, T* col) {
  const std::size_t plane = nt * nf;
  for (std::size_t c = 0; c < cin; ++c) {
    const T* xc = x + c * plane;
    for (std::size_t ky = 0; ky < kK; ++ky) {
      for (std::size_t kx = 0; kx < kK; ++kx) {
        T* row = col + ((c * kK + ky) * kK + kx) * plane;
        for (std::size_t t = 0; t < nt; ++t) {
          T* dst = row + t * nf;
          const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t + ky) - 1;
          if (st < 0 || st >= static_cast<std::ptrdiff_t>(nt)) {
            std::fill(dst, dst + nf, T{0});
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(st) * nf;
          if (kx == 0) {
            dst[0] = T{0};
            std::copy(src, src + nf - 1, dst + 1);
          } else if (kx == 1) {
            std::copy(src, src + nf, dst);
          } else {
            std::copy(src + 1, src + nf, dst);
            dst[nf - 1] = T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t cin, std::size_t nt, std::size_t nf,
                T* gx) {
  const std::size_t plane = nt * nf;
  for (std::size_t c = 0; c < cin; ++c) {
    T* gc = gx + c * plane;
    for (std::size_t ky = 0; ky < kK; ++ky) {
      for (std::size_t kx = 0; kx < kK; ++kx) {
        const T* row = col + ((c * kK + ky) * kK + kx) * plane;
        for (std::size_t t = 0; t < nt; ++t) {
          const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t + ky) - 1;
          if (st < 0 || st >= static_cast<std::ptrdiff_t>(nt)) continue;
          const T* src = row + t * nf;
          T* dst = gc + static_cast<std::size_t>(st) * nf;
          if (kx == 0) {
            for (std::size_t f = 1; f < nf; ++f) dst[f - 1] += src[f];
          } else if (kx == 1) {
            for (std::size_t f = 0; f < nf; ++f) dst[f] += src[f];
          } else {
            for (std::size_t f = 0; f + 1 < nf; ++f) dst[f + 1] += src[f];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  check_conv_shapes(input.shape(), weight.shape(), bias.shape());
  const std::size_t nb = input.dim(0), cin = input.dim(1), nt = input.dim(2),
                    nf = input.dim(3), cout = weight.dim(0);
  const std::size_t plane = nt * nf, kdim = cin * kK * kK;
  Tensor<T> out({nb, cout, nt, nf});
  std::vector<T> col(kdim * plane);
  for (std::size_t b = 0; b < nb; ++b) {
    im2col(input.ptr() + b * cin * plane, cin, nt, nf, col.data());
    T* ob = out.ptr() + b * cout * plane;
    for (std::size_t o = 0; o < cout; ++o)
      std::fill(ob + o * plane, ob + (o + 1) * plane, bias[o]);
    gemm<T>(false, false, cout, plane, kdim, T{1}, weight.ptr(), col.data(),
            T{1}, ob);
  }
  return out;
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels)
    : weight({out_channels, in_channels, kK, kK}), bias({out_channels}) {}

template <typename T>
void Conv2d<T>::init(Rng& rng) {
  xavier_uniform(weight.value, in_channels() * kK * kK,
                 out_channels() * kK * kK, rng);
  bias.value.zero();
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& input) {
  Tensor<T> out = conv2d(input, weight.value, bias.value);
  input_ = input;
  return out;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
  if (!input_) throw RuntimeError("conv2d: backward before forward");
  const Tensor<T>& x = *input_;
  const std::size_t nb = x.dim(0), cin = x.dim(1), nt = x.dim(2),
                    nf = x.dim(3), cout = out_channels();
  const Shape expected{nb, cout, nt, nf};
  if (grad_out.shape() != expected)
    throw ShapeError("conv2d backward: grad_out " +
                     shape_str(grad_out.shape()) + " != forward output " +
                     shape_str(expected));
  const std::size_t plane = nt * nf, kdim = cin * kK * kK;
  Tensor<T> grad_in(x.shape());
  std::vector<T> col(kdim * plane), gcol(kdim * plane);
  for (std::size_t b = 0; b < nb; ++b) {
    const T* gb = grad_out.ptr() + b * cout * plane;
    im2col(x.ptr() + b * cin * plane, cin, nt, nf, col.data());
    gemm<T>(false, true, cout, kdim, plane, T{1}, gb, col.data(), T{1},
            weight.grad.ptr());
    for (std::size_t o = 0; o < cout; ++o) {
      T s{0};
      for (std::size_t i = 0; i < plane; ++i) s += gb[o * plane + i];
      bias.grad[o] += s;
    }
    gemm<T>(true, false, kdim, plane, cout, T{1}, weight.value.ptr(), gb, T{0},
            gcol.data());
    col2im_add(gcol.data(), cin, nt, nf, grad_in.ptr() + b * cin * plane);
  }
  return grad_in;
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&,
                              const Tensor<float>&);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&,
                               const Tensor<double>&);
template class Conv2d<float>;
template class Conv2d<double>;

}  // namespace avsed
