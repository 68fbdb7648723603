// SPDX-License-Identifier: Apache-2.0
#include "avsed/tensor.hpp"

#include <Eigen/Core>

namespace avsed {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, T alpha, const T* a, const T* b, T beta, T* c) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto em = static_cast<Eigen::Index>(m);
  const auto en = static_cast<Eigen::Index>(n);
  const auto ek = static_cast<Eigen::Index>(k);
  Eigen::Map<Mat> cm(c, em, en);
  if (beta == T{0})
    cm.setZero();
  else if (beta != T{1})
    cm *= beta;
  if (m == 0 || n == 0 || k == 0) return;
  CMap am(a, trans_a ? ek : em, trans_a ? em : ek);
  CMap bm(b, trans_b ? en : ek, trans_b ? ek : en);
  if (!trans_a && !trans_b)
    cm.noalias() += alpha * am * bm;
  else if (trans_a && !trans_b)
    cm.noalias() += alpha * am.transpose() * bm;
  else if (!trans_a && trans_b)
    cm.noalias() += alpha * am * bm.transpose();
  else
    cm.noalias() += alpha * am.transpose() * bm.transpose();
}

template <typename T>
void xavier_uniform(Tensor<T>& t, std::size_t fan_in, std::size_t fan_out,
                    Rng& rng) {
  const double limit =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

template void gemm<float>(bool, bool, std::size_t, std::size_t, std::size_t,
                          float, const float*, const float*, float, float*);
template void gemm<double>(bool, bool, std::size_t, std::size_t, std::size_t,
                           double, const double*, const double*, double,
                           double*);
template void xavier_uniform<float>(Tensor<float>&, std::size_t, std::size_t,
                                    Rng&);
template void xavier_uniform<double>(Tensor<double>&, std::size_t, std::size_t,
                                     Rng&);

}  // namespace avsed
