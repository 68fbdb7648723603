// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "avsed/tensor.hpp"

namespace avsed {

/// Weights of one GRU direction. Gate blocks are stacked as (reset, update,
/// candidate) along the first axis of every matrix and bias:
///
///   r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
///   z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
///   n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
///   h' = (1 - z) * n + z * h
template <typename T>
struct GruDirection {
  Param<T> w_ih;  // [3H, Din]
  Param<T> w_hh;  // [3H, H]
  Param<T> b_ih;  // [3H]
  Param<T> b_hh;  // [3H]

  GruDirection() = default;
  GruDirection(std::size_t input_size, std::size_t hidden);
};

template <typename T>
struct GruParams {
  std::size_t input_size = 0;
  std::size_t hidden = 0;
  // layers[l][0] is the forward direction, layers[l][1] the backward one.
  std::vector<std::array<GruDirection<T>, 2>> layers;
};

/// Multi-layer bidirectional GRU over [B, T, D] producing [B, T, 2H]. Each
/// sequence b only runs over its first lengths[b] steps; outputs past the
/// valid length are zero and receive no gradient.
template <typename T>
class BiGru {
 public:
  BiGru() = default;
  BiGru(std::size_t input_size, std::size_t hidden, std::size_t num_layers = 2);

  void init(Rng& rng);

  Tensor<T> forward(const Tensor<T>& input,
                    const std::vector<std::size_t>& lengths = {});
  Tensor<T> backward(const Tensor<T>& grad_out);

  std::size_t hidden() const { return params.hidden; }
  std::size_t input_size() const { return params.input_size; }
  std::size_t num_layers() const { return params.layers.size(); }

  std::vector<NamedParam<T>> named_params(const std::string& prefix);

  GruParams<T> params;

 private:
  struct DirCache {
    // All [B, T, *] laid out row-major, indexed by absolute time step.
    std::vector<T> r, z, n, hn;  // hn = W_hn h_prev + b_hn
    std::vector<T> h_prev;
  };
  struct LayerCache {
    Tensor<T> input;
    std::array<DirCache, 2> dirs;
  };

  void run_direction(std::size_t layer, std::size_t dir, const Tensor<T>& x,
                     Tensor<T>& out, DirCache& cache) const;
  void backprop_direction(std::size_t layer, std::size_t dir,
                          const Tensor<T>& grad_out, const DirCache& cache,
                          const Tensor<T>& x, Tensor<T>& grad_in);

  std::vector<std::size_t> lengths_;
  std::vector<LayerCache> caches_;
};

}  // namespace avsed
