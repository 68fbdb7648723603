// SPDX-License-Identifier: Apache-2.0
#include "avsed/gru.hpp"

#include "avsed/layers.hpp"

namespace avsed {

template <typename T>
GruDirection<T>::GruDirection(std::size_t input_size, std::size_t hidden)
    : w_ih({3 * hidden, input_size}),
      w_hh({3 * hidden, hidden}),
      b_ih({3 * hidden}),
      b_hh({3 * hidden}) {}

template <typename T>
BiGru<T>::BiGru(std::size_t input_size, std::size_t hidden,
                std::size_t num_layers) {
  if (input_size == 0 || hidden == 0 || num_layers == 0)
    throw ConfigError("bigru sizes must be positive");
  params.input_size = input_size;
  params.hidden = hidden;
  for (std::size_t l = 0; l < num_layers; ++l) {
    const std::size_t din = l == 0 ? input_size : 2 * hidden;
    params.layers.push_back(
        {GruDirection<T>(din, hidden), GruDirection<T>(din, hidden)});
  }
}

template <typename T>
void BiGru<T>::init(Rng& rng) {
  const std::size_t h = hidden();
  for (auto& layer : params.layers)
    for (auto& d : layer) {
      xavier_uniform(d.w_ih.value, d.w_ih.value.dim(1), 3 * h, rng);
      xavier_uniform(d.w_hh.value, h, 3 * h, rng);
      d.b_ih.value.zero();
      d.b_hh.value.zero();
    }
}

template <typename T>
std::vector<NamedParam<T>> BiGru<T>::named_params(const std::string& prefix) {
  std::vector<NamedParam<T>> out;
  for (std::size_t l = 0; l < params.layers.size(); ++l)
    for (std::size_t d = 0; d < 2; ++d) {
      auto& g = params.layers[l][d];
      const std::string p =
          prefix + ".l" + std::to_string(l) + (d == 0 ? ".fwd" : ".bwd");
      out.push_back({p + ".w_ih", &g.w_ih});
      out.push_back({p + ".w_hh", &g.w_hh});
      out.push_back({p + ".b_ih", &g.b_ih});
      out.push_back({p + ".b_hh", &g.b_hh});
    }
  return out;
}

template <typename T>
void BiGru<T>::run_direction(std::size_t layer, std::size_t dir,
                             const Tensor<T>& x, Tensor<T>& out,
                             DirCache& cache) const {
  const GruDirection<T>& g = params.layers[layer][dir];
  const std::size_t nb = x.dim(0), nt = x.dim(1), din = x.dim(2);
  const std::size_t h = hidden(), h3 = 3 * h;
  std::vector<T> xp(nb * nt * h3);
  for (std::size_t r = 0; r < nb * nt; ++r)
    std::copy(g.b_ih.value.ptr(), g.b_ih.value.ptr() + h3, xp.data() + r * h3);
  gemm<T>(false, true, nb * nt, h3, din, T{1}, x.ptr(), g.w_ih.value.ptr(),
          T{1}, xp.data());

  cache.r.assign(nb * nt * h, T{0});
  cache.z.assign(nb * nt * h, T{0});
  cache.n.assign(nb * nt * h, T{0});
  cache.hn.assign(nb * nt * h, T{0});
  cache.h_prev.assign(nb * nt * h, T{0});

  std::vector<T> hstate(h), hp(h3);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t len = lengths_[b];
    std::fill(hstate.begin(), hstate.end(), T{0});
    for (std::size_t s = 0; s < len; ++s) {
      const std::size_t t = dir == 0 ? s : len - 1 - s;
      const std::size_t bt = b * nt + t;
      std::copy(g.b_hh.value.ptr(), g.b_hh.value.ptr() + h3, hp.begin());
      gemm<T>(false, true, 1, h3, h, T{1}, hstate.data(), g.w_hh.value.ptr(),
              T{1}, hp.data());
      const T* xr = xp.data() + bt * h3;
      T* r = cache.r.data() + bt * h;
      T* z = cache.z.data() + bt * h;
      T* n = cache.n.data() + bt * h;
      T* hn = cache.hn.data() + bt * h;
      T* hprev = cache.h_prev.data() + bt * h;
      T* y = out.ptr() + bt * 2 * h + dir * h;
      for (std::size_t k = 0; k < h; ++k) {
        r[k] = sigmoid_scalar(xr[k] + hp[k]);
        z[k] = sigmoid_scalar(xr[h + k] + hp[h + k]);
        hn[k] = hp[2 * h + k];
        n[k] = std::tanh(xr[2 * h + k] + r[k] * hn[k]);
        hprev[k] = hstate[k];
        hstate[k] = (T{1} - z[k]) * n[k] + z[k] * hstate[k];
        y[k] = hstate[k];
      }
    }
  }
}

template <typename T>
Tensor<T> BiGru<T>::forward(const Tensor<T>& input,
                            const std::vector<std::size_t>& lengths) {
  if (input.ndim() != 3 || input.dim(2) != input_size())
    throw ShapeError("bigru expects [B,T," + std::to_string(input_size()) +
                     "], got " + shape_str(input.shape()));
  const std::size_t nb = input.dim(0), nt = input.dim(1);
  if (lengths.empty()) {
    lengths_.assign(nb, nt);
  } else {
    if (lengths.size() != nb)
      throw ShapeError("bigru: " + std::to_string(lengths.size()) +
                       " lengths for batch of " + std::to_string(nb));
    for (std::size_t len : lengths)
      if (len == 0 || len > nt)
        throw ShapeError("bigru: sequence length " + std::to_string(len) +
                         " outside [1," + std::to_string(nt) + "]");
    lengths_ = lengths;
  }
  caches_.assign(num_layers(), LayerCache{});
  Tensor<T> x = input;
  for (std::size_t l = 0; l < num_layers(); ++l) {
    Tensor<T> out({nb, nt, 2 * hidden()});
    for (std::size_t d = 0; d < 2; ++d)
      run_direction(l, d, x, out, caches_[l].dirs[d]);
    caches_[l].input = std::move(x);
    x = std::move(out);
  }
  return x;
}

template <typename T>
void BiGru<T>::backprop_direction(std::size_t layer, std::size_t dir,
                                  const Tensor<T>& grad_out,
                                  const DirCache& cache, const Tensor<T>& x,
                                  Tensor<T>& grad_in) {
  GruDirection<T>& g = params.layers[layer][dir];
  const std::size_t nb = x.dim(0), nt = x.dim(1), din = x.dim(2);
  const std::size_t h = hidden(), h3 = 3 * h;
  std::vector<T> dxp(nb * nt * h3, T{0});
  std::vector<T> dh(h), dh_next(h), dhp(h3);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t len = lengths_[b];
    std::fill(dh_next.begin(), dh_next.end(), T{0});
    for (std::size_t s = len; s-- > 0;) {
      const std::size_t t = dir == 0 ? s : len - 1 - s;
      const std::size_t bt = b * nt + t;
      const T* gy = grad_out.ptr() + bt * 2 * h + dir * h;
      const T* r = cache.r.data() + bt * h;
      const T* z = cache.z.data() + bt * h;
      const T* n = cache.n.data() + bt * h;
      const T* hn = cache.hn.data() + bt * h;
      const T* hprev = cache.h_prev.data() + bt * h;
      T* dx = dxp.data() + bt * h3;
      for (std::size_t k = 0; k < h; ++k) {
        const T d = gy[k] + dh_next[k];
        const T dn_pre = d * (T{1} - z[k]) * (T{1} - n[k] * n[k]);
        const T dz_pre = d * (hprev[k] - n[k]) * z[k] * (T{1} - z[k]);
        const T dr_pre = dn_pre * hn[k] * r[k] * (T{1} - r[k]);
        dx[k] = dr_pre;
        dx[h + k] = dz_pre;
        dx[2 * h + k] = dn_pre;
        dhp[k] = dr_pre;
        dhp[h + k] = dz_pre;
        dhp[2 * h + k] = dn_pre * r[k];
        dh[k] = d * z[k];
      }
      gemm<T>(false, false, h3, h, 1, T{1}, dhp.data(), hprev, T{1},
              g.w_hh.grad.ptr());
      for (std::size_t i = 0; i < h3; ++i) g.b_hh.grad[i] += dhp[i];
      gemm<T>(false, false, 1, h, h3, T{1}, dhp.data(), g.w_hh.value.ptr(),
              T{1}, dh.data());
      dh_next.swap(dh);
    }
  }
  gemm<T>(true, false, h3, din, nb * nt, T{1}, dxp.data(), x.ptr(), T{1},
          g.w_ih.grad.ptr());
  for (std::size_t row = 0; row < nb * nt; ++row)
    for (std::size_t i = 0; i < h3; ++i) g.b_ih.grad[i] += dxp[row * h3 + i];
  gemm<T>(false, false, nb * nt, din, h3, T{1}, dxp.data(), g.w_ih.value.ptr(),
          T{1}, grad_in.ptr());
}

template <typename T>
Tensor<T> BiGru<T>::backward(const Tensor<T>& grad_out) {
  if (caches_.empty()) throw RuntimeError("bigru: backward before forward");
  const Tensor<T>& first = caches_.front().input;
  const Shape expected{first.dim(0), first.dim(1), 2 * hidden()};
  if (grad_out.shape() != expected)
    throw ShapeError("bigru backward: grad_out " + shape_str(grad_out.shape()) +
                     " != " + shape_str(expected));
  Tensor<T> g = grad_out;
  for (std::size_t l = num_layers(); l-- > 0;) {
    const Tensor<T>& x = caches_[l].input;
    Tensor<T> grad_in(x.shape());
    for (std::size_t d = 0; d < 2; ++d)
      backprop_direction(l, d, g, caches_[l].dirs[d], x, grad_in);
    g = std::move(grad_in);
  }
  return g;
}

template struct GruDirection<float>;
template struct GruDirection<double>;
template class BiGru<float>;
template class BiGru<double>;

}  // namespace avsed
