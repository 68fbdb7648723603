// SPDX-License-Identifier: Apache-2.0
#include "avsed/crnn.hpp"

#include "avsed/kv.hpp"

namespace avsed {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kSpectral: return "spectral";
    case Modality::kPreAudio: return "pre_audio";
    case Modality::kPreVisual: return "pre_visual";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// CrnnConfig
// ---------------------------------------------------------------------------

void CrnnConfig::validate() const {
  if (!use_spectral && !use_pre_audio && !use_pre_visual)
    throw ConfigError("at least one input modality must be enabled");
  if (n_classes == 0) throw ConfigError("n_classes must be positive");
  if (use_pre_audio && pre_audio_dim == 0)
    throw ConfigError("pre_audio_dim must be positive");
  if (use_pre_visual && pre_visual_dim == 0)
    throw ConfigError("pre_visual_dim must be positive");
  if (gru_hidden == 0 || gru_layers == 0)
    throw ConfigError("gru_hidden and gru_layers must be positive");
  check_dropout_rate(dropout_rate);
  if (!(batch_norm.momentum > 0.0 && batch_norm.momentum <= 1.0))
    throw ConfigError("bn_momentum must lie in (0,1]");
  if (!(batch_norm.epsilon > 0.0)) throw ConfigError("bn_epsilon must be > 0");
}

std::size_t CrnnConfig::audio_embedding() const {
  if (emb_audio) return emb_audio;
  return use_spectral ? 16 : 64;
}

std::size_t CrnnConfig::visual_embedding() const {
  if (emb_visual) return emb_visual;
  return use_spectral ? 4 : 16;
}

std::size_t CrnnConfig::fused_dim() const {
  std::size_t d = 0;
  if (use_spectral) d += kCnnEmbedding;
  if (use_pre_audio) d += audio_embedding();
  if (use_pre_visual) d += visual_embedding();
  return d;
}

std::vector<std::pair<std::string, std::string>> CrnnConfig::to_kv() const {
  auto b = [](bool v) { return std::string(v ? "1" : "0"); };
  return {
      {"use_spectral", b(use_spectral)},
      {"use_pre_audio", b(use_pre_audio)},
      {"use_pre_visual", b(use_pre_visual)},
      {"n_classes", std::to_string(n_classes)},
      {"pre_audio_dim", std::to_string(pre_audio_dim)},
      {"pre_visual_dim", std::to_string(pre_visual_dim)},
      {"emb_audio", std::to_string(emb_audio)},
      {"emb_visual", std::to_string(emb_visual)},
      {"dropout_rate", format_double(dropout_rate)},
      {"gru_hidden", std::to_string(gru_hidden)},
      {"gru_layers", std::to_string(gru_layers)},
      {"bn_momentum", format_double(batch_norm.momentum)},
      {"bn_epsilon", format_double(batch_norm.epsilon)},
  };
}

CrnnConfig CrnnConfig::from_kv(const std::map<std::string, std::string>& kv) {
  CrnnConfig c;
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto sz = [&](const char* key, std::size_t& dst) {
    if (auto* v = get(key)) dst = static_cast<std::size_t>(parse_u64(*v, key));
  };
  auto fl = [&](const char* key, bool& dst) {
    if (auto* v = get(key)) dst = parse_bool(*v, key);
  };
  auto dbl = [&](const char* key, double& dst) {
    if (auto* v = get(key)) dst = parse_double(*v, key);
  };
  fl("use_spectral", c.use_spectral);
  fl("use_pre_audio", c.use_pre_audio);
  fl("use_pre_visual", c.use_pre_visual);
  sz("n_classes", c.n_classes);
  sz("pre_audio_dim", c.pre_audio_dim);
  sz("pre_visual_dim", c.pre_visual_dim);
  sz("emb_audio", c.emb_audio);
  sz("emb_visual", c.emb_visual);
  dbl("dropout_rate", c.dropout_rate);
  sz("gru_hidden", c.gru_hidden);
  sz("gru_layers", c.gru_layers);
  dbl("bn_momentum", c.batch_norm.momentum);
  dbl("bn_epsilon", c.batch_norm.epsilon);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Pooling and fusion
// ---------------------------------------------------------------------------

template <typename T>
void linear_pool(const T* frame_probs, std::size_t frames, std::size_t n,
                 T* clip_probs) {
  for (std::size_t c = 0; c < n; ++c) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t t = 0; t < frames; ++t) {
      const double p = frame_probs[t * n + c];
      s1 += p;
      s2 += p * p;
    }
    clip_probs[c] = s1 > 0.0 ? static_cast<T>(s2 / s1) : T{0};
  }
}

template <typename T>
std::vector<T> linear_pool(std::span<const T> frame_probs, std::size_t n) {
  if (n == 0 || frame_probs.size() % n != 0)
    throw ShapeError("linear_pool: " + std::to_string(frame_probs.size()) +
                     " values do not form rows of " + std::to_string(n));
  std::vector<T> out(n);
  linear_pool(frame_probs.data(), frame_probs.size() / n, n, out.data());
  return out;
}

template <typename T>
Tensor<T> fuse(const std::vector<const Tensor<T>*>& streams) {
  if (streams.empty()) throw ShapeError("fuse: no streams");
  const Tensor<T>& first = *streams.front();
  if (first.ndim() != 3) throw ShapeError("fuse: streams must be [B,T,D]");
  const std::size_t nb = first.dim(0), nt = first.dim(1);
  std::size_t total = 0;
  for (const auto* s : streams) {
    if (s->ndim() != 3 || s->dim(0) != nb)
      throw ShapeError("fuse: stream " + shape_str(s->shape()) +
                       " incompatible with " + shape_str(first.shape()));
    if (s->dim(1) != nt)
      throw AlignmentError(
          "fuse: temporal mismatch " + std::to_string(s->dim(1)) + " vs " +
          std::to_string(nt) +
          " frames; pretrained features must have exactly 1 frame per 4 "
          "spectral frames");
    total += s->dim(2);
  }
  if (streams.size() == 1) return first;
  Tensor<T> out({nb, nt, total});
  for (std::size_t r = 0; r < nb * nt; ++r) {
    T* dst = out.ptr() + r * total;
    for (const auto* s : streams) {
      const std::size_t d = s->dim(2);
      std::copy(s->ptr() + r * d, s->ptr() + (r + 1) * d, dst);
      dst += d;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Crnn
// ---------------------------------------------------------------------------

template <typename T>
Crnn<T>::Crnn(CrnnConfig config) : config_(std::move(config)) {
  config_.validate();
  if (config_.use_spectral) {
    std::size_t cin = 1;
    for (const auto& spec : kStacks) {
      stacks_.push_back(Stack{Conv2d<T>(cin, spec.out_channels),
                              BatchNorm2d<T>(spec.out_channels,
                                             config_.batch_norm),
                              Dropout<T>(config_.dropout_rate),
                              {},
                              {}});
      cin = spec.out_channels;
    }
  }
  if (config_.use_pre_audio)
    proj_audio_ = Projection{
        Linear<T>(config_.pre_audio_dim, config_.audio_embedding()),
        Dropout<T>(config_.dropout_rate),
        {}};
  if (config_.use_pre_visual)
    proj_visual_ = Projection{
        Linear<T>(config_.pre_visual_dim, config_.visual_embedding()),
        Dropout<T>(config_.dropout_rate),
        {}};
  gru_ = BiGru<T>(config_.fused_dim(), config_.gru_hidden, config_.gru_layers);
  head_ = Linear<T>(2 * config_.gru_hidden, config_.n_classes);
}

template <typename T>
void Crnn<T>::init(Rng& rng) {
  for (auto& s : stacks_) s.conv.init(rng);
  if (proj_audio_) proj_audio_->lin.init(rng);
  if (proj_visual_) proj_visual_->lin.init(rng);
  gru_.init(rng);
  head_.init(rng);
}

template <typename T>
Tensor<T> Crnn<T>::cnn_encode(const Tensor<T>& spectral,
                              const ForwardOptions& opts) {
  if (!config_.use_spectral)
    throw ConfigError("cnn_encode called on a model without spectral input");
  if (spectral.ndim() != 4 || spectral.dim(1) != 1)
    throw ShapeError("spectral input must be [B,1,T,128], got " +
                     shape_str(spectral.shape()));
  if (spectral.dim(3) != kSpectralBins)
    throw ConfigError("spectral input must have exactly 128 frequency bins "
                      "(seven halvings reduce 128 to 1), got " +
                      std::to_string(spectral.dim(3)));
  if (spectral.dim(2) % kTimeReduction != 0)
    throw ShapeError("spectral frame count " + std::to_string(spectral.dim(2)) +
                     " is not divisible by 4");
  Tensor<T> x = spectral;
  for (std::size_t i = 0; i < stacks_.size(); ++i) {
    Stack& s = stacks_[i];
    x = s.conv.forward(x);
    x = s.bn.forward(x, opts.freeze_bn_stats ? Mode::kEval : opts.mode,
                     opts.update_bn_stats);
    s.relu_out = relu(x);
    x = s.drop.forward(s.relu_out, opts.mode, opts.rng);
    s.pre_pool_shape = x.shape();
    x = avgpool2d(x, kStacks[i].pool_t, kStacks[i].pool_f);
  }
  // [B, 128, T/4, 1] -> [B, T/4, 128]
  cnn_out_shape_ = x.shape();
  const std::size_t nb = x.dim(0), nc = x.dim(1), nt = x.dim(2);
  Tensor<T> out({nb, nt, nc});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t t = 0; t < nt; ++t)
        out.at(b, t, c) = x.at(b, c, t, 0);
  return out;
}

template <typename T>
Tensor<T> Crnn<T>::cnn_backward(const Tensor<T>& grad) {
  if (cnn_out_shape_.empty()) throw RuntimeError("cnn: backward before forward");
  const std::size_t nb = cnn_out_shape_[0], nc = cnn_out_shape_[1],
                    nt = cnn_out_shape_[2];
  if (grad.shape() != Shape{nb, nt, nc})
    throw ShapeError("cnn backward: unexpected grad shape " +
                     shape_str(grad.shape()));
  Tensor<T> g(cnn_out_shape_);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t t = 0; t < nt; ++t) g.at(b, c, t, 0) = grad.at(b, t, c);
  for (std::size_t i = stacks_.size(); i-- > 0;) {
    Stack& s = stacks_[i];
    g = avgpool2d_backward(g, s.pre_pool_shape, kStacks[i].pool_t,
                           kStacks[i].pool_f);
    g = s.drop.backward(g);
    g = relu_backward(g, s.relu_out);
    g = s.bn.backward(g);
    g = s.conv.backward(g);
  }
  return g;
}

template <typename T>
typename Crnn<T>::Projection& Crnn<T>::projection(Modality m) {
  auto& p = m == Modality::kPreAudio ? proj_audio_ : proj_visual_;
  if (m == Modality::kSpectral || !p)
    throw ConfigError(std::string("model has no projection for ") +
                      modality_name(m));
  return *p;
}

template <typename T>
Tensor<T> Crnn<T>::project(Modality m, const Tensor<T>& features,
                           const ForwardOptions& opts) {
  Projection& p = projection(m);
  if (features.ndim() != 3 || features.dim(2) != p.lin.in_features())
    throw ShapeError(std::string(modality_name(m)) + " features must be [B,T'," +
                     std::to_string(p.lin.in_features()) + "], got " +
                     shape_str(features.shape()));
  p.relu_out = relu(p.lin.forward(features));
  return p.drop.forward(p.relu_out, opts.mode, opts.rng);
}

template <typename T>
Tensor<T> Crnn<T>::project_backward(Modality m, const Tensor<T>& grad) {
  Projection& p = projection(m);
  return p.lin.backward(relu_backward(p.drop.backward(grad), p.relu_out));
}

template <typename T>
Tensor<T> Crnn<T>::frame_probs(const Tensor<T>& fused,
                               const std::vector<std::size_t>& frames) {
  const Tensor<T> h = gru_.forward(fused, frames);
  Tensor<T> p = sigmoid(head_.forward(h));
  const std::size_t nb = p.dim(0), nt = p.dim(1), n = p.dim(2);
  if (!frames.empty())
    for (std::size_t b = 0; b < nb; ++b)
      std::fill(p.ptr() + (b * nt + frames[b]) * n, p.ptr() + (b + 1) * nt * n,
                T{0});
  return p;
}

template <typename T>
ModelOutput<T> Crnn<T>::forward(const ModelInput<T>& input,
                                const ForwardOptions& opts) {
  auto clip_name = [&](std::size_t b) {
    return b < input.clip_ids.size() ? input.clip_ids[b]
                                     : "#" + std::to_string(b);
  };
  auto require = [&](const Tensor<T>& t, Modality m) {
    if (t.empty())
      throw DataError("clip " + clip_name(0) + ": missing " + modality_name(m) +
                      " tensor required by the model configuration");
  };

  std::vector<Tensor<T>> streams;
  stream_kinds_.clear();
  if (config_.use_spectral) {
    require(input.spectral, Modality::kSpectral);
    streams.push_back(cnn_encode(input.spectral, opts));
    stream_kinds_.push_back(Modality::kSpectral);
  }
  if (config_.use_pre_audio) {
    require(input.pre_audio, Modality::kPreAudio);
    streams.push_back(project(Modality::kPreAudio, input.pre_audio, opts));
    stream_kinds_.push_back(Modality::kPreAudio);
  }
  if (config_.use_pre_visual) {
    require(input.pre_visual, Modality::kPreVisual);
    streams.push_back(project(Modality::kPreVisual, input.pre_visual, opts));
    stream_kinds_.push_back(Modality::kPreVisual);
  }
  std::vector<const Tensor<T>*> ptrs;
  stream_dims_.clear();
  for (const auto& s : streams) {
    ptrs.push_back(&s);
    stream_dims_.push_back(s.dim(2));
  }
  const Tensor<T> fused = fuse(ptrs);
  const std::size_t nb = fused.dim(0), nt = fused.dim(1);

  frames_ = input.frames;
  if (frames_.empty()) frames_.assign(nb, nt);
  if (frames_.size() != nb)
    throw ShapeError("frame counts given for " + std::to_string(frames_.size()) +
                     " clips, batch has " + std::to_string(nb));
  for (std::size_t b = 0; b < nb; ++b)
    if (frames_[b] == 0 || frames_[b] > nt)
      throw DataError("clip " + clip_name(b) + ": valid frame count " +
                      std::to_string(frames_[b]) + " outside [1," +
                      std::to_string(nt) + "]");

  probs_ = frame_probs(fused, frames_);
  const std::size_t n = config_.n_classes;
  clip_ = Tensor<T>({nb, n});
  for (std::size_t b = 0; b < nb; ++b)
    linear_pool(probs_.ptr() + b * nt * n, frames_[b], n, clip_.ptr() + b * n);
  return {probs_, clip_, frames_};
}

template <typename T>
InputGrads<T> Crnn<T>::backward(const Tensor<T>& grad_clip,
                                const Tensor<T>& grad_frame) {
  if (probs_.empty()) throw RuntimeError("crnn: backward before forward");
  const std::size_t nb = probs_.dim(0), nt = probs_.dim(1), n = probs_.dim(2);
  if (grad_clip.shape() != Shape{nb, n})
    throw ShapeError("crnn backward: grad_clip must be " +
                     shape_str({nb, n}) + ", got " +
                     shape_str(grad_clip.shape()));
  if (!grad_frame.empty() && grad_frame.shape() != probs_.shape())
    throw ShapeError("crnn backward: grad_frame must be " +
                     shape_str(probs_.shape()));

  // d/dp_t of sum(p^2)/sum(p) = (2 p_t - pooled) / sum(p)
  Tensor<T> g_logit(probs_.shape());
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t c = 0; c < n; ++c) {
      double s1 = 0.0;
      for (std::size_t t = 0; t < frames_[b]; ++t) s1 += probs_.at(b, t, c);
      const double pooled = clip_.at(b, c);
      const double gc = grad_clip.at(b, c);
      for (std::size_t t = 0; t < frames_[b]; ++t) {
        const double p = probs_.at(b, t, c);
        double g = grad_frame.empty() ? 0.0 : grad_frame.at(b, t, c);
        if (s1 > 0.0) g += gc * (2.0 * p - pooled) / s1;
        g_logit.at(b, t, c) = static_cast<T>(g * p * (1.0 - p));
      }
    }
  }
  const Tensor<T> g_fused = gru_.backward(head_.backward(g_logit));

  InputGrads<T> grads;
  std::size_t offset = 0;
  const std::size_t total = g_fused.dim(2);
  for (std::size_t i = 0; i < stream_kinds_.size(); ++i) {
    const std::size_t d = stream_dims_[i];
    Tensor<T> gs({nb, nt, d});
    for (std::size_t r = 0; r < nb * nt; ++r)
      std::copy(g_fused.ptr() + r * total + offset,
                g_fused.ptr() + r * total + offset + d, gs.ptr() + r * d);
    offset += d;
    switch (stream_kinds_[i]) {
      case Modality::kSpectral: grads.spectral = cnn_backward(gs); break;
      case Modality::kPreAudio:
        grads.pre_audio = project_backward(Modality::kPreAudio, gs);
        break;
      case Modality::kPreVisual:
        grads.pre_visual = project_backward(Modality::kPreVisual, gs);
        break;
    }
  }
  return grads;
}

template <typename T>
std::vector<NamedParam<T>> Crnn<T>::named_params() {
  std::vector<NamedParam<T>> out;
  for (std::size_t i = 0; i < stacks_.size(); ++i) {
    const std::string p = "cnn." + std::to_string(i);
    out.push_back({p + ".conv.weight", &stacks_[i].conv.weight});
    out.push_back({p + ".conv.bias", &stacks_[i].conv.bias});
    out.push_back({p + ".bn.gamma", &stacks_[i].bn.gamma});
    out.push_back({p + ".bn.beta", &stacks_[i].bn.beta});
  }
  if (proj_audio_) {
    out.push_back({"proj_audio.weight", &proj_audio_->lin.weight});
    out.push_back({"proj_audio.bias", &proj_audio_->lin.bias});
  }
  if (proj_visual_) {
    out.push_back({"proj_visual.weight", &proj_visual_->lin.weight});
    out.push_back({"proj_visual.bias", &proj_visual_->lin.bias});
  }
  for (auto& np : gru_.named_params("gru")) out.push_back(np);
  out.push_back({"head.weight", &head_.weight});
  out.push_back({"head.bias", &head_.bias});
  return out;
}

template <typename T>
std::vector<NamedBuffer<T>> Crnn<T>::named_buffers() {
  std::vector<NamedBuffer<T>> out;
  for (std::size_t i = 0; i < stacks_.size(); ++i) {
    const std::string p = "cnn." + std::to_string(i) + ".bn.";
    out.push_back({p + "running_mean", &stacks_[i].bn.running_mean});
    out.push_back({p + "running_var", &stacks_[i].bn.running_var});
  }
  return out;
}

template <typename T>
void Crnn<T>::zero_grad() {
  for (auto& np : named_params()) np.param->zero_grad();
}

template <typename T>
std::size_t Crnn<T>::num_parameters() {
  std::size_t n = 0;
  for (auto& np : named_params()) n += np.param->value.size();
  return n;
}

template <typename T>
void Crnn<T>::set_dropout_frozen(bool frozen) {
  for (auto& s : stacks_) s.drop.set_frozen(frozen);
  if (proj_audio_) proj_audio_->drop.set_frozen(frozen);
  if (proj_visual_) proj_visual_->drop.set_frozen(frozen);
}

template <typename To, typename From>
void copy_weights(Crnn<From>& from, Crnn<To>& to) {
  auto src = from.named_params();
  auto dst = to.named_params();
  auto sb = from.named_buffers();
  auto db = to.named_buffers();
  if (src.size() != dst.size() || sb.size() != db.size())
    throw ConfigError("copy_weights: architecture mismatch");
  auto copy = [](const std::string& name, const Tensor<From>& s,
                 Tensor<To>& d) {
    if (s.shape() != d.shape())
      throw ConfigError("copy_weights: shape mismatch for " + name);
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<To>(s[i]);
  };
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].name != dst[i].name)
      throw ConfigError("copy_weights: parameter order mismatch at " +
                        src[i].name);
    copy(src[i].name, src[i].param->value, dst[i].param->value);
  }
  for (std::size_t i = 0; i < sb.size(); ++i)
    copy(sb[i].name, *sb[i].tensor, *db[i].tensor);
}

#define AVSED_INSTANTIATE(T)                                                 \
  template void linear_pool(const T*, std::size_t, std::size_t, T*);        \
  template std::vector<T> linear_pool(std::span<const T>, std::size_t);     \
  template Tensor<T> fuse(const std::vector<const Tensor<T>*>&);            \
  template class Crnn<T>;

AVSED_INSTANTIATE(float)
AVSED_INSTANTIATE(double)
#undef AVSED_INSTANTIATE

template void copy_weights(Crnn<float>&, Crnn<double>&);
template void copy_weights(Crnn<double>&, Crnn<float>&);
template void copy_weights(Crnn<float>&, Crnn<float>&);
template void copy_weights(Crnn<double>&, Crnn<double>&);

}  // namespace avsed
