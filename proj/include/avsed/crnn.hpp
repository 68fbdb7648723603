// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "avsed/gru.hpp"
#include "avsed/layers.hpp"
#include "avsed/tensor.hpp"

namespace avsed {

inline constexpr std::size_t kSpectralBins = 128;
inline constexpr std::size_t kNumStacks = 7;
/// Spectral frames per model output frame (two (2,2) poolings on time).
inline constexpr std::size_t kTimeReduction = 4;
inline constexpr std::size_t kCnnEmbedding = 128;

struct StackSpec {
  std::size_t out_channels;
  std::size_t pool_t;
  std::size_t pool_f;
};

inline constexpr std::array<StackSpec, kNumStacks> kStacks{{
    {16, 2, 2},
    {32, 2, 2},
    {64, 1, 2},
    {128, 1, 2},
    {128, 1, 2},
    {128, 1, 2},
    {128, 1, 2},
}};

enum class Modality { kSpectral, kPreAudio, kPreVisual };

const char* modality_name(Modality m);

struct CrnnConfig {
  bool use_spectral = true;
  bool use_pre_audio = false;
  bool use_pre_visual = false;
  std::size_t n_classes = 10;
  std::size_t pre_audio_dim = 128;
  std::size_t pre_visual_dim = 4096;
  // 0 selects the default: (16, 4) alongside spectral input, (64, 16) without.
  std::size_t emb_audio = 0;
  std::size_t emb_visual = 0;
  double dropout_rate = 0.33;
  std::size_t gru_hidden = 128;
  std::size_t gru_layers = 2;
  BatchNormOptions batch_norm;

  void validate() const;
  std::size_t audio_embedding() const;
  std::size_t visual_embedding() const;
  /// Width of the concatenated per-frame feature fed to the BiGRU.
  std::size_t fused_dim() const;

  /// Flat key/value form used in checkpoint headers and run configs.
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static CrnnConfig from_kv(const std::map<std::string, std::string>& kv);
};

/// Concatenation order of the fused streams; stored in checkpoint metadata.
inline constexpr const char* kFusionOrder = "spectral,pre_audio,pre_visual";

template <typename T>
struct ModelInput {
  Tensor<T> spectral;    // [B, 1, T, 128]
  Tensor<T> pre_audio;   // [B, T/4, Da]
  Tensor<T> pre_visual;  // [B, T/4, Dv]
  /// Valid output frames per clip; empty means every frame is valid.
  std::vector<std::size_t> frames;
  /// Optional, used only for diagnostics.
  std::vector<std::string> clip_ids;
};

template <typename T>
struct ModelOutput {
  Tensor<T> frame_probs;  // [B, T_out, n]; zero past each clip's valid frames
  Tensor<T> clip_probs;   // [B, n]
  std::vector<std::size_t> frames;
};

template <typename T>
struct InputGrads {
  Tensor<T> spectral;
  Tensor<T> pre_audio;
  Tensor<T> pre_visual;
};

struct ForwardOptions {
  Mode mode = Mode::kEval;
  Rng* rng = nullptr;
  /// Train-mode batch norm updates running statistics only when set.
  bool update_bn_stats = true;
  /// Batch norm normalises with running statistics even in train mode.
  bool freeze_bn_stats = false;
};

/// Self-weighted average sum(p^2) / sum(p) over the first `frames` rows of a
/// [T, n] row-major block; all-zero columns pool to 0.
template <typename T>
void linear_pool(const T* frame_probs, std::size_t frames, std::size_t n,
                 T* clip_probs);

template <typename T>
std::vector<T> linear_pool(std::span<const T> frame_probs, std::size_t n);

/// Concatenates [B, T, d_i] streams on the last axis.
template <typename T>
Tensor<T> fuse(const std::vector<const Tensor<T>*>& streams);

template <typename T>
class Crnn {
 public:
  explicit Crnn(CrnnConfig config);

  void init(Rng& rng);

  const CrnnConfig& config() const { return config_; }

  /// [B, 1, T, 128] -> [B, T/4, 128].
  Tensor<T> cnn_encode(const Tensor<T>& spectral, const ForwardOptions& opts);
  Tensor<T> cnn_backward(const Tensor<T>& grad);

  /// [B, T', D] -> [B, T', emb] through linear, ReLU and (train-mode) dropout.
  Tensor<T> project(Modality m, const Tensor<T>& features,
                    const ForwardOptions& opts);
  Tensor<T> project_backward(Modality m, const Tensor<T>& grad);

  /// BiGRU, linear and sigmoid over a fused [B, T_out, D] sequence.
  Tensor<T> frame_probs(const Tensor<T>& fused,
                        const std::vector<std::size_t>& frames);

  ModelOutput<T> forward(const ModelInput<T>& input, const ForwardOptions& opts);

  /// Back-propagates d(loss)/d(clip_probs) [B, n] and, optionally,
  /// d(loss)/d(frame_probs) [B, T_out, n]. Parameter gradients accumulate.
  InputGrads<T> backward(const Tensor<T>& grad_clip,
                         const Tensor<T>& grad_frame = {});

  std::vector<NamedParam<T>> named_params();
  std::vector<NamedBuffer<T>> named_buffers();
  void zero_grad();
  std::size_t num_parameters();

  /// Keeps dropout masks from the previous train-mode forward.
  void set_dropout_frozen(bool frozen);

 private:
  struct Stack {
    Conv2d<T> conv;
    BatchNorm2d<T> bn;
    Dropout<T> drop;
    Tensor<T> relu_out;
    Shape pre_pool_shape;
  };
  struct Projection {
    Linear<T> lin;
    Dropout<T> drop;
    Tensor<T> relu_out;
  };

  Projection& projection(Modality m);

  CrnnConfig config_;
  std::vector<Stack> stacks_;
  std::optional<Projection> proj_audio_;
  std::optional<Projection> proj_visual_;
  BiGru<T> gru_;
  Linear<T> head_;

  // forward caches
  Tensor<T> probs_;
  Tensor<T> clip_;
  std::vector<std::size_t> frames_;
  std::vector<std::size_t> stream_dims_;
  std::vector<Modality> stream_kinds_;
  Shape cnn_out_shape_;
};

/// Copies parameter values and buffers between models of identical
/// architecture, converting the scalar type.
template <typename To, typename From>
void copy_weights(Crnn<From>& from, Crnn<To>& to);

}  // namespace avsed
