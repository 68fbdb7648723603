// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "avsed/crnn.hpp"
#include "avsed/dataio.hpp"
#include "avsed/kv.hpp"
#include "avsed/metrics.hpp"

namespace avsed {

/// Exponential warm-up to `peak` over `ramp_steps`, then multiplicative decay.
struct LrSchedule {
  double peak = 1e-3;
  std::uint64_t ramp_steps = 12500;
  double decay_per_step = 0.99995;
  double ramp_shape = 5.0;

  /// peak * exp(-shape * (1 - s/S)^2) for s < S, peak * decay^(s - S) after.
  double at(std::uint64_t step) const;
  void validate() const;
};

double lr_at(std::uint64_t step);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list. Moments are kept in
/// double precision.
class Adam {
 public:
  Adam(std::vector<Param<float>*> params, AdamOptions options = {});

  /// Applies one update and zeroes the gradients. A step whose gradients
  /// contain a non-finite value is skipped (returns false) and leaves the
  /// parameters, moments and step counter untouched.
  bool step(double lr);

  std::uint64_t steps() const { return steps_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  std::vector<Param<float>*> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t steps_ = 0;
};

/// Teacher weights as an exponential moving average of the student. A double
/// shadow copy carries the average; the teacher model holds its rounding.
class EmaTeacher {
 public:
  EmaTeacher(Crnn<float>& teacher, double decay = 0.999);

  /// theta_T <- decay * theta_T + (1 - decay) * theta_S over every parameter
  /// and batch-norm buffer.
  void update(Crnn<float>& teacher, Crnn<float>& student);

  double decay() const { return decay_; }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<double>> shadow_;
  double decay_;
};

/// One elementwise EMA step on raw arrays.
void ema_update(std::span<float> teacher, std::span<const float> student, double decay);

struct LossTerm {
  double value = 0.0;
  Tensor<float> grad_clip;   // d(value)/d(clip_probs), [B, n]
  Tensor<float> grad_frame;  // d(value)/d(frame_probs), [B, T, n]; may be empty
};

inline constexpr double kProbClamp = 1e-7;

/// Mean binary cross-entropy over the first `labels.dim(0)` rows of
/// `clip_probs` (the weak clips) and all classes. Probabilities are clamped
/// to [1e-7, 1 - 1e-7].
LossTerm classification_loss(const Tensor<float>& clip_probs, const Tensor<float>& labels);

/// Clip-level MSE over clips and classes plus frame-level MSE over valid
/// frames and classes. Teacher outputs are constants.
LossTerm consistency_loss(const ModelOutput<float>& student,
                          const ModelOutput<float>& teacher);

struct LossWeights {
  double classification = 1.0;
  double consistency = 2.0;
};

/// Weighted sum; non-finite inputs raise RuntimeError.
double total_loss(double class_loss, double cons_loss, const LossWeights& w = {});

struct Batch {
  std::vector<std::size_t> weak;       // indices into the weak pool
  std::vector<std::size_t> unlabeled;  // indices into the unlabeled pool
};

/// Uniform draws with replacement from each pool.
Batch compose_batch(std::size_t weak_pool, std::size_t unlabeled_pool,
                    std::size_t n_weak, std::size_t n_unlabeled, Rng& rng);

/// Stacks clips into a padded model input. Only modalities enabled in
/// `config` are copied.
ModelInput<float> collate(const std::vector<const ClipRecord*>& clips,
                          const CrnnConfig& config);

/// {0,1} label rows for weak clips.
Tensor<float> label_matrix(const std::vector<std::set<std::size_t>>& labels,
                           std::size_t n_classes);

/// Eval-mode scores for every clip of a partition.
std::map<std::string, ClipScores> score_partition(Crnn<float>& model,
                                                  const Partition& part,
                                                  std::size_t batch_size = 16);

/// Clip-based micro F1 of eval-mode scores against a partition's strong
/// annotations.
double validation_clip_f1(Crnn<float>& model, const Partition& part, std::size_t n_classes,
                          double tau = 0.5);

struct TrainRunConfig {
  std::size_t epochs = 200;
  std::size_t batches_per_epoch = 250;
  std::size_t weak_per_batch = 24;
  std::size_t unlabeled_per_batch = 24;
  std::uint64_t seed = 1;
  LossWeights weights;
  double ema_decay = 0.999;
  LrSchedule lr;
  AdamOptions adam;
  /// Evaluate the student on the validation partition after each epoch.
  bool validate_each_epoch = true;
  std::size_t eval_batch = 16;

  void validate() const;
  KeyValues to_kv() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double lr = 0.0;
  double class_loss = 0.0;
  double cons_loss = 0.0;
  double total = 0.0;
  /// NaN when validation is disabled.
  double val_clip_f1 = 0.0;
};

inline constexpr const char* kEpochLogHeader =
    "epoch\tstep\tlr\tclass_loss\tcons_loss\ttotal\tval_clip_f1";

/// Comment lines with the run config, the column header, then one row per
/// epoch.
std::string format_epoch_log(const std::vector<EpochRecord>& records,
                             const KeyValues& config = {});

struct TrainResult {
  Crnn<float> student;
  Crnn<float> teacher;
  std::vector<EpochRecord> log;
  std::vector<std::string> warnings;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mean-teacher training on the weak and unlabeled partitions; the
/// validation partition drives the per-epoch score. Random streams: 0 model
/// init, 1 batch composition, 2 student dropout, 3 teacher dropout.
TrainResult train(const CrnnConfig& model_config, const TrainRunConfig& run,
                  const Dataset& data, const EpochCallback& on_epoch = {});

struct SeedOutcome {
  std::uint64_t seed = 0;
  double validation = 0.0;
  RunReport test;
};

struct MultiSeedReport {
  std::vector<SeedOutcome> runs;
  /// Indices into `runs`, best validation first.
  std::vector<std::size_t> selected;
  double clip_f1 = 0.0;
  double segment_f1 = 0.0;
  double event_f1 = 0.0;
};

/// Top-k by score; ties keep the lower index first.
std::vector<std::size_t> select_top_k(const std::vector<double>& scores, std::size_t k);

/// Runs `run_seed(i)` for i in [0, n) and averages the test reports of the k
/// best validation scores.
MultiSeedReport multi_seed_select(std::size_t n_seeds, std::size_t k_best,
                                  const std::function<SeedOutcome(std::size_t)>& run_seed);

}  // namespace avsed
