// SPDX-License-Identifier: Apache-2.0
#include "avsed/meanteacher.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "avsed/errors.hpp"

namespace avsed {

double LrSchedule::at(std::uint64_t step) const {
  if (step < ramp_steps) {
    const double r = 1.0 - static_cast<double>(step) / static_cast<double>(ramp_steps);
    return peak * std::exp(-ramp_shape * r * r);
  }
  return peak * std::pow(decay_per_step, static_cast<double>(step - ramp_steps));
}

void LrSchedule::validate() const {
  if (!(peak >= 0.0) || !std::isfinite(peak)) throw ConfigError("lr_peak must be non-negative");
  if (!(decay_per_step > 0.0 && decay_per_step <= 1.0))
    throw ConfigError("lr_decay must lie in (0,1]");
  if (!(ramp_shape >= 0.0)) throw ConfigError("lr_ramp_shape must be non-negative");
}

double lr_at(std::uint64_t step) { return LrSchedule{}.at(step); }

Adam::Adam(std::vector<Param<float>*> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.beta1 >= 0.0 && options_.beta1 < 1.0) ||
      !(options_.beta2 >= 0.0 && options_.beta2 < 1.0) || !(options_.epsilon > 0.0))
    throw ConfigError("adam: betas must lie in [0,1) and epsilon must be positive");
  for (auto* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

bool Adam::step(double lr) {
  for (auto* p : params_)
    if (!p->grad.all_finite()) {
      for (auto* q : params_) q->zero_grad();
      return false;
    }
  ++steps_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p.value[i] = static_cast<float>(p.value[i] - lr * mhat / (std::sqrt(vhat) + options_.epsilon));
    }
    p.zero_grad();
  }
  return true;
}

namespace {

struct Slot {
  std::string name;
  Tensor<float>* tensor;
};

std::vector<Slot> slots(Crnn<float>& model) {
  std::vector<Slot> out;
  for (auto& p : model.named_params()) out.push_back({p.name, &p.param->value});
  for (auto& b : model.named_buffers()) out.push_back({b.name, b.tensor});
  return out;
}

}  // namespace

EmaTeacher::EmaTeacher(Crnn<float>& teacher, double decay) : decay_(decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw ConfigError("ema_decay must lie in [0,1)");
  for (const auto& s : slots(teacher)) {
    names_.push_back(s.name);
    shadow_.emplace_back(s.tensor->data().begin(), s.tensor->data().end());
  }
}

void EmaTeacher::update(Crnn<float>& teacher, Crnn<float>& student) {
  auto t = slots(teacher);
  auto s = slots(student);
  if (t.size() != names_.size() || s.size() != names_.size())
    throw ConfigError("ema: teacher and student architectures differ");
  for (std::size_t k = 0; k < names_.size(); ++k) {
    if (t[k].name != names_[k] || s[k].name != names_[k] ||
        s[k].tensor->size() != shadow_[k].size() || t[k].tensor->size() != shadow_[k].size())
      throw ConfigError("ema: architecture mismatch at " + names_[k]);
    auto& sh = shadow_[k];
    const float* src = s[k].tensor->ptr();
    float* dst = t[k].tensor->ptr();
    for (std::size_t i = 0; i < sh.size(); ++i) {
      sh[i] = decay_ * sh[i] + (1.0 - decay_) * static_cast<double>(src[i]);
      dst[i] = static_cast<float>(sh[i]);
    }
  }
}

void ema_update(std::span<float> teacher, std::span<const float> student, double decay) {
  if (teacher.size() != student.size())
    throw ShapeError("ema: teacher has " + std::to_string(teacher.size()) +
                     " values, student " + std::to_string(student.size()));
  for (std::size_t i = 0; i < teacher.size(); ++i)
    teacher[i] = static_cast<float>(decay * teacher[i] + (1.0 - decay) * student[i]);
}

LossTerm classification_loss(const Tensor<float>& clip_probs, const Tensor<float>& labels) {
  if (clip_probs.ndim() != 2 || labels.ndim() != 2 || labels.dim(1) != clip_probs.dim(1) ||
      labels.dim(0) > clip_probs.dim(0))
    throw ShapeError("classification loss: labels " + shape_str(labels.shape()) +
                     " do not fit clip probabilities " + shape_str(clip_probs.shape()));
  const std::size_t w = labels.dim(0), n = labels.dim(1);
  LossTerm out;
  out.grad_clip = Tensor<float>(clip_probs.shape());
  const double scale = 1.0 / static_cast<double>(w * n);
  double sum = 0.0;
  for (std::size_t i = 0; i < w * n; ++i) {
    const double y = labels[i];
    if (y != 0.0 && y != 1.0)
      throw DataError("classification loss: label " + format_double(y) + " outside {0,1}");
    const double raw = clip_probs[i];
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    // The clamp has zero slope outside its range.
    if (raw > kProbClamp && raw < 1.0 - kProbClamp)
      out.grad_clip[i] = static_cast<float>(scale * (-y / p + (1.0 - y) / (1.0 - p)));
  }
  out.value = sum * scale;
  return out;
}

LossTerm consistency_loss(const ModelOutput<float>& student, const ModelOutput<float>& teacher) {
  if (student.clip_probs.shape() != teacher.clip_probs.shape() ||
      student.frame_probs.shape() != teacher.frame_probs.shape())
    throw ShapeError("consistency loss: student outputs " +
                     shape_str(student.frame_probs.shape()) + " vs teacher " +
                     shape_str(teacher.frame_probs.shape()));
  const std::size_t nb = student.clip_probs.dim(0), n = student.clip_probs.dim(1);
  const std::size_t nt = student.frame_probs.dim(1);
  std::vector<std::size_t> frames = student.frames;
  if (frames.empty()) frames.assign(nb, nt);
  if (frames.size() != nb || (!teacher.frames.empty() && teacher.frames != frames))
    throw ShapeError("consistency loss: valid frame counts differ");

  LossTerm out;
  out.grad_clip = Tensor<float>(student.clip_probs.shape());
  out.grad_frame = Tensor<float>(student.frame_probs.shape());
  const double clip_scale = 1.0 / static_cast<double>(nb * n);
  double clip_sum = 0.0;
  for (std::size_t i = 0; i < nb * n; ++i) {
    const double d = static_cast<double>(student.clip_probs[i]) - teacher.clip_probs[i];
    clip_sum += d * d;
    out.grad_clip[i] = static_cast<float>(2.0 * d * clip_scale);
  }
  const std::size_t valid = std::accumulate(frames.begin(), frames.end(), std::size_t{0});
  const double frame_scale = 1.0 / static_cast<double>(valid * n);
  double frame_sum = 0.0;
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t t = 0; t < frames[b]; ++t)
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t i = (b * nt + t) * n + c;
        const double d = static_cast<double>(student.frame_probs[i]) - teacher.frame_probs[i];
        frame_sum += d * d;
        out.grad_frame[i] = static_cast<float>(2.0 * d * frame_scale);
      }
  out.value = clip_sum * clip_scale + frame_sum * frame_scale;
  return out;
}

double total_loss(double class_loss, double cons_loss, const LossWeights& w) {
  if (!std::isfinite(class_loss) || !std::isfinite(cons_loss))
    throw RuntimeError("non-finite loss: classification " + format_double(class_loss) +
                       ", consistency " + format_double(cons_loss));
  return w.classification * class_loss + w.consistency * cons_loss;
}

Batch compose_batch(std::size_t weak_pool, std::size_t unlabeled_pool, std::size_t n_weak,
                    std::size_t n_unlabeled, Rng& rng) {
  if (n_weak > 0 && weak_pool == 0) throw ConfigError("batch needs weak clips but the weak pool is empty");
  if (n_unlabeled > 0 && unlabeled_pool == 0)
    throw ConfigError("batch needs unlabeled clips but the unlabeled pool is empty");
  Batch b;
  if (n_weak > 0) {
    std::uniform_int_distribution<std::size_t> u(0, weak_pool - 1);
    for (std::size_t i = 0; i < n_weak; ++i) b.weak.push_back(u(rng));
  }
  if (n_unlabeled > 0) {
    std::uniform_int_distribution<std::size_t> u(0, unlabeled_pool - 1);
    for (std::size_t i = 0; i < n_unlabeled; ++i) b.unlabeled.push_back(u(rng));
  }
  return b;
}

ModelInput<float> collate(const std::vector<const ClipRecord*>& clips, const CrnnConfig& config) {
  if (clips.empty()) throw ShapeError("cannot collate an empty batch");
  const std::size_t nb = clips.size();
  std::size_t nt = 0;
  ModelInput<float> in;
  for (const auto* c : clips) {
    const std::size_t f = c->output_frames();
    if (f == 0) throw DataError("clip " + c->id + " has no frames");
    in.frames.push_back(f);
    in.clip_ids.push_back(c->id);
    nt = std::max(nt, f);
  }
  auto stack = [&](const Tensor<float> ClipRecord::*member, Shape shape, std::size_t rows_per_frame,
                   const char* what) {
    Tensor<float> out(std::move(shape));
    const std::size_t width = out.dim(out.ndim() - 1);
    const std::size_t stride = nt * rows_per_frame * width;
    for (std::size_t b = 0; b < nb; ++b) {
      const Tensor<float>& src = clips[b]->*member;
      if (src.empty()) throw DataError("clip " + clips[b]->id + ": missing modality " + what);
      if (src.dim(1) != width)
        throw ShapeError("clip " + clips[b]->id + ": " + what + " width " +
                         std::to_string(src.dim(1)) + ", model expects " + std::to_string(width));
      std::copy(src.ptr(), src.ptr() + src.size(), out.ptr() + b * stride);
    }
    return out;
  };
  if (config.use_spectral)
    in.spectral = stack(&ClipRecord::spectral, {nb, 1, nt * kTimeReduction, kSpectralBins},
                        kTimeReduction, "spectral");
  if (config.use_pre_audio)
    in.pre_audio = stack(&ClipRecord::pre_audio, {nb, nt, config.pre_audio_dim}, 1, "pre_audio");
  if (config.use_pre_visual)
    in.pre_visual =
        stack(&ClipRecord::pre_visual, {nb, nt, config.pre_visual_dim}, 1, "pre_visual");
  return in;
}

Tensor<float> label_matrix(const std::vector<std::set<std::size_t>>& labels, std::size_t n_classes) {
  if (labels.empty()) return Tensor<float>();
  Tensor<float> y({labels.size(), n_classes});
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c : labels[i]) {
      if (c >= n_classes)
        throw DataError("label index " + std::to_string(c) + " outside " +
                        std::to_string(n_classes) + " classes");
      y.at(i, c) = 1.0f;
    }
  return y;
}

std::map<std::string, ClipScores> score_partition(Crnn<float>& model, const Partition& part,
                                                  std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("eval batch size must be positive");
  std::map<std::string, ClipScores> scores;
  const std::size_t n = model.config().n_classes;
  for (std::size_t start = 0; start < part.clips.size(); start += batch_size) {
    std::vector<const ClipRecord*> chunk;
    for (std::size_t i = start; i < std::min(part.clips.size(), start + batch_size); ++i)
      chunk.push_back(&part.clips[i]);
    const auto out = model.forward(collate(chunk, model.config()), ForwardOptions{});
    const std::size_t nt = out.frame_probs.dim(1);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      ClipScores s;
      s.frames = out.frames[b];
      s.clip_probs.assign(out.clip_probs.ptr() + b * n, out.clip_probs.ptr() + (b + 1) * n);
      const float* fp = out.frame_probs.ptr() + b * nt * n;
      s.frame_probs.assign(fp, fp + s.frames * n);
      scores[chunk[b]->id] = std::move(s);
    }
  }
  return scores;
}

double validation_clip_f1(Crnn<float>& model, const Partition& part, std::size_t n_classes,
                          double tau) {
  const auto scores = score_partition(model, part);
  TagsByClip predicted, reference;
  for (const auto& [clip, s] : scores) {
    predicted[clip] = threshold_tags(s.clip_probs, tau);
    auto& ref = reference[clip];
    if (auto it = part.strong.find(clip); it != part.strong.end())
      for (const auto& e : it->second) ref.insert(e.cls);
    else if (auto w = part.weak_labels.find(clip); w != part.weak_labels.end())
      ref = w->second;
  }
  return clip_micro_f1(predicted, reference, n_classes).f1;
}

void TrainRunConfig::validate() const {
  if (batches_per_epoch == 0) throw ConfigError("batches_per_epoch must be positive");
  if (weak_per_batch + unlabeled_per_batch == 0)
    throw ConfigError("batches must contain at least one clip");
  if (weak_per_batch == 0) throw ConfigError("weak_per_batch must be positive: weak pool required");
  if (!(weights.classification >= 0.0) || !(weights.consistency >= 0.0))
    throw ConfigError("loss weights must be non-negative");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0,1)");
  if (eval_batch == 0) throw ConfigError("eval_batch must be positive");
  lr.validate();
  Adam probe({}, adam);
  (void)probe;
}

KeyValues TrainRunConfig::to_kv() const {
  return {
      {"epochs", std::to_string(epochs)},
      {"batches_per_epoch", std::to_string(batches_per_epoch)},
      {"weak_per_batch", std::to_string(weak_per_batch)},
      {"unlabeled_per_batch", std::to_string(unlabeled_per_batch)},
      {"seed", std::to_string(seed)},
      {"classification_weight", format_double(weights.classification)},
      {"consistency_weight", format_double(weights.consistency)},
      {"ema_decay", format_double(ema_decay)},
      {"lr_peak", format_double(lr.peak)},
      {"lr_ramp_steps", std::to_string(lr.ramp_steps)},
      {"lr_decay", format_double(lr.decay_per_step)},
      {"lr_ramp_shape", format_double(lr.ramp_shape)},
      {"adam_beta1", format_double(adam.beta1)},
      {"adam_beta2", format_double(adam.beta2)},
      {"adam_epsilon", format_double(adam.epsilon)},
      {"validate_each_epoch", validate_each_epoch ? "true" : "false"},
      {"eval_batch", std::to_string(eval_batch)},
  };
}

std::string format_epoch_log(const std::vector<EpochRecord>& records, const KeyValues& config) {
  std::string out;
  for (const auto& [k, v] : config) out += "# " + k + "=" + v + "\n";
  out += std::string(kEpochLogHeader) + "\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch) + "\t" + std::to_string(r.step) + "\t" + format_double(r.lr) +
           "\t" + format_double(r.class_loss) + "\t" + format_double(r.cons_loss) + "\t" +
           format_double(r.total) + "\t" +
           (std::isnan(r.val_clip_f1) ? std::string("nan") : format_double(r.val_clip_f1)) + "\n";
  }
  return out;
}

TrainResult train(const CrnnConfig& model_config, const TrainRunConfig& run, const Dataset& data,
                  const EpochCallback& on_epoch) {
  model_config.validate();
  run.validate();
  const auto& info = data.info;
  if ((model_config.use_spectral && !info.has_spectral) ||
      (model_config.use_pre_audio && !info.has_pre_audio) ||
      (model_config.use_pre_visual && !info.has_pre_visual))
    throw ConfigError("model uses a modality the dataset does not provide");
  if (info.vocab.size() != model_config.n_classes)
    throw ConfigError("model has " + std::to_string(model_config.n_classes) +
                      " classes, dataset vocabulary has " + std::to_string(info.vocab.size()));

  const std::size_t n_unl = data.unlabeled.clips.empty() ? 0 : run.unlabeled_per_batch;
  if (data.weak.clips.empty()) throw ConfigError("weak pool required: no weak clips");

  Rng init_rng = make_stream(run.seed, 0);
  Rng batch_rng = make_stream(run.seed, 1);
  Rng student_drop = make_stream(run.seed, 2);
  Rng teacher_drop = make_stream(run.seed, 3);

  TrainResult result{Crnn<float>(model_config), Crnn<float>(model_config), {}, {}};
  Crnn<float>& student = result.student;
  Crnn<float>& teacher = result.teacher;
  student.init(init_rng);
  copy_weights(student, teacher);
  EmaTeacher ema(teacher, run.ema_decay);
  std::vector<Param<float>*> params;
  for (auto& p : student.named_params()) params.push_back(p.param);
  Adam adam(params, run.adam);

  std::vector<std::set<std::size_t>> weak_labels;
  for (const auto& c : data.weak.clips) weak_labels.push_back(data.weak.weak_labels.at(c.id));

  const bool use_teacher = run.weights.consistency > 0.0;
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= run.epochs; ++epoch) {
    double sum_cls = 0.0, sum_cons = 0.0, sum_total = 0.0, last_lr = 0.0;
    for (std::size_t bi = 0; bi < run.batches_per_epoch; ++bi) {
      const Batch batch = compose_batch(data.weak.clips.size(), data.unlabeled.clips.size(),
                                        run.weak_per_batch, n_unl, batch_rng);
      std::vector<const ClipRecord*> clips;
      std::vector<std::set<std::size_t>> labels;
      for (std::size_t i : batch.weak) {
        clips.push_back(&data.weak.clips[i]);
        labels.push_back(weak_labels[i]);
      }
      for (std::size_t i : batch.unlabeled) clips.push_back(&data.unlabeled.clips[i]);
      const ModelInput<float> input = collate(clips, model_config);
      const double lr = run.lr.at(step);

      ForwardOptions so;
      so.mode = Mode::kTrain;
      so.rng = &student_drop;
      const ModelOutput<float> sout = student.forward(input, so);
      const LossTerm cls = classification_loss(sout.clip_probs, label_matrix(labels, model_config.n_classes));
      LossTerm cons;
      if (use_teacher) {
        ForwardOptions to;
        to.mode = Mode::kTrain;
        to.rng = &teacher_drop;
        to.update_bn_stats = false;
        cons = consistency_loss(sout, teacher.forward(input, to));
      }
      double total;
      try {
        total = total_loss(cls.value, cons.value, run.weights);
      } catch (const RuntimeError& e) {
        throw RuntimeError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(bi) + " (step " + std::to_string(step) +
                           ")");
      }

      Tensor<float> grad_clip = cls.grad_clip;
      for (std::size_t i = 0; i < grad_clip.size(); ++i) {
        double g = run.weights.classification * grad_clip[i];
        if (use_teacher) g += run.weights.consistency * cons.grad_clip[i];
        grad_clip[i] = static_cast<float>(g);
      }
      Tensor<float> grad_frame;
      if (use_teacher) {
        grad_frame = cons.grad_frame;
        for (auto& g : grad_frame.data()) g = static_cast<float>(run.weights.consistency * g);
      }
      student.zero_grad();
      student.backward(grad_clip, grad_frame);
      if (!adam.step(lr))
        result.warnings.push_back("non-finite gradient at epoch " + std::to_string(epoch) +
                                  ", batch " + std::to_string(bi) + ": step skipped");
      ema.update(teacher, student);

      sum_cls += cls.value;
      sum_cons += cons.value;
      sum_total += total;
      last_lr = lr;
      ++step;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = step;
    rec.lr = last_lr;
    const double nb = static_cast<double>(run.batches_per_epoch);
    rec.class_loss = sum_cls / nb;
    rec.cons_loss = sum_cons / nb;
    rec.total = sum_total / nb;
    rec.val_clip_f1 = std::numeric_limits<double>::quiet_NaN();
    if (run.validate_each_epoch && !data.val.clips.empty())
      rec.val_clip_f1 = validation_clip_f1(student, data.val, model_config.n_classes);
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

std::vector<std::size_t> select_top_k(const std::vector<double>& scores, std::size_t k) {
  if (k == 0 || k > scores.size())
    throw ConfigError("k_best must lie in [1, " + std::to_string(scores.size()) + "], got " +
                      std::to_string(k));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  return order;
}

MultiSeedReport multi_seed_select(std::size_t n_seeds, std::size_t k_best,
                                  const std::function<SeedOutcome(std::size_t)>& run_seed) {
  if (n_seeds == 0) throw ConfigError("n_seeds must be positive");
  if (k_best == 0 || k_best > n_seeds)
    throw ConfigError("k_best " + std::to_string(k_best) + " must lie in [1, n_seeds=" +
                      std::to_string(n_seeds) + "]");
  MultiSeedReport report;
  std::vector<double> scores;
  for (std::size_t i = 0; i < n_seeds; ++i) {
    report.runs.push_back(run_seed(i));
    scores.push_back(report.runs.back().validation);
  }
  report.selected = select_top_k(scores, k_best);
  for (std::size_t i : report.selected) {
    report.clip_f1 += report.runs[i].test.clip.f1;
    report.segment_f1 += report.runs[i].test.segment.f1;
    report.event_f1 += report.runs[i].test.event.f1;
  }
  const double k = static_cast<double>(k_best);
  report.clip_f1 /= k;
  report.segment_f1 /= k;
  report.event_f1 /= k;
  return report;
}

}  // namespace avsed
