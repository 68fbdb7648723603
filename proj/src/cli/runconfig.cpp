// SPDX-License-Identifier: Apache-2.0
#include "avsed/runconfig.hpp"

#include <algorithm>

#include "avsed/errors.hpp"

namespace avsed {
namespace {

using K = KeyKind;

const std::vector<ConfigKey> kSchema = {
    {"profile", K::kProfile, "desk", "full", "default set: desk or full"},
    {"seed", K::kU64, "1", "1", "base seed for generation, initialisation and sampling"},
    {"dataset", K::kString, "", "", "dataset directory (train, predict, evaluate)"},
    {"checkpoint", K::kString, "", "", "checkpoint file (predict)"},
    {"split", K::kString, "test", "test", "partition to predict or evaluate: val or test"},
    {"predictions", K::kString, "", "", "directory written by predict (evaluate)"},
    {"references", K::kString, "", "", "reference strong TSV; empty uses the dataset split"},

    {"synth.n_weak", K::kCount, "120", "1439", "weakly labelled clips"},
    {"synth.n_unlabeled", K::kCount, "120", "13017", "unlabelled clips"},
    {"synth.n_val", K::kCount, "60", "259", "strongly annotated validation clips"},
    {"synth.n_test", K::kCount, "60", "779", "strongly annotated test clips"},
    {"synth.clip_duration", K::kReal, "2.5", "10", "clip length in seconds"},
    {"synth.short_fraction", K::kReal, "0.1", "0.1", "share of clips shortened to 50-100%"},
    {"synth.classes", K::kString, "", "", "comma-separated class names; empty gives class0..class9"},
    {"synth.pre_audio_dim", K::kCount, "128", "128", "pretrained auditory width"},
    {"synth.pre_visual_dim", K::kCount, "512", "4096", "pretrained visual width"},
    {"synth.events_min", K::kCount, "1", "1", "fewest events per clip"},
    {"synth.events_max", K::kCount, "3", "3", "most events per clip"},
    {"synth.event_len_min", K::kReal, "0.5", "0.5", "shortest event in seconds"},
    {"synth.event_len_max", K::kReal, "5", "5", "longest event in seconds"},
    {"synth.noise", K::kReal, "1", "1", "background noise standard deviation"},
    {"synth.spectral_snr", K::kReal, "2", "2", "spectral template amplitude over noise"},
    {"synth.audio_snr", K::kReal, "0.5", "0.5", "pretrained auditory direction amplitude"},
    {"synth.visual_snr", K::kReal, "1", "1", "pretrained visual direction amplitude"},
    {"synth.visual_informative", K::kBool, "true", "true", "visual features carry class signal"},

    {"model.use_spectral", K::kBool, "true", "true", "spectral CNN branch"},
    {"model.use_pre_audio", K::kBool, "false", "false", "pretrained auditory branch"},
    {"model.use_pre_visual", K::kBool, "false", "false", "pretrained visual branch"},
    {"model.emb_audio", K::kCount, "0", "0", "auditory embedding width; 0 picks 16 or 64"},
    {"model.emb_visual", K::kCount, "0", "0", "visual embedding width; 0 picks 4 or 16"},
    {"model.dropout_rate", K::kReal, "0.33", "0.33", "dropout rate"},
    {"model.gru_hidden", K::kCount, "128", "128", "BiGRU hidden size per direction"},
    {"model.gru_layers", K::kCount, "2", "2", "BiGRU layers"},
    {"model.bn_momentum", K::kReal, "0.1", "0.1", "batch-norm running-statistics momentum"},
    {"model.bn_epsilon", K::kReal, "1e-05", "1e-05", "batch-norm epsilon"},

    {"train.epochs", K::kCount, "10", "200", "training epochs"},
    {"train.batches_per_epoch", K::kCount, "30", "250", "optimisation steps per epoch"},
    {"train.weak_per_batch", K::kCount, "8", "24", "weak clips per batch"},
    {"train.unlabeled_per_batch", K::kCount, "8", "24", "unlabelled clips per batch"},
    {"train.classification_weight", K::kReal, "1", "1", "weight of the weak-label BCE"},
    {"train.consistency_weight", K::kReal, "2", "2", "weight of clip plus frame MSE"},
    {"train.ema_decay", K::kReal, "0.99", "0.999", "teacher EMA decay per step"},
    {"train.lr_peak", K::kReal, "0.001", "0.001", "peak learning rate"},
    {"train.lr_ramp_steps", K::kU64, "60", "12500", "warm-up steps"},
    {"train.lr_decay", K::kReal, "0.99995", "0.99995", "multiplicative decay per step after warm-up"},
    {"train.lr_ramp_shape", K::kReal, "5", "5", "warm-up curve exp(-shape*(1-s/S)^2)"},
    {"train.adam_beta1", K::kReal, "0.9", "0.9", "Adam beta1"},
    {"train.adam_beta2", K::kReal, "0.999", "0.999", "Adam beta2"},
    {"train.adam_epsilon", K::kReal, "1e-08", "1e-08", "Adam epsilon"},
    {"train.validate_each_epoch", K::kBool, "true", "true", "score the student on val each epoch"},
    {"train.eval_batch", K::kCount, "16", "16", "clips per evaluation forward"},

    {"eval.threshold", K::kReal, "0.5", "0.5", "decision threshold (strictly greater)"},
    {"eval.median_window", K::kCount, "7", "7", "median filter length in frames (odd)"},
    {"eval.segment_s", K::kReal, "1", "1", "segment length for the segment metric"},
    {"eval.onset_collar", K::kReal, "0.2", "0.2", "onset collar in seconds"},
    {"eval.offset_collar_ratio", K::kReal, "0.2", "0.2", "offset collar as a share of event length"},
    {"eval.offset_collar_min", K::kReal, "0.2", "0.2", "minimum offset collar in seconds"},

    {"experiment.n_seeds", K::kCount, "5", "20", "independent runs per feature combination"},
    {"experiment.k_best", K::kCount, "2", "5", "runs kept by validation score"},
    {"experiment.selection_metric", K::kString, "clip", "clip", "validation metric: clip, segment or event"},
    {"experiment.combinations", K::kString, "all", "all",
     "comma-separated rows to run, e.g. S,S+A+V; all runs the seven rows"},

    {"gradcheck.frames", K::kCount, "8", "8", "spectral frames of the micro model"},
    {"gradcheck.n_classes", K::kCount, "3", "3", "classes of the micro model"},
    {"gradcheck.gru_hidden", K::kCount, "6", "6", "BiGRU width of the micro model"},
    {"gradcheck.eps", K::kReal, "0.0001", "0.0001", "central-difference step"},
    {"gradcheck.tolerance", K::kReal, "0.0001", "0.0001", "largest accepted relative error"},
    {"gradcheck.max_coords", K::kCount, "48", "48", "sampled coordinates per tensor"},
    {"gradcheck.inject_fault", K::kBool, "false", "false", "negative control: corrupt one gradient"},
};

const ConfigKey* find_key(const std::string& key) {
  for (const auto& k : kSchema)
    if (key == k.key) return &k;
  return nullptr;
}

void check_value(const ConfigKey& k, const std::string& v) {
  const std::string what = k.key;
  switch (k.kind) {
    case K::kString:
      if (v.find_first_of("\n\r") != std::string::npos)
        throw ConfigError(what + ": value must be a single line");
      break;
    case K::kBool:
      parse_bool(v, what);
      break;
    case K::kCount:
    case K::kU64:
      parse_u64(v, what);
      break;
    case K::kReal:
      if (!std::isfinite(parse_double(v, what)))
        throw ConfigError(what + ": value must be finite");
      break;
    case K::kProfile:
      if (v != "desk" && v != "full")
        throw ConfigError("profile must be desk or full, got '" + v + "'");
      break;
  }
}

}  // namespace

const std::vector<ConfigKey>& config_schema() { return kSchema; }

RunConfig::RunConfig(const std::string& profile) {
  if (profile != "desk" && profile != "full")
    throw ConfigError("profile must be desk or full, got '" + profile + "'");
  for (const auto& k : kSchema) values_[k.key] = profile == "full" ? k.full : k.desk;
}

RunConfig RunConfig::from_text(std::string_view text, const std::string& source) {
  auto kv = parse_kv_text(text, source);
  std::string profile = "desk";
  if (auto it = kv.find("profile"); it != kv.end()) profile = it->second;
  RunConfig cfg(profile);
  try {
    cfg.apply(kv);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  return from_text(read_text_file(path), path.string());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const ConfigKey* k = find_key(key);
  if (!k) throw ConfigError("unknown config key '" + key + "'");
  const std::string v(trim(value));
  check_value(*k, v);
  if (k->kind == K::kProfile && v != values_.at("profile")) {
    // Switching profile resets every default but keeps explicit values.
    RunConfig fresh(v);
    for (const auto& [name, current] : values_) {
      const ConfigKey* e = find_key(name);
      const std::string old_default = profile() == "full" ? e->full : e->desk;
      if (current != old_default) fresh.values_[name] = current;
    }
    fresh.values_["profile"] = v;
    values_ = std::move(fresh.values_);
    return;
  }
  values_[key] = v;
}

void RunConfig::apply(const std::map<std::string, std::string>& kv) {
  if (auto it = kv.find("profile"); it != kv.end()) set("profile", it->second);
  for (const auto& [k, v] : kv)
    if (k != "profile") set(k, v);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

bool RunConfig::flag(const std::string& key) const { return parse_bool(get(key), key); }

std::size_t RunConfig::count(const std::string& key) const {
  return static_cast<std::size_t>(parse_u64(get(key), key));
}

std::uint64_t RunConfig::u64(const std::string& key) const { return parse_u64(get(key), key); }

double RunConfig::real(const std::string& key) const { return parse_double(get(key), key); }

KeyValues RunConfig::resolved() const {
  KeyValues out;
  for (const auto& k : kSchema) out.emplace_back(k.key, values_.at(k.key));
  return out;
}

std::string RunConfig::to_text() const { return format_kv(resolved()); }

SynthSpec RunConfig::synth_spec() const {
  SynthSpec s;
  s.n_weak = count("synth.n_weak");
  s.n_unlabeled = count("synth.n_unlabeled");
  s.n_val = count("synth.n_val");
  s.n_test = count("synth.n_test");
  s.clip_duration = real("synth.clip_duration");
  s.short_fraction = real("synth.short_fraction");
  s.classes.clear();
  for (const auto& c : split(get("synth.classes"), ','))
    if (!trim(c).empty()) s.classes.emplace_back(trim(c));
  s.pre_audio_dim = count("synth.pre_audio_dim");
  s.pre_visual_dim = count("synth.pre_visual_dim");
  s.events_min = count("synth.events_min");
  s.events_max = count("synth.events_max");
  s.event_len_min = real("synth.event_len_min");
  s.event_len_max = real("synth.event_len_max");
  s.noise = real("synth.noise");
  s.spectral_snr = real("synth.spectral_snr");
  s.audio_snr = real("synth.audio_snr");
  s.visual_snr = real("synth.visual_snr");
  s.visual_informative = flag("synth.visual_informative");
  s.seed = u64("seed");
  s.validate();
  return s;
}

CrnnConfig RunConfig::model_config(const DatasetInfo& info) const {
  std::map<std::string, std::string> kv;
  for (const auto& k : kSchema) {
    const std::string name = k.key;
    if (name.rfind("model.", 0) == 0) kv[name.substr(6)] = values_.at(name);
  }
  kv["n_classes"] = std::to_string(info.vocab.size());
  if (info.pre_audio_dim) kv["pre_audio_dim"] = std::to_string(info.pre_audio_dim);
  if (info.pre_visual_dim) kv["pre_visual_dim"] = std::to_string(info.pre_visual_dim);
  return CrnnConfig::from_kv(kv);
}

TrainRunConfig RunConfig::train_config() const {
  TrainRunConfig t;
  t.epochs = count("train.epochs");
  t.batches_per_epoch = count("train.batches_per_epoch");
  t.weak_per_batch = count("train.weak_per_batch");
  t.unlabeled_per_batch = count("train.unlabeled_per_batch");
  t.seed = u64("seed");
  t.weights.classification = real("train.classification_weight");
  t.weights.consistency = real("train.consistency_weight");
  t.ema_decay = real("train.ema_decay");
  t.lr.peak = real("train.lr_peak");
  t.lr.ramp_steps = u64("train.lr_ramp_steps");
  t.lr.decay_per_step = real("train.lr_decay");
  t.lr.ramp_shape = real("train.lr_ramp_shape");
  t.adam.beta1 = real("train.adam_beta1");
  t.adam.beta2 = real("train.adam_beta2");
  t.adam.epsilon = real("train.adam_epsilon");
  t.validate_each_epoch = flag("train.validate_each_epoch");
  t.eval_batch = count("train.eval_batch");
  t.validate();
  return t;
}

EvalConfig RunConfig::eval_config() const {
  EvalConfig e;
  e.tau = real("eval.threshold");
  e.median_window = count("eval.median_window");
  if (e.median_window % 2 == 0) throw ConfigError("eval.median_window must be odd");
  e.frame_duration = static_cast<double>(kTimeReduction) / kSpectralFrameRate;
  e.segment_s = real("eval.segment_s");
  if (!(e.segment_s > 0.0)) throw ConfigError("eval.segment_s must be positive");
  e.collars.onset = real("eval.onset_collar");
  e.collars.offset_ratio = real("eval.offset_collar_ratio");
  e.collars.offset_min = real("eval.offset_collar_min");
  if (e.collars.onset < 0.0 || e.collars.offset_ratio < 0.0 || e.collars.offset_min < 0.0)
    throw ConfigError("collars must be non-negative");
  return e;
}

GradCheckSuiteOptions RunConfig::gradcheck_options() const {
  GradCheckSuiteOptions g;
  g.frames = count("gradcheck.frames");
  if (g.frames == 0 || g.frames % kTimeReduction != 0)
    throw ConfigError("gradcheck.frames must be a positive multiple of 4");
  g.n_classes = count("gradcheck.n_classes");
  g.gru_hidden = count("gradcheck.gru_hidden");
  g.eps = real("gradcheck.eps");
  g.tolerance = real("gradcheck.tolerance");
  g.max_coords_per_tensor = count("gradcheck.max_coords");
  g.inject_fault = flag("gradcheck.inject_fault");
  g.seed = u64("seed");
  if (!(g.eps > 0.0) || !(g.tolerance > 0.0))
    throw ConfigError("gradcheck eps and tolerance must be positive");
  return g;
}

}  // namespace avsed
