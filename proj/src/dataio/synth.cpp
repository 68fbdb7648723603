// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>

#include "avsed/crnn.hpp"
#include "avsed/dataio.hpp"
#include "avsed/errors.hpp"
#include "avsed/kv.hpp"

namespace avsed {
namespace {

namespace fs = std::filesystem;

double round_ms(double t) { return std::round(t * 1000.0) / 1000.0; }

// Merges overlapping or touching events of the same class.
EventList normalise(EventList events) {
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    return a.cls < b.cls || (a.cls == b.cls && a.onset < b.onset);
  });
  EventList out;
  for (const auto& e : events) {
    if (!out.empty() && out.back().cls == e.cls && e.onset <= out.back().offset)
      out.back().offset = std::max(out.back().offset, e.offset);
    else
      out.push_back(e);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Event& a, const Event& b) { return a.onset < b.onset; });
  return out;
}

// Rows of a [frames, n] activity mask at the given frame rate.
std::vector<std::uint8_t> activity(const EventList& events, std::size_t frames,
                                   std::size_t n, double rate) {
  std::vector<std::uint8_t> act(frames * n, 0);
  for (const auto& e : events)
    for (std::size_t t = 0; t < frames; ++t) {
      const double f0 = t / rate, f1 = (t + 1) / rate;
      if (std::min(f1, e.offset) - std::max(f0, e.onset) > kTimeTolerance)
        act[t * n + e.cls] = 1;
    }
  return act;
}

Tensor<float> unit_rows(std::size_t n, std::size_t dim, Rng& rng) {
  Tensor<float> t({n, dim});
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t c = 0; c < n; ++c) {
    std::vector<double> v(dim);
    double norm = 0.0;
    for (auto& x : v) {
      x = g(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < dim; ++i) t.at(c, i) = static_cast<float>(v[i] / norm);
  }
  return t;
}

}  // namespace

std::size_t output_frames_for(double duration_s) {
  const long k = std::lround(duration_s * kPretrainedFrameRate);
  return static_cast<std::size_t>(std::max(1L, k));
}

std::vector<std::string> SynthSpec::class_names() const {
  if (!classes.empty()) return classes;
  std::vector<std::string> names;
  for (int i = 0; i < 10; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

void SynthSpec::validate() const {
  if (n_weak == 0) throw ConfigError("n_weak must be positive: weak pool required");
  if (!(clip_duration > 0.0)) throw ConfigError("clip_duration must be positive");
  if (!(short_fraction >= 0.0 && short_fraction <= 1.0))
    throw ConfigError("short_fraction must lie in [0,1]");
  if (pre_audio_dim == 0 || pre_visual_dim == 0)
    throw ConfigError("pretrained feature dimensions must be positive");
  if (events_min == 0)
    throw ConfigError("events_min must be at least 1 (weak labels need an event)");
  if (events_min > events_max) throw ConfigError("events_min exceeds events_max");
  if (!(event_len_min > 0.0) || event_len_min > event_len_max)
    throw ConfigError("event lengths must satisfy 0 < event_len_min <= event_len_max");
  const double shortest =
      short_fraction > 0.0 ? clip_duration / 2.0 : clip_duration;
  if (event_len_min > shortest)
    throw ConfigError("infeasible synthesis: event_len_min " +
                      format_double(event_len_min) + " s is longer than a " +
                      format_double(shortest) + " s clip");
  if (!(noise > 0.0)) throw ConfigError("noise must be positive");
  if (spectral_snr < 0.0 || audio_snr < 0.0 || visual_snr < 0.0)
    throw ConfigError("snr values must be non-negative");
  Vocabulary check(class_names());
  (void)check;
}

std::vector<std::pair<std::string, std::string>> SynthSpec::to_kv() const {
  return {
      {"n_weak", std::to_string(n_weak)},
      {"n_unlabeled", std::to_string(n_unlabeled)},
      {"n_val", std::to_string(n_val)},
      {"n_test", std::to_string(n_test)},
      {"clip_duration", format_double(clip_duration)},
      {"short_fraction", format_double(short_fraction)},
      {"classes", Vocabulary(class_names()).joined(',')},
      {"pre_audio_dim", std::to_string(pre_audio_dim)},
      {"pre_visual_dim", std::to_string(pre_visual_dim)},
      {"events_min", std::to_string(events_min)},
      {"events_max", std::to_string(events_max)},
      {"event_len_min", format_double(event_len_min)},
      {"event_len_max", format_double(event_len_max)},
      {"noise", format_double(noise)},
      {"spectral_snr", format_double(spectral_snr)},
      {"audio_snr", format_double(audio_snr)},
      {"visual_snr", format_double(visual_snr)},
      {"visual_informative", visual_informative ? "true" : "false"},
      {"seed", std::to_string(seed)},
  };
}

SynthSignatures synth_signatures(const SynthSpec& spec) {
  const std::size_t n = spec.class_names().size();
  Rng rng = make_stream(spec.seed, 1);
  SynthSignatures s;
  s.spectral = Tensor<float>({n, kSpectralBins});
  std::uniform_real_distribution<double> jitter(-2.0, 2.0), width(3.0, 6.0);
  const double spacing = static_cast<double>(kSpectralBins) / static_cast<double>(n);
  for (std::size_t c = 0; c < n; ++c) {
    const double centre = (c + 0.5) * spacing + jitter(rng);
    const double sigma = std::min(width(rng), spacing);
    for (std::size_t b = 0; b < kSpectralBins; ++b) {
      const double d = (static_cast<double>(b) - centre) / sigma;
      s.spectral.at(c, b) = static_cast<float>(std::exp(-0.5 * d * d));
    }
  }
  s.pre_audio = unit_rows(n, spec.pre_audio_dim, rng);
  s.pre_visual = unit_rows(n, spec.pre_visual_dim, rng);
  return s;
}

SynthSummary synthesize_dataset(const SynthSpec& spec, const fs::path& dir) {
  spec.validate();
  const Vocabulary vocab(spec.class_names());
  const std::size_t n = vocab.size();
  const SynthSignatures sig = synth_signatures(spec);

  fs::create_directories(dir / "features");
  fs::create_directories(dir / "lists");
  fs::create_directories(dir / "hidden");

  const std::size_t counts[] = {spec.n_weak, spec.n_unlabeled, spec.n_val, spec.n_test};
  StrongAnnotations truth;
  WeakAnnotations weak;
  StrongAnnotations strong[2];
  SynthSummary summary;

  for (std::size_t p = 0; p < 4; ++p) {
    const std::string part = kPartitions[p];
    std::vector<std::pair<std::string, double>> list;
    for (std::size_t i = 0; i < counts[p]; ++i) {
      Rng rng = make_stream(spec.seed, 2 + p, i);
      char idbuf[64];
      std::snprintf(idbuf, sizeof idbuf, "%s_%05zu", part.c_str(), i);
      const std::string id = idbuf;

      std::uniform_real_distribution<double> u(0.0, 1.0);
      double duration = spec.clip_duration;
      if (u(rng) < spec.short_fraction) {
        const double lo = std::max(spec.clip_duration / 2.0, spec.event_len_min);
        duration = round_ms(lo + u(rng) * (spec.clip_duration - lo));
      }
      const std::size_t k_frames = output_frames_for(duration);
      const std::size_t t_frames = k_frames * kTimeReduction;

      std::uniform_int_distribution<std::size_t> n_ev(spec.events_min, spec.events_max);
      std::uniform_int_distribution<std::size_t> cls(0, n - 1);
      EventList events;
      for (std::size_t e = n_ev(rng); e > 0; --e) {
        const double max_len = std::min(spec.event_len_max, duration);
        const double len = spec.event_len_min + u(rng) * (max_len - spec.event_len_min);
        const double onset = round_ms(u(rng) * (duration - len));
        const double offset = std::min(duration, round_ms(onset + len));
        events.push_back({onset, offset, cls(rng)});
      }
      events = normalise(std::move(events));

      std::normal_distribution<double> g(0.0, spec.noise);
      const auto act_s = activity(events, t_frames, n, kSpectralFrameRate);
      const auto act_p = activity(events, k_frames, n, kPretrainedFrameRate);

      Tensor<float> spectral({t_frames, kSpectralBins});
      for (std::size_t t = 0; t < t_frames; ++t)
        for (std::size_t b = 0; b < kSpectralBins; ++b) {
          double v = g(rng);
          for (std::size_t c = 0; c < n; ++c)
            if (act_s[t * n + c])
              v += spec.spectral_snr * spec.noise * sig.spectral.at(c, b);
          spectral.at(t, b) = static_cast<float>(v);
        }
      auto pretrained = [&](const Tensor<float>& dirs, double snr, bool informative) {
        const std::size_t dim = dirs.dim(1);
        Tensor<float> x({k_frames, dim});
        for (std::size_t t = 0; t < k_frames; ++t)
          for (std::size_t j = 0; j < dim; ++j) {
            double v = g(rng);
            if (informative)
              for (std::size_t c = 0; c < n; ++c)
                if (act_p[t * n + c]) v += snr * spec.noise * dirs.at(c, j);
            x.at(t, j) = static_cast<float>(v);
          }
        return x;
      };
      Tensor<float> pre_audio = pretrained(sig.pre_audio, spec.audio_snr, true);
      Tensor<float> pre_visual =
          pretrained(sig.pre_visual, spec.visual_snr, spec.visual_informative);

      write_feature_file(dir / "features" / (id + ".ftb"),
                         {{"spectral", std::move(spectral)},
                          {"pre_audio", std::move(pre_audio)},
                          {"pre_visual", std::move(pre_visual)}});
      list.emplace_back(id, duration);
      truth.add_clip(id);
      truth.events[id] = events;
      if (p == 0) {
        weak.clips.push_back(id);
        for (const auto& e : events) weak.labels[id].insert(e.cls);
      } else if (p >= 2) {
        strong[p - 2].add_clip(id);
        strong[p - 2].events[id] = events;
      }
    }
    write_text_file(dir / "lists" / (part + ".tsv"), format_clip_list(list));
    summary.clips_per_partition[part] = list.size();
  }

  write_weak_tsv(dir / "weak.tsv", weak, vocab);
  write_strong_tsv(dir / "val_strong.tsv", strong[0], vocab);
  write_strong_tsv(dir / "test_strong.tsv", strong[1], vocab);
  write_strong_tsv(dir / "hidden" / "truth_strong.tsv", truth, vocab);

  KeyValues manifest{
      {"format", "avsed-dataset/1"},
      {"classes", vocab.joined(',')},
      {"spectral_bins", std::to_string(kSpectralBins)},
      {"spectral_frame_rate", format_double(kSpectralFrameRate)},
      {"pre_audio_dim", std::to_string(spec.pre_audio_dim)},
      {"pre_visual_dim", std::to_string(spec.pre_visual_dim)},
      {"modalities", "spectral,pre_audio,pre_visual"},
      {"features_dir", "features"},
      {"weak.clips", "lists/weak.tsv"},
      {"weak.labels", "weak.tsv"},
      {"unlabeled.clips", "lists/unlabeled.tsv"},
      {"val.clips", "lists/val.tsv"},
      {"val.strong", "val_strong.tsv"},
      {"test.clips", "lists/test.tsv"},
      {"test.strong", "test_strong.tsv"},
      {"hidden.strong", "hidden/truth_strong.tsv"},
  };
  for (const auto& [k, v] : spec.to_kv()) manifest.emplace_back("synth." + k, v);
  write_kv_file(dir / "manifest.txt", manifest);
  return summary;
}

}  // namespace avsed
