// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "avsed/metrics.hpp"
#include "avsed/tensor.hpp"

namespace avsed {

// ---------------------------------------------------------------------------
// Feature container (FTB1).
// ---------------------------------------------------------------------------

inline constexpr std::string_view kFeatureMagic = "FTB1\n";

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

std::string encode_feature_container(const std::vector<NamedTensor>& records);
/// `source` only decorates error messages.
std::vector<NamedTensor> decode_feature_container(std::string_view bytes,
                                                  const std::string& source = "");
void write_feature_file(const std::filesystem::path& path,
                        const std::vector<NamedTensor>& records);
std::vector<NamedTensor> read_feature_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Annotation dialects.
// ---------------------------------------------------------------------------

inline constexpr const char* kStrongHeader = "filename\tonset\toffset\tevent_label";
/// Accepted on input; the writer emits data lines only.
inline constexpr const char* kWeakHeader = "filename\tevent_labels";

/// Ordered class names; index = class id.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  /// Throws DataError listing the vocabulary for unknown labels.
  std::size_t id(const std::string& label, std::size_t line = 0) const;
  std::string joined(char sep = ',') const;

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
};

/// Clips in first-appearance order with their events. A clip may appear
/// with no events (a line holding only the clip id).
struct StrongAnnotations {
  std::vector<std::string> clips;
  EventsByClip events;

  void add_clip(const std::string& clip);
};

StrongAnnotations parse_strong_tsv(std::string_view text, const Vocabulary& vocab);
std::string format_strong_tsv(const StrongAnnotations& ann, const Vocabulary& vocab);
StrongAnnotations read_strong_tsv(const std::filesystem::path& path,
                                  const Vocabulary& vocab);
void write_strong_tsv(const std::filesystem::path& path,
                      const StrongAnnotations& ann, const Vocabulary& vocab);

struct WeakAnnotations {
  std::vector<std::string> clips;
  TagsByClip labels;
};

/// `allow_empty` admits clips without labels (prediction files).
WeakAnnotations parse_weak_tsv(std::string_view text, const Vocabulary& vocab,
                               bool allow_empty = false);
std::string format_weak_tsv(const WeakAnnotations& ann, const Vocabulary& vocab);
WeakAnnotations read_weak_tsv(const std::filesystem::path& path,
                              const Vocabulary& vocab, bool allow_empty = false);
void write_weak_tsv(const std::filesystem::path& path,
                    const WeakAnnotations& ann, const Vocabulary& vocab);

/// Clip list of a partition: `clip_id<TAB>duration_s` lines.
std::vector<std::pair<std::string, double>> parse_clip_list(std::string_view text);
std::string format_clip_list(const std::vector<std::pair<std::string, double>>& clips);

// ---------------------------------------------------------------------------
// Synthetic datasets.
// ---------------------------------------------------------------------------

inline constexpr double kSpectralFrameRate = 60.4;
inline constexpr double kPretrainedFrameRate = kSpectralFrameRate / 4.0;

/// Output frames (pretrained rate) for a clip duration; spectral frames are
/// four times this.
std::size_t output_frames_for(double duration_s);

struct SynthSpec {
  std::size_t n_weak = 120;
  std::size_t n_unlabeled = 120;
  std::size_t n_val = 60;
  std::size_t n_test = 60;
  double clip_duration = 2.5;
  /// Fraction of clips drawn shorter, uniformly in [duration/2, duration).
  double short_fraction = 0.1;
  std::vector<std::string> classes;  // empty selects class0..class9
  std::size_t pre_audio_dim = 128;
  std::size_t pre_visual_dim = 512;
  std::size_t events_min = 1;
  std::size_t events_max = 3;
  double event_len_min = 0.5;
  double event_len_max = 5.0;
  double noise = 1.0;
  double spectral_snr = 2.0;
  double audio_snr = 0.5;
  double visual_snr = 1.0;
  bool visual_informative = true;
  std::uint64_t seed = 1;

  std::vector<std::string> class_names() const;
  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_kv() const;
};

struct SynthSummary {
  std::map<std::string, std::size_t> clips_per_partition;
};

inline constexpr const char* kPartitions[] = {"weak", "unlabeled", "val", "test"};

/// Writes features/, per-partition clip lists, weak and strong TSVs, the
/// hidden truth sidecar and manifest.txt into `dir` (created if missing).
SynthSummary synthesize_dataset(const SynthSpec& spec,
                                const std::filesystem::path& dir);

/// Per-class spectral templates [n_classes, 128] and direction vectors used
/// by the generator for `spec`.
struct SynthSignatures {
  Tensor<float> spectral;    // [n, 128]
  Tensor<float> pre_audio;   // [n, Da], unit rows
  Tensor<float> pre_visual;  // [n, Dv], unit rows
};
SynthSignatures synth_signatures(const SynthSpec& spec);

// ---------------------------------------------------------------------------
// Loading.
// ---------------------------------------------------------------------------

struct ClipRecord {
  std::string id;
  double duration = 0.0;
  Tensor<float> spectral;    // [T, 128]
  Tensor<float> pre_audio;   // [T/4, Da]
  Tensor<float> pre_visual;  // [T/4, Dv]

  std::size_t output_frames() const;
};

struct Partition {
  std::string name;
  std::vector<ClipRecord> clips;
  /// Weak partition only.
  TagsByClip weak_labels;
  /// Validation and test partitions only.
  EventsByClip strong;
  std::map<std::string, double> durations;
};

struct DatasetInfo {
  Vocabulary vocab;
  std::size_t pre_audio_dim = 0;
  std::size_t pre_visual_dim = 0;
  bool has_spectral = false;
  bool has_pre_audio = false;
  bool has_pre_visual = false;
};

struct Dataset {
  DatasetInfo info;
  Partition weak, unlabeled, val, test;
  std::vector<std::string> warnings;

  const Partition& partition(const std::string& name) const;
};

DatasetInfo read_dataset_info(const std::filesystem::path& dir);
Dataset load_split(const std::filesystem::path& dir);
/// Loads only one partition (features and its annotations).
Partition load_partition(const std::filesystem::path& dir,
                         const std::string& name, DatasetInfo* info = nullptr);
/// Strong truth of every clip from the hidden sidecar (diagnostics only).
StrongAnnotations load_hidden_truth(const std::filesystem::path& dir,
                                    const Vocabulary& vocab);

/// 64-bit FNV-1a, used for short content fingerprints.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace avsed
