// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "avsed/crnn.hpp"
#include "avsed/dataio.hpp"
#include "avsed/errors.hpp"
#include "avsed/kv.hpp"

namespace avsed {
namespace {

namespace fs = std::filesystem;

const std::string& require(const std::map<std::string, std::string>& kv,
                           const std::string& key, const fs::path& where) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw DataError(where.string() + ": manifest key '" + key + "' missing");
  return it->second;
}

std::map<std::string, std::string> read_manifest(const fs::path& dir) {
  const fs::path p = dir / "manifest.txt";
  if (!fs::exists(p)) throw DataError("no dataset manifest at " + p.string());
  return read_kv_file(p);
}

}  // namespace

std::size_t ClipRecord::output_frames() const {
  if (!spectral.empty()) return spectral.dim(0) / kTimeReduction;
  if (!pre_audio.empty()) return pre_audio.dim(0);
  if (!pre_visual.empty()) return pre_visual.dim(0);
  return 0;
}

const Partition& Dataset::partition(const std::string& name) const {
  if (name == "weak") return weak;
  if (name == "unlabeled") return unlabeled;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown partition '" + name +
                    "' (expected weak, unlabeled, val or test)");
}

DatasetInfo read_dataset_info(const fs::path& dir) {
  const auto kv = read_manifest(dir);
  const fs::path m = dir / "manifest.txt";
  if (require(kv, "format", m) != "avsed-dataset/1")
    throw DataError(m.string() + ": unsupported format '" + kv.at("format") + "'");
  DatasetInfo info;
  info.vocab = Vocabulary(split(require(kv, "classes", m), ','));
  const auto bins = parse_int(require(kv, "spectral_bins", m), "spectral_bins");
  if (bins != static_cast<std::int64_t>(kSpectralBins))
    throw ConfigError(m.string() + ": spectral_bins must be 128, got " +
                      std::to_string(bins));
  info.pre_audio_dim = static_cast<std::size_t>(
      parse_u64(require(kv, "pre_audio_dim", m), "pre_audio_dim"));
  info.pre_visual_dim = static_cast<std::size_t>(
      parse_u64(require(kv, "pre_visual_dim", m), "pre_visual_dim"));
  for (const auto& mod : split(require(kv, "modalities", m), ',')) {
    const auto name = trim(mod);
    if (name == "spectral") info.has_spectral = true;
    else if (name == "pre_audio") info.has_pre_audio = true;
    else if (name == "pre_visual") info.has_pre_visual = true;
    else if (!name.empty())
      throw DataError(m.string() + ": unknown modality '" + std::string(name) + "'");
  }
  return info;
}

Partition load_partition(const fs::path& dir, const std::string& name,
                         DatasetInfo* info_out) {
  if (std::find(std::begin(kPartitions), std::end(kPartitions), name) ==
      std::end(kPartitions))
    throw ConfigError("unknown partition '" + name + "'");
  const auto kv = read_manifest(dir);
  const fs::path m = dir / "manifest.txt";
  const DatasetInfo info = read_dataset_info(dir);
  if (info_out) *info_out = info;
  const fs::path features = dir / require(kv, "features_dir", m);

  Partition part;
  part.name = name;
  const auto list = parse_clip_list(read_text_file(dir / require(kv, name + ".clips", m)));
  for (const auto& [id, duration] : list) {
    if (part.durations.count(id))
      throw DataError("duplicate clip " + id + " in partition " + name);
    part.durations[id] = duration;
    const fs::path file = features / (id + ".ftb");
    if (!fs::exists(file))
      throw DataError("clip " + id + ": missing feature file " + file.string());
    ClipRecord rec;
    rec.id = id;
    rec.duration = duration;
    for (auto& r : read_feature_file(file)) {
      if (r.name == "spectral") rec.spectral = std::move(r.tensor);
      else if (r.name == "pre_audio") rec.pre_audio = std::move(r.tensor);
      else if (r.name == "pre_visual") rec.pre_visual = std::move(r.tensor);
    }
    auto need = [&](bool wanted, const Tensor<float>& t, const char* what,
                    std::size_t dim) {
      if (!wanted) return;
      if (t.empty())
        throw DataError("clip " + id + ": missing modality " + what);
      if (t.ndim() != 2 || t.dim(1) != dim)
        throw ShapeError("clip " + id + ": " + what + " has shape " +
                         shape_str(t.shape()) + ", expected [*, " +
                         std::to_string(dim) + "]");
    };
    need(info.has_spectral, rec.spectral, "spectral", kSpectralBins);
    need(info.has_pre_audio, rec.pre_audio, "pre_audio", info.pre_audio_dim);
    need(info.has_pre_visual, rec.pre_visual, "pre_visual", info.pre_visual_dim);
    if (!rec.spectral.empty() && rec.spectral.dim(0) % kTimeReduction != 0)
      throw AlignmentError("clip " + id + ": spectral frame count " +
                           std::to_string(rec.spectral.dim(0)) +
                           " is not divisible by 4");
    const std::size_t expect = rec.output_frames();
    for (const auto* t : {&rec.pre_audio, &rec.pre_visual}) {
      if (t->empty()) continue;
      if (t->dim(0) != expect)
        throw AlignmentError("alignment violation: expected " + std::to_string(expect) +
                             ", got " + std::to_string(t->dim(0)) + " (clip " + id +
                             ", " + (t == &rec.pre_audio ? "pre_audio" : "pre_visual") +
                             ")");
    }
    if (!info.has_spectral) rec.spectral = Tensor<float>();
    if (!info.has_pre_audio) rec.pre_audio = Tensor<float>();
    if (!info.has_pre_visual) rec.pre_visual = Tensor<float>();
    part.clips.push_back(std::move(rec));
  }

  if (name == "weak") {
    const auto weak = read_weak_tsv(dir / require(kv, "weak.labels", m), info.vocab);
    for (const auto& [clip, labels] : weak.labels) {
      if (!part.durations.count(clip))
        throw DataError("weak label for clip " + clip + " outside the weak partition");
      part.weak_labels[clip] = labels;
    }
    for (const auto& [clip, _] : part.durations)
      if (!part.weak_labels.count(clip))
        throw DataError("weak clip " + clip + " has no labels");
  } else if (name == "val" || name == "test") {
    const auto strong = read_strong_tsv(dir / require(kv, name + ".strong", m), info.vocab);
    for (const auto& [clip, _] : part.durations) part.strong[clip];
    for (const auto& [clip, events] : strong.events) {
      auto it = part.durations.find(clip);
      if (it == part.durations.end())
        throw DataError("strong annotation for clip " + clip + " outside partition " + name);
      for (const auto& e : events)
        if (e.offset > it->second + kTimeTolerance)
          throw DataError("clip " + clip + ": event offset " + format_double(e.offset) +
                          " beyond duration " + format_double(it->second));
      part.strong[clip] = events;
    }
  }
  return part;
}

Dataset load_split(const fs::path& dir) {
  Dataset ds;
  ds.weak = load_partition(dir, "weak", &ds.info);
  ds.unlabeled = load_partition(dir, "unlabeled");
  ds.val = load_partition(dir, "val");
  ds.test = load_partition(dir, "test");
  std::set<std::string> seen;
  for (const Partition* p : {&ds.weak, &ds.unlabeled, &ds.val, &ds.test})
    for (const auto& c : p->clips)
      if (!seen.insert(c.id).second)
        throw DataError("clip " + c.id + " appears in more than one partition");
  return ds;
}

StrongAnnotations load_hidden_truth(const fs::path& dir, const Vocabulary& vocab) {
  const auto kv = read_manifest(dir);
  return read_strong_tsv(dir / require(kv, "hidden.strong", dir / "manifest.txt"), vocab);
}

}  // namespace avsed
