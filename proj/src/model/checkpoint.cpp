// SPDX-License-Identifier: Apache-2.0
#include "avsed/checkpoint.hpp"

#include <set>

#include "avsed/dataio.hpp"
#include "avsed/errors.hpp"

namespace avsed {
namespace {

NamedTensor meta_record(const std::string& key, const std::string& value) {
  if (key.find('=') != std::string::npos)
    throw ConfigError("checkpoint metadata key '" + key + "' contains '='");
  return {std::string(kMetaPrefix) + key + "=" + value, Tensor<float>({1})};
}

}  // namespace

std::string encode_checkpoint(Crnn<float>& model, const KeyValues& extra) {
  std::vector<NamedTensor> records;
  records.push_back(meta_record("format", kCheckpointFormat));
  records.push_back(meta_record("fusion_order", kFusionOrder));
  for (const auto& [k, v] : model.config().to_kv())
    records.push_back(meta_record("config." + k, v));
  for (const auto& [k, v] : extra) records.push_back(meta_record(k, v));
  for (auto& p : model.named_params()) records.push_back({p.name, p.param->value});
  for (auto& b : model.named_buffers()) records.push_back({b.name, *b.tensor});
  return encode_feature_container(records);
}

void save_checkpoint(const std::filesystem::path& path, Crnn<float>& model,
                     const KeyValues& extra) {
  write_text_file(path, encode_checkpoint(model, extra));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw DataError("checkpoint not found: " + path.string());
  auto records = read_feature_file(path);
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor<float>> tensors;
  const std::string prefix = kMetaPrefix;
  for (auto& r : records) {
    if (r.name.rfind(prefix, 0) == 0) {
      const auto body = r.name.substr(prefix.size());
      const auto eq = body.find('=');
      if (eq == std::string::npos)
        throw DataError(path.string() + ": malformed metadata record '" + r.name + "'");
      meta[body.substr(0, eq)] = body.substr(eq + 1);
    } else {
      tensors.emplace(r.name, std::move(r.tensor));
    }
  }
  if (meta["format"] != kCheckpointFormat)
    throw DataError(path.string() + ": not a checkpoint (format '" + meta["format"] + "')");
  if (meta["fusion_order"] != kFusionOrder)
    throw DataError(path.string() + ": unsupported fusion order '" +
                    meta["fusion_order"] + "'");
  std::map<std::string, std::string> cfg;
  for (const auto& [k, v] : meta)
    if (k.rfind("config.", 0) == 0) cfg[k.substr(7)] = v;

  LoadedCheckpoint out{Crnn<float>(CrnnConfig::from_kv(cfg)), meta};
  std::set<std::string> used;
  auto fill = [&](const std::string& name, Tensor<float>& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw DataError(path.string() + ": missing tensor '" + name + "'");
    if (it->second.shape() != dst.shape())
      throw ShapeError(path.string() + ": tensor '" + name + "' has shape " +
                       shape_str(it->second.shape()) + ", model expects " +
                       shape_str(dst.shape()));
    dst = it->second;
    used.insert(name);
  };
  for (auto& p : out.model.named_params()) fill(p.name, p.param->value);
  for (auto& b : out.model.named_buffers()) fill(b.name, *b.tensor);
  for (const auto& [name, _] : tensors)
    if (!used.count(name))
      throw DataError(path.string() + ": unexpected tensor '" + name + "'");
  return out;
}

}  // namespace avsed
