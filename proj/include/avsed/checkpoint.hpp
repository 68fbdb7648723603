// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "avsed/crnn.hpp"
#include "avsed/kv.hpp"

namespace avsed {

inline constexpr const char* kCheckpointFormat = "avsed-checkpoint/1";
/// Prefix of metadata records; the record name is `@meta/<key>=<value>`.
inline constexpr const char* kMetaPrefix = "@meta/";

struct LoadedCheckpoint {
  Crnn<float> model;
  /// Every metadata entry, including `config.*`, `format`, `fusion_order`.
  std::map<std::string, std::string> meta;
};

/// Parameters, batch-norm buffers and header metadata in one feature
/// container. `extra` entries land in the header next to the config.
void save_checkpoint(const std::filesystem::path& path, Crnn<float>& model,
                     const KeyValues& extra = {});
std::string encode_checkpoint(Crnn<float>& model, const KeyValues& extra = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace avsed
