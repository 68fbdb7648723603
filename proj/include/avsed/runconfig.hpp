// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "avsed/crnn.hpp"
#include "avsed/dataio.hpp"
#include "avsed/gradcheck_suite.hpp"
#include "avsed/kv.hpp"
#include "avsed/meanteacher.hpp"
#include "avsed/metrics.hpp"

namespace avsed {

enum class KeyKind { kString, kBool, kCount, kU64, kReal, kProfile };

struct ConfigKey {
  const char* key;
  KeyKind kind;
  const char* desk;
  const char* full;
  const char* help;
};

/// Every accepted key, in echo order.
const std::vector<ConfigKey>& config_schema();

/// Flat key=value run configuration. Defaults come from the named profile
/// ("desk" or "full"); every key is checked against the schema.
class RunConfig {
 public:
  explicit RunConfig(const std::string& profile = "desk");

  /// Profile from the file (if it sets one), then the file's keys.
  static RunConfig from_file(const std::filesystem::path& path);
  static RunConfig from_text(std::string_view text, const std::string& source);

  /// Rejects unknown keys and values that do not parse as the key's kind.
  void set(const std::string& key, const std::string& value);
  void apply(const std::map<std::string, std::string>& kv);

  const std::string& get(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;

  const std::string& profile() const { return values_.at("profile"); }

  /// All keys, defaults included, in schema order.
  KeyValues resolved() const;
  std::string to_text() const;

  SynthSpec synth_spec() const;
  /// Model settings; class count and pretrained widths come from `info`.
  CrnnConfig model_config(const DatasetInfo& info) const;
  TrainRunConfig train_config() const;
  EvalConfig eval_config() const;
  GradCheckSuiteOptions gradcheck_options() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace avsed
