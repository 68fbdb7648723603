// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace avsed {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses flat `key=value` text. Blank lines and lines starting with '#' are
/// skipped; whitespace around keys and values is trimmed. Duplicate keys are
/// an error.
std::map<std::string, std::string> parse_kv_text(std::string_view text,
                                                 const std::string& source);
std::map<std::string, std::string> read_kv_file(const std::filesystem::path& p);
void write_kv_file(const std::filesystem::path& p, const KeyValues& kv);
std::string format_kv(const KeyValues& kv);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

double parse_double(std::string_view s, const std::string& what);
std::int64_t parse_int(std::string_view s, const std::string& what);
std::uint64_t parse_u64(std::string_view s, const std::string& what);
bool parse_bool(std::string_view s, const std::string& what);

std::string_view trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

std::string read_text_file(const std::filesystem::path& p);
void write_text_file(const std::filesystem::path& p, std::string_view text);

}  // namespace avsed
