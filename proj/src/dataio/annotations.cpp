// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <charconv>

#include "avsed/dataio.hpp"
#include "avsed/errors.hpp"
#include "avsed/kv.hpp"

namespace avsed {
namespace {

struct Line {
  std::size_t number;
  std::string_view text;
};

std::vector<Line> split_lines(std::string_view text) {
  std::vector<Line> lines;
  std::size_t start = 0, number = 1;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back({number++, line});
    start = end + 1;
  }
  return lines;
}

std::string at_line(std::size_t n) { return ", line " + std::to_string(n); }

bool is_number(std::string_view s) {
  s = trim(s);
  if (s.empty()) return false;
  double v;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc() && p == s.data() + s.size();
}

double field_double(std::string_view s, const char* what, std::size_t line) {
  s = trim(s);
  double v;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size())
    throw ParseError(std::string("bad ") + what + " '" + std::string(s) + "'" +
                     at_line(line));
  return v;
}

void check_clip_id(std::string_view id, std::size_t line) {
  if (id.empty()) throw ParseError("empty clip id" + at_line(line));
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw ConfigError("class vocabulary is empty");
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& n = names_[i];
    if (n.empty() || n.find_first_of("\t\n\r,=") != std::string::npos ||
        trim(n) != n)
      throw ConfigError("invalid class name '" + n + "'");
    if (!index_.emplace(n, i).second)
      throw ConfigError("duplicate class name '" + n + "'");
  }
}

std::size_t Vocabulary::id(const std::string& label, std::size_t line) const {
  auto it = index_.find(label);
  if (it == index_.end())
    throw DataError("unknown label '" + label + "'" +
                    (line ? at_line(line) : std::string()) +
                    "; vocabulary: " + joined(','));
  return it->second;
}

std::string Vocabulary::joined(char sep) const {
  std::string s;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (i) s += sep;
    s += names_[i];
  }
  return s;
}

void StrongAnnotations::add_clip(const std::string& clip) {
  if (!events.count(clip)) {
    clips.push_back(clip);
    events[clip];
  }
}

StrongAnnotations parse_strong_tsv(std::string_view text, const Vocabulary& vocab) {
  StrongAnnotations ann;
  for (const auto& [n, line] : split_lines(text)) {
    if (trim(line).empty()) continue;
    const auto f = split(line, '\t');
    if (n == 1 && f.size() >= 2 && !trim(f[1]).empty() && !is_number(f[1]))
      continue;  // header
    const std::string clip(trim(f[0]));
    check_clip_id(clip, n);
    const bool bare = std::all_of(f.begin() + 1, f.end(),
                                  [](const std::string& s) { return trim(s).empty(); });
    if (bare) {
      ann.add_clip(clip);
      continue;
    }
    if (f.size() != 4)
      throw ParseError("expected 4 tab-separated fields, got " +
                       std::to_string(f.size()) + at_line(n));
    Event e;
    e.onset = field_double(f[1], "onset", n);
    e.offset = field_double(f[2], "offset", n);
    if (e.onset < 0.0) throw ParseError("negative onset" + at_line(n));
    if (!(e.offset > e.onset)) throw ParseError("offset before onset" + at_line(n));
    e.cls = vocab.id(std::string(trim(f[3])), n);
    ann.add_clip(clip);
    ann.events[clip].push_back(e);
  }
  return ann;
}

std::string format_strong_tsv(const StrongAnnotations& ann, const Vocabulary& vocab) {
  std::string out = std::string(kStrongHeader) + "\n";
  for (const auto& clip : ann.clips) {
    auto it = ann.events.find(clip);
    if (it == ann.events.end() || it->second.empty()) {
      out += clip + "\t\t\t\n";
      continue;
    }
    for (const auto& e : it->second)
      out += clip + "\t" + format_double(e.onset) + "\t" + format_double(e.offset) +
             "\t" + vocab.name(e.cls) + "\n";
  }
  return out;
}

StrongAnnotations read_strong_tsv(const std::filesystem::path& path,
                                  const Vocabulary& vocab) {
  try {
    return parse_strong_tsv(read_text_file(path), vocab);
  } catch (const ValidationError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_strong_tsv(const std::filesystem::path& path,
                      const StrongAnnotations& ann, const Vocabulary& vocab) {
  write_text_file(path, format_strong_tsv(ann, vocab));
}

WeakAnnotations parse_weak_tsv(std::string_view text, const Vocabulary& vocab,
                               bool allow_empty) {
  WeakAnnotations ann;
  for (const auto& [n, line] : split_lines(text)) {
    if (trim(line).empty()) continue;
    const auto f = split(line, '\t');
    if (n == 1 && trim(f[0]) == "filename") continue;  // header
    if (f.size() > 2)
      throw ParseError("expected 2 tab-separated fields, got " +
                       std::to_string(f.size()) + at_line(n));
    const std::string clip(trim(f[0]));
    check_clip_id(clip, n);
    std::set<std::size_t> labels;
    if (f.size() == 2)
      for (const auto& piece : split(f[1], ',')) {
        const auto label = trim(piece);
        if (!label.empty()) labels.insert(vocab.id(std::string(label), n));
      }
    if (labels.empty() && !allow_empty) throw ParseError("no labels" + at_line(n));
    if (ann.labels.count(clip))
      throw ParseError("duplicate clip '" + clip + "'" + at_line(n));
    ann.clips.push_back(clip);
    ann.labels[clip] = std::move(labels);
  }
  return ann;
}

std::string format_weak_tsv(const WeakAnnotations& ann, const Vocabulary& vocab) {
  std::string out;
  for (const auto& clip : ann.clips) {
    out += clip + "\t";
    auto it = ann.labels.find(clip);
    if (it != ann.labels.end()) {
      bool first = true;
      for (std::size_t c : it->second) {
        if (!first) out += ",";
        out += vocab.name(c);
        first = false;
      }
    }
    out += "\n";
  }
  return out;
}

WeakAnnotations read_weak_tsv(const std::filesystem::path& path,
                              const Vocabulary& vocab, bool allow_empty) {
  try {
    return parse_weak_tsv(read_text_file(path), vocab, allow_empty);
  } catch (const ValidationError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_weak_tsv(const std::filesystem::path& path,
                    const WeakAnnotations& ann, const Vocabulary& vocab) {
  write_text_file(path, format_weak_tsv(ann, vocab));
}

std::vector<std::pair<std::string, double>> parse_clip_list(std::string_view text) {
  std::vector<std::pair<std::string, double>> clips;
  for (const auto& [n, line] : split_lines(text)) {
    if (trim(line).empty()) continue;
    const auto f = split(line, '\t');
    if (f.size() != 2)
      throw ParseError("expected clip id and duration" + at_line(n));
    const std::string clip(trim(f[0]));
    check_clip_id(clip, n);
    const double d = field_double(f[1], "duration", n);
    if (!(d > 0.0)) throw ParseError("non-positive duration" + at_line(n));
    clips.emplace_back(clip, d);
  }
  return clips;
}

std::string format_clip_list(const std::vector<std::pair<std::string, double>>& clips) {
  std::string out;
  for (const auto& [id, d] : clips) out += id + "\t" + format_double(d) + "\n";
  return out;
}

}  // namespace avsed
