// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace avsed {

/// Slack for comparisons on times derived from frame counts.
inline constexpr double kTimeTolerance = 1e-9;

struct Event {
  double onset = 0.0;
  double offset = 0.0;
  std::size_t cls = 0;

  bool operator==(const Event&) const = default;
};

using EventList = std::vector<Event>;
using EventsByClip = std::map<std::string, EventList>;
using TagsByClip = std::map<std::string, std::set<std::size_t>>;

/// Binary [frames, n_classes] decision matrix.
struct FrameDecisions {
  std::size_t frames = 0;
  std::size_t n_classes = 0;
  double frame_duration = 0.0;
  std::vector<std::uint8_t> data;

  FrameDecisions() = default;
  FrameDecisions(std::size_t t, std::size_t n, double duration);

  std::uint8_t& at(std::size_t t, std::size_t c) { return data[t * n_classes + c]; }
  std::uint8_t at(std::size_t t, std::size_t c) const {
    return data[t * n_classes + c];
  }
  std::vector<std::uint8_t> column(std::size_t c) const;
  bool operator==(const FrameDecisions&) const = default;
};

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  // 0/0 is reported as 0 for all three.
  double precision() const;
  double recall() const;
  double f1() const;

  Counts& operator+=(const Counts& o);
  bool operator==(const Counts&) const = default;
};

struct EventMatch {
  std::string clip;
  Event reference;
  Event prediction;
};

struct F1Report {
  std::string metric;
  Counts total;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<Counts> per_class;
  /// Macro reports only: classes with at least one event on either side.
  std::vector<bool> class_scored;
  std::vector<EventMatch> matches;
  std::vector<std::string> warnings;
};

/// Decision is 1 iff prob > tau.
FrameDecisions threshold(std::span<const float> probs, std::size_t frames,
                         std::size_t n_classes, double frame_duration,
                         double tau = 0.5);
std::set<std::size_t> threshold_tags(std::span<const float> clip_probs,
                                     double tau = 0.5);

/// Sliding median over an odd window; edge windows are truncated to the
/// available frames and a tie among an even count resolves to 0.
std::vector<std::uint8_t> median_filter(std::span<const std::uint8_t> column,
                                        std::size_t window);
FrameDecisions median_filter(const FrameDecisions& decisions,
                             std::size_t window);

/// Maximal runs of active frames per class, sorted by onset then class.
EventList decode_events(const FrameDecisions& decisions);

/// Frame t is active for an event overlapping [t d, (t+1) d) by a positive
/// length.
FrameDecisions rasterize(const EventList& events, std::size_t frames,
                         std::size_t n_classes, double frame_duration);

F1Report clip_micro_f1(const TagsByClip& predicted, const TagsByClip& reference,
                       std::size_t n_classes);

/// Clips are the keys of `durations`; a clip missing from either event map
/// has no events there.
F1Report segment_micro_f1(const EventsByClip& predicted,
                          const EventsByClip& reference,
                          const std::map<std::string, double>& durations,
                          std::size_t n_classes, double segment_s = 1.0);

struct EventCollars {
  double onset = 0.2;
  double offset_ratio = 0.2;
  double offset_min = 0.2;

  /// Offset tolerance for a reference event: max(min, ratio * length).
  double offset_for(const Event& reference) const;
};

bool events_compatible(const Event& reference, const Event& prediction,
                       const EventCollars& collars);

/// Greedy one-to-one matching in reference-onset order, each reference
/// taking the earliest-onset unmatched compatible prediction.
std::vector<std::pair<std::size_t, std::size_t>> match_events(
    const EventList& reference, const EventList& predicted,
    const EventCollars& collars);

F1Report event_macro_f1(const EventsByClip& predicted,
                        const EventsByClip& reference, std::size_t n_classes,
                        const EventCollars& collars = {});

struct ClipScores {
  std::vector<float> clip_probs;   // [n]
  std::vector<float> frame_probs;  // [frames, n]
  std::size_t frames = 0;
};

struct EvalConfig {
  double tau = 0.5;
  std::size_t median_window = 7;
  double frame_duration = 4.0 / 60.4;
  double segment_s = 1.0;
  EventCollars collars;
};

struct RunReport {
  F1Report clip;
  F1Report segment;
  F1Report event;
  EventsByClip predicted_events;
  TagsByClip predicted_tags;
};

/// Threshold, median filter, decode, then score all three metrics. Reference
/// clip tags are the classes with at least one reference event.
RunReport evaluate_run(const std::map<std::string, ClipScores>& scores,
                       const EventsByClip& reference,
                       const std::map<std::string, double>& durations,
                       std::size_t n_classes, const EvalConfig& config = {});

/// Events predicted for each clip after threshold, median filter and decode.
EventsByClip predict_events(const std::map<std::string, ClipScores>& scores,
                            std::size_t n_classes, const EvalConfig& config);

/// Line-oriented report: a header, one row per metric, then per-class rows
/// for the event-based macro metric (`event_macro/<label>`).
std::string format_report(const RunReport& report,
                          const std::vector<std::string>& labels);
std::string format_report_row(const std::string& metric, double precision,
                              double recall, double f1, const Counts& counts);

inline constexpr const char* kReportHeader =
    "metric\tprecision\trecall\tf1\ttp\tfp\tfn";

}  // namespace avsed
