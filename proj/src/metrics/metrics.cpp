// SPDX-License-Identifier: Apache-2.0
#include "avsed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "avsed/errors.hpp"

namespace avsed {
namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

void finish_micro(F1Report& r) {
  r.precision = r.total.precision();
  r.recall = r.total.recall();
  r.f1 = r.total.f1();
}

void check_class(const Event& e, std::size_t n_classes, const std::string& clip) {
  if (e.cls >= n_classes)
    throw DataError("event class index " + std::to_string(e.cls) +
                    " out of range for " + std::to_string(n_classes) +
                    " classes in clip " + clip);
}

template <typename A, typename B>
std::string symmetric_difference(const std::map<std::string, A>& a,
                                 const std::map<std::string, B>& b) {
  std::vector<std::string> only_a, only_b;
  for (const auto& [k, _] : a)
    if (!b.count(k)) only_a.push_back(k);
  for (const auto& [k, _] : b)
    if (!a.count(k)) only_b.push_back(k);
  std::string msg;
  auto list = [&msg](const char* what, const std::vector<std::string>& v) {
    if (v.empty()) return;
    if (!msg.empty()) msg += "; ";
    msg += what;
    for (std::size_t i = 0; i < v.size(); ++i) msg += (i ? ", " : " ") + v[i];
  };
  list("only in predictions:", only_a);
  list("only in references:", only_b);
  return msg;
}

double overlap(double a0, double a1, double b0, double b1) {
  return std::min(a1, b1) - std::max(a0, b0);
}

}  // namespace

FrameDecisions::FrameDecisions(std::size_t t, std::size_t n, double duration)
    : frames(t), n_classes(n), frame_duration(duration), data(t * n, 0) {
  if (!(duration > 0.0))
    throw ConfigError("frame duration must be positive");
}

std::vector<std::uint8_t> FrameDecisions::column(std::size_t c) const {
  std::vector<std::uint8_t> col(frames);
  for (std::size_t t = 0; t < frames; ++t) col[t] = at(t, c);
  return col;
}

double Counts::precision() const { return ratio(tp, tp + fp); }
double Counts::recall() const { return ratio(tp, tp + fn); }
double Counts::f1() const { return ratio(2 * tp, 2 * tp + fp + fn); }

Counts& Counts::operator+=(const Counts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

FrameDecisions threshold(std::span<const float> probs, std::size_t frames,
                         std::size_t n_classes, double frame_duration,
                         double tau) {
  if (probs.size() < frames * n_classes)
    throw ShapeError("threshold: " + std::to_string(probs.size()) +
                     " probabilities for " + std::to_string(frames) + "x" +
                     std::to_string(n_classes) + " decisions");
  FrameDecisions d(frames, n_classes, frame_duration);
  for (std::size_t i = 0; i < frames * n_classes; ++i)
    d.data[i] = probs[i] > tau ? 1 : 0;
  return d;
}

std::set<std::size_t> threshold_tags(std::span<const float> clip_probs,
                                     double tau) {
  std::set<std::size_t> tags;
  for (std::size_t c = 0; c < clip_probs.size(); ++c)
    if (clip_probs[c] > tau) tags.insert(c);
  return tags;
}

std::vector<std::uint8_t> median_filter(std::span<const std::uint8_t> column,
                                        std::size_t window) {
  if (window == 0 || window % 2 == 0)
    throw ConfigError("median filter window must be odd, got " +
                      std::to_string(window));
  const std::size_t n = column.size(), half = window / 2;
  // Prefix sums of active frames.
  std::vector<std::size_t> pre(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) pre[i + 1] = pre[i] + (column[i] ? 1 : 0);
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n, i + half + 1);
    const std::size_t ones = pre[hi] - pre[lo];
    out[i] = 2 * ones > hi - lo ? 1 : 0;
  }
  return out;
}

FrameDecisions median_filter(const FrameDecisions& decisions,
                             std::size_t window) {
  FrameDecisions out = decisions;
  for (std::size_t c = 0; c < decisions.n_classes; ++c) {
    auto col = median_filter(decisions.column(c), window);
    for (std::size_t t = 0; t < decisions.frames; ++t) out.at(t, c) = col[t];
  }
  return out;
}

EventList decode_events(const FrameDecisions& d) {
  EventList events;
  for (std::size_t c = 0; c < d.n_classes; ++c) {
    std::size_t t = 0;
    while (t < d.frames) {
      if (!d.at(t, c)) {
        ++t;
        continue;
      }
      const std::size_t first = t;
      while (t < d.frames && d.at(t, c)) ++t;
      events.push_back({static_cast<double>(first) * d.frame_duration,
                        static_cast<double>(t) * d.frame_duration, c});
    }
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) {
                     return a.onset < b.onset ||
                            (a.onset == b.onset && a.cls < b.cls);
                   });
  return events;
}

FrameDecisions rasterize(const EventList& events, std::size_t frames,
                         std::size_t n_classes, double frame_duration) {
  FrameDecisions d(frames, n_classes, frame_duration);
  for (const Event& e : events) {
    check_class(e, n_classes, "<rasterize>");
    for (std::size_t t = 0; t < frames; ++t) {
      const double f0 = static_cast<double>(t) * frame_duration;
      if (overlap(e.onset, e.offset, f0, f0 + frame_duration) > kTimeTolerance)
        d.at(t, e.cls) = 1;
    }
  }
  return d;
}

F1Report clip_micro_f1(const TagsByClip& predicted, const TagsByClip& reference,
                       std::size_t n_classes) {
  const std::string diff = symmetric_difference(predicted, reference);
  if (!diff.empty()) throw DataError("clip sets differ: " + diff);
  F1Report r;
  r.metric = "clip_micro";
  r.per_class.assign(n_classes, {});
  for (const auto& [clip, ref] : reference) {
    const auto& pred = predicted.at(clip);
    for (std::size_t c = 0; c < n_classes; ++c) {
      const bool p = pred.count(c) > 0, g = ref.count(c) > 0;
      Counts& k = r.per_class[c];
      if (p && g) ++k.tp;
      else if (p) ++k.fp;
      else if (g) ++k.fn;
    }
    for (std::size_t c : pred)
      if (c >= n_classes)
        throw DataError("predicted tag " + std::to_string(c) +
                        " out of range in clip " + clip);
    for (std::size_t c : ref)
      if (c >= n_classes)
        throw DataError("reference tag " + std::to_string(c) +
                        " out of range in clip " + clip);
  }
  for (const auto& k : r.per_class) r.total += k;
  finish_micro(r);
  return r;
}

F1Report segment_micro_f1(const EventsByClip& predicted,
                          const EventsByClip& reference,
                          const std::map<std::string, double>& durations,
                          std::size_t n_classes, double segment_s) {
  if (!(segment_s > 0.0)) throw ConfigError("segment length must be positive");
  for (const auto* side : {&predicted, &reference})
    for (const auto& [clip, _] : *side)
      if (!durations.count(clip))
        throw DataError("no duration known for clip " + clip);

  F1Report r;
  r.metric = "segment_micro";
  r.per_class.assign(n_classes, {});
  static const EventList kNone;

  for (const auto& [clip, duration] : durations) {
    if (!(duration > 0.0))
      throw DataError("non-positive duration for clip " + clip);
    const std::size_t n_seg = static_cast<std::size_t>(
        std::ceil(duration / segment_s - kTimeTolerance));
    auto activity = [&](const EventsByClip& side, const char* what) {
      auto it = side.find(clip);
      const EventList& events = it == side.end() ? kNone : it->second;
      std::vector<std::uint8_t> act(n_seg * n_classes, 0);
      for (Event e : events) {
        check_class(e, n_classes, clip);
        if (e.onset < 0.0 || e.offset > duration + kTimeTolerance) {
          r.warnings.push_back(std::string(what) + " event in " + clip +
                               " clipped to [0, " + std::to_string(duration) +
                               "]");
          e.onset = std::max(e.onset, 0.0);
          e.offset = std::min(e.offset, duration);
        }
        for (std::size_t s = 0; s < n_seg; ++s) {
          const double s0 = static_cast<double>(s) * segment_s;
          const double s1 = std::min(s0 + segment_s, duration);
          if (overlap(e.onset, e.offset, s0, s1) > kTimeTolerance)
            act[s * n_classes + e.cls] = 1;
        }
      }
      return act;
    };
    const auto pa = activity(predicted, "predicted");
    const auto ra = activity(reference, "reference");
    for (std::size_t i = 0; i < pa.size(); ++i) {
      Counts& k = r.per_class[i % n_classes];
      if (pa[i] && ra[i]) ++k.tp;
      else if (pa[i]) ++k.fp;
      else if (ra[i]) ++k.fn;
    }
  }
  for (const auto& k : r.per_class) r.total += k;
  finish_micro(r);
  return r;
}

double EventCollars::offset_for(const Event& reference) const {
  return std::max(offset_min, offset_ratio * (reference.offset - reference.onset));
}

bool events_compatible(const Event& reference, const Event& prediction,
                       const EventCollars& collars) {
  return reference.cls == prediction.cls &&
         std::abs(prediction.onset - reference.onset) <=
             collars.onset + kTimeTolerance &&
         std::abs(prediction.offset - reference.offset) <=
             collars.offset_for(reference) + kTimeTolerance;
}

std::vector<std::pair<std::size_t, std::size_t>> match_events(
    const EventList& reference, const EventList& predicted,
    const EventCollars& collars) {
  auto by_onset = [](const EventList& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) {
      return v[a].onset < v[b].onset;
    });
    return idx;
  };
  const auto ref_order = by_onset(reference);
  const auto pred_order = by_onset(predicted);
  std::vector<bool> used(predicted.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t ri : ref_order) {
    for (std::size_t pi : pred_order) {
      if (used[pi] || !events_compatible(reference[ri], predicted[pi], collars))
        continue;
      used[pi] = true;
      pairs.emplace_back(ri, pi);
      break;
    }
  }
  return pairs;
}

F1Report event_macro_f1(const EventsByClip& predicted,
                        const EventsByClip& reference, std::size_t n_classes,
                        const EventCollars& collars) {
  F1Report r;
  r.metric = "event_macro";
  r.per_class.assign(n_classes, {});
  std::set<std::string> clips;
  for (const auto& [k, _] : predicted) clips.insert(k);
  for (const auto& [k, _] : reference) clips.insert(k);
  static const EventList kNone;

  for (const auto& clip : clips) {
    auto pit = predicted.find(clip);
    auto rit = reference.find(clip);
    const EventList& pred = pit == predicted.end() ? kNone : pit->second;
    const EventList& ref = rit == reference.end() ? kNone : rit->second;
    for (const auto& e : pred) check_class(e, n_classes, clip);
    for (const auto& e : ref) check_class(e, n_classes, clip);
    for (std::size_t c = 0; c < n_classes; ++c) {
      EventList pc, rc;
      for (const auto& e : pred)
        if (e.cls == c) pc.push_back(e);
      for (const auto& e : ref)
        if (e.cls == c) rc.push_back(e);
      if (pc.empty() && rc.empty()) continue;
      const auto pairs = match_events(rc, pc, collars);
      Counts& k = r.per_class[c];
      k.tp += pairs.size();
      k.fp += pc.size() - pairs.size();
      k.fn += rc.size() - pairs.size();
      for (const auto& [ri, pi] : pairs) r.matches.push_back({clip, rc[ri], pc[pi]});
    }
  }

  r.class_scored.assign(n_classes, false);
  std::size_t scored = 0;
  double p = 0.0, rec = 0.0, f = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const Counts& k = r.per_class[c];
    r.total += k;
    if (k.tp + k.fp + k.fn == 0) continue;
    r.class_scored[c] = true;
    ++scored;
    p += k.precision();
    rec += k.recall();
    f += k.f1();
  }
  if (scored > 0) {
    r.precision = p / static_cast<double>(scored);
    r.recall = rec / static_cast<double>(scored);
    r.f1 = f / static_cast<double>(scored);
  }
  return r;
}

EventsByClip predict_events(const std::map<std::string, ClipScores>& scores,
                            std::size_t n_classes, const EvalConfig& config) {
  EventsByClip out;
  for (const auto& [clip, s] : scores) {
    if (s.frame_probs.size() != s.frames * n_classes)
      throw ShapeError("clip " + clip + ": " +
                       std::to_string(s.frame_probs.size()) +
                       " frame probabilities for " + std::to_string(s.frames) +
                       " frames x " + std::to_string(n_classes) + " classes");
    auto d = threshold(s.frame_probs, s.frames, n_classes,
                       config.frame_duration, config.tau);
    out[clip] = decode_events(median_filter(d, config.median_window));
  }
  return out;
}

RunReport evaluate_run(const std::map<std::string, ClipScores>& scores,
                       const EventsByClip& reference,
                       const std::map<std::string, double>& durations,
                       std::size_t n_classes, const EvalConfig& config) {
  RunReport rep;
  rep.predicted_events = predict_events(scores, n_classes, config);
  for (const auto& [clip, s] : scores) {
    if (s.clip_probs.size() != n_classes)
      throw ShapeError("clip " + clip + ": expected " +
                       std::to_string(n_classes) + " clip probabilities, got " +
                       std::to_string(s.clip_probs.size()));
    rep.predicted_tags[clip] = threshold_tags(s.clip_probs, config.tau);
  }
  TagsByClip ref_tags;
  for (const auto& [clip, _] : durations) ref_tags[clip];
  for (const auto& [clip, events] : reference) {
    if (!durations.count(clip))
      throw DataError("no duration known for clip " + clip);
    for (const auto& e : events) ref_tags[clip].insert(e.cls);
  }
  rep.clip = clip_micro_f1(rep.predicted_tags, ref_tags, n_classes);
  rep.segment = segment_micro_f1(rep.predicted_events, reference, durations,
                                 n_classes, config.segment_s);
  rep.event = event_macro_f1(rep.predicted_events, reference, n_classes,
                             config.collars);
  return rep;
}

std::string format_report_row(const std::string& metric, double precision,
                              double recall, double f1, const Counts& k) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%zu\t%zu\t%zu",
                metric.c_str(), precision, recall, f1, k.tp, k.fp, k.fn);
  return buf;
}

std::string format_report(const RunReport& report,
                          const std::vector<std::string>& labels) {
  std::ostringstream os;
  os << kReportHeader << '\n';
  for (const F1Report* r : {&report.clip, &report.segment, &report.event})
    os << format_report_row(r->metric, r->precision, r->recall, r->f1, r->total)
       << '\n';
  for (std::size_t c = 0; c < report.event.per_class.size(); ++c) {
    const Counts& k = report.event.per_class[c];
    const std::string name = c < labels.size() ? labels[c] : std::to_string(c);
    os << format_report_row("event_macro/" + name, k.precision(), k.recall(),
                            k.f1(), k)
       << '\n';
  }
  return os.str();
}

}  // namespace avsed
