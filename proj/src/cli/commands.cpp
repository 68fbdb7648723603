// SPDX-License-Identifier: Apache-2.0
#include "avsed/commands.hpp"

#include <cinttypes>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "avsed/errors.hpp"

namespace avsed {
namespace {

namespace fs = std::filesystem;

void say(const CommandContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << '\n' << std::flush;
}

const fs::path& require_out(const CommandContext& ctx, const char* verb) {
  if (ctx.out.empty()) throw ConfigError(std::string(verb) + " needs --out <dir>");
  return ctx.out;
}

fs::path require_path(const RunConfig& cfg, const char* key, const char* verb) {
  const std::string& v = cfg.get(key);
  if (v.empty())
    throw ConfigError(std::string(verb) + " needs '" + key + "' (config key or --" + key + ")");
  return v;
}

std::string split_name(const RunConfig& cfg) {
  const std::string& s = cfg.get("split");
  if (s != "val" && s != "test")
    throw ConfigError("split must be val or test, got '" + s + "'");
  return s;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

KeyValues checkpoint_meta(const RunConfig& cfg, const DatasetInfo& info, const char* role,
                          const TrainResult& r) {
  return {
      {"role", role},
      {"classes", info.vocab.joined(',')},
      {"seed", cfg.get("seed")},
      {"epochs", std::to_string(r.log.size())},
      {"steps", std::to_string(r.log.empty() ? 0 : r.log.back().step)},
  };
}

double selection_score(const RunReport& r, const std::string& metric) {
  if (metric == "clip") return r.clip.f1;
  if (metric == "segment") return r.segment.f1;
  if (metric == "event") return r.event.f1;
  throw ConfigError("experiment.selection_metric must be clip, segment or event, got '" +
                    metric + "'");
}

}  // namespace

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
    if (!force && !fs::is_empty(dir))
      throw ConfigError("output directory " + dir.string() + " is not empty (use --force)");
  }
  fs::create_directories(dir);
}

int cmd_generate(const CommandContext& ctx) {
  const fs::path& out = require_out(ctx, "generate");
  const SynthSpec spec = ctx.config.synth_spec();
  prepare_output_dir(out, ctx.force);
  const SynthSummary summary = synthesize_dataset(spec, out);
  write_text_file(out / kRunConfigFile, ctx.config.to_text());
  for (const char* p : kPartitions)
    say(ctx, std::string(p) + "\t" + std::to_string(summary.clips_per_partition.at(p)) + " clips");
  say(ctx, "manifest fnv1a64 " + hex64(fnv1a64(read_text_file(out / "manifest.txt"))));
  return 0;
}

int cmd_train(const CommandContext& ctx) {
  const fs::path& out = require_out(ctx, "train");
  const fs::path data_dir = require_path(ctx.config, "dataset", "train");
  const TrainRunConfig run = ctx.config.train_config();
  const Dataset data = load_split(data_dir);
  const CrnnConfig model = ctx.config.model_config(data.info);
  for (const auto& w : data.warnings) say(ctx, "warning: " + w);
  prepare_output_dir(out, ctx.force);
  write_text_file(out / kRunConfigFile, ctx.config.to_text());

  say(ctx, kEpochLogHeader);
  TrainResult r = train(model, run, data, [&](const EpochRecord& e) {
    const std::string text = format_epoch_log({e});
    say(ctx, text.substr(text.find('\n') + 1, text.size() - text.find('\n') - 2));
  });
  for (const auto& w : r.warnings) say(ctx, "warning: " + w);
  save_checkpoint(out / "student.ckpt", r.student, checkpoint_meta(ctx.config, data.info, "student", r));
  save_checkpoint(out / "teacher.ckpt", r.teacher, checkpoint_meta(ctx.config, data.info, "teacher", r));
  write_text_file(out / "train_log.tsv", format_epoch_log(r.log, ctx.config.resolved()));
  say(ctx, "wrote " + (out / "student.ckpt").string() + " and teacher.ckpt");
  return 0;
}

std::vector<std::string> checkpoint_mismatches(const LoadedCheckpoint& ckpt,
                                               const DatasetInfo& info) {
  std::vector<std::string> diff;
  const CrnnConfig& c = ckpt.model.config();
  auto note = [&](const std::string& key, const std::string& a, const std::string& b) {
    diff.push_back(key + " (checkpoint " + a + ", dataset " + b + ")");
  };
  if (c.n_classes != info.vocab.size())
    note("n_classes", std::to_string(c.n_classes), std::to_string(info.vocab.size()));
  if (auto it = ckpt.meta.find("classes");
      it != ckpt.meta.end() && c.n_classes == info.vocab.size() && it->second != info.vocab.joined(','))
    note("classes", it->second, info.vocab.joined(','));
  auto modality = [&](const char* key, bool used, bool available) {
    if (used && !available) note(key, "true", "missing");
  };
  modality("use_spectral", c.use_spectral, info.has_spectral);
  modality("use_pre_audio", c.use_pre_audio, info.has_pre_audio);
  modality("use_pre_visual", c.use_pre_visual, info.has_pre_visual);
  if (c.use_pre_audio && info.has_pre_audio && c.pre_audio_dim != info.pre_audio_dim)
    note("pre_audio_dim", std::to_string(c.pre_audio_dim), std::to_string(info.pre_audio_dim));
  if (c.use_pre_visual && info.has_pre_visual && c.pre_visual_dim != info.pre_visual_dim)
    note("pre_visual_dim", std::to_string(c.pre_visual_dim), std::to_string(info.pre_visual_dim));
  return diff;
}

Predictions predict_partition(Crnn<float>& model, const Partition& part, const EvalConfig& eval,
                              std::size_t batch_size) {
  const std::size_t n = model.config().n_classes;
  const auto scores = score_partition(model, part, batch_size);
  Predictions p;
  p.events = predict_events(scores, n, eval);
  for (const auto& c : part.clips) {
    p.clips.push_back(c.id);
    p.tags[c.id] = threshold_tags(scores.at(c.id).clip_probs, eval.tau);
  }
  return p;
}

void write_predictions(const fs::path& dir, const Predictions& p, const Vocabulary& vocab) {
  StrongAnnotations strong;
  WeakAnnotations weak;
  for (const auto& clip : p.clips) {
    weak.clips.push_back(clip);
    weak.labels[clip] = p.tags.count(clip) ? p.tags.at(clip) : std::set<std::size_t>{};
    auto it = p.events.find(clip);
    if (it != p.events.end() && !it->second.empty()) {
      strong.add_clip(clip);
      strong.events[clip] = it->second;
    }
  }
  write_strong_tsv(dir / kEventsFile, strong, vocab);
  write_weak_tsv(dir / kTagsFile, weak, vocab);
}

Predictions read_predictions(const fs::path& dir, const Vocabulary& vocab) {
  Predictions p;
  const auto weak = read_weak_tsv(dir / kTagsFile, vocab, /*allow_empty=*/true);
  p.clips = weak.clips;
  p.tags = weak.labels;
  for (const auto& clip : p.clips) p.events[clip];
  const auto strong = read_strong_tsv(dir / kEventsFile, vocab);
  for (const auto& [clip, events] : strong.events) {
    if (!p.tags.count(clip))
      throw DataError(dir.string() + ": clip " + clip + " has events but is missing from " +
                      kTagsFile);
    p.events[clip] = events;
  }
  return p;
}

RunReport evaluate_predictions(const Predictions& p, const EventsByClip& reference,
                               const std::map<std::string, double>& durations,
                               std::size_t n_classes, const EvalConfig& eval) {
  std::vector<std::string> only_pred, only_ref;
  for (const auto& [clip, _] : p.tags)
    if (!durations.count(clip)) only_pred.push_back(clip);
  for (const auto& [clip, _] : durations)
    if (!p.tags.count(clip)) only_ref.push_back(clip);
  if (!only_pred.empty() || !only_ref.empty()) {
    auto list = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size() && i < 5; ++i) s += (i ? "," : "") + v[i];
      if (v.size() > 5) s += ",...";
      return s.empty() ? std::string("none") : s;
    };
    throw DataError("clip universe mismatch: only in predictions: " + list(only_pred) +
                    "; only in references: " + list(only_ref));
  }
  RunReport rep;
  rep.predicted_events = p.events;
  rep.predicted_tags = p.tags;
  TagsByClip ref_tags;
  for (const auto& [clip, _] : durations) ref_tags[clip];
  for (const auto& [clip, events] : reference) {
    if (!durations.count(clip)) throw DataError("no duration known for reference clip " + clip);
    for (const auto& e : events) ref_tags[clip].insert(e.cls);
  }
  rep.clip = clip_micro_f1(p.tags, ref_tags, n_classes);
  rep.segment = segment_micro_f1(p.events, reference, durations, n_classes, eval.segment_s);
  rep.event = event_macro_f1(p.events, reference, n_classes, eval.collars);
  return rep;
}

std::string format_table_row(const RunReport& r) {
  return "| " + percent(r.clip.f1) + " | " + percent(r.segment.f1) + " | " + percent(r.event.f1) +
         " |";
}

int cmd_predict(const CommandContext& ctx) {
  const fs::path& out = require_out(ctx, "predict");
  const fs::path data_dir = require_path(ctx.config, "dataset", "predict");
  const fs::path ckpt_path = require_path(ctx.config, "checkpoint", "predict");
  const std::string split = split_name(ctx.config);
  const EvalConfig eval = ctx.config.eval_config();
  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  DatasetInfo info;
  const Partition part = load_partition(data_dir, split, &info);
  const auto diff = checkpoint_mismatches(ckpt, info);
  if (!diff.empty()) {
    std::string msg = "checkpoint " + ckpt_path.string() + " does not match the dataset:";
    for (const auto& d : diff) msg += " " + d + ";";
    msg.pop_back();
    throw ConfigError(msg);
  }
  prepare_output_dir(out, ctx.force);
  const Predictions p = predict_partition(ckpt.model, part, eval, ctx.config.count("train.eval_batch"));
  write_predictions(out, p, info.vocab);
  write_text_file(out / kRunConfigFile, ctx.config.to_text());
  std::size_t n_events = 0, n_tags = 0;
  for (const auto& [_, e] : p.events) n_events += e.size();
  for (const auto& [_, t] : p.tags) n_tags += t.size();
  say(ctx, split + ": " + std::to_string(p.clips.size()) + " clips, " + std::to_string(n_tags) +
               " tags, " + std::to_string(n_events) + " events");
  return 0;
}

int cmd_evaluate(const CommandContext& ctx) {
  const fs::path& out = require_out(ctx, "evaluate");
  const fs::path data_dir = require_path(ctx.config, "dataset", "evaluate");
  const fs::path pred_dir = require_path(ctx.config, "predictions", "evaluate");
  const std::string split = split_name(ctx.config);
  const EvalConfig eval = ctx.config.eval_config();
  DatasetInfo info;
  const Partition part = load_partition(data_dir, split, &info);
  EventsByClip reference = part.strong;
  if (const std::string& refs = ctx.config.get("references"); !refs.empty()) {
    reference.clear();
    for (auto& [clip, events] : read_strong_tsv(refs, info.vocab).events) reference[clip] = events;
  }
  const Predictions p = read_predictions(pred_dir, info.vocab);
  const RunReport rep = evaluate_predictions(p, reference, part.durations, info.vocab.size(), eval);
  prepare_output_dir(out, ctx.force);
  write_text_file(out / kReportFile, format_report(rep, info.vocab.names()));
  const std::string table = "| clip-based micro F1 | segment-based micro F1 | event-based macro F1 |\n"
                            "|---|---|---|\n" + format_table_row(rep) + "\n";
  write_text_file(out / "summary.md", table);
  write_text_file(out / kRunConfigFile, ctx.config.to_text());
  if (ctx.log) *ctx.log << format_report(rep, info.vocab.names()) << '\n' << table << std::flush;
  return 0;
}

int cmd_gradcheck(const CommandContext& ctx) {
  const GradCheckSuiteOptions opts = ctx.config.gradcheck_options();
  const GradCheckSuiteResult r = run_gradcheck_suite(opts);
  std::ostringstream os;
  os << "target\tmax_relative_error\tworst_tensor\tchecked\tskipped_kinks\n";
  for (const auto& rep : r.reports) {
    std::size_t checked = 0, skipped = 0;
    for (const auto& e : rep.entries) {
      checked += e.checked;
      skipped += e.skipped_kinks;
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3e", rep.max_relative_error);
    os << rep.target << '\t' << buf << '\t' << rep.worst_tensor << '\t' << checked << '\t'
       << skipped << '\n';
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "overall\t%.3e\ttolerance %.1e\t%s\n", r.max_relative_error,
                opts.tolerance, r.passed ? "PASS" : "FAIL");
  os << buf;
  if (!ctx.out.empty()) {
    prepare_output_dir(ctx.out, ctx.force);
    write_text_file(ctx.out / "gradcheck.tsv", os.str());
    write_text_file(ctx.out / kRunConfigFile, ctx.config.to_text());
  }
  if (ctx.log) *ctx.log << os.str() << std::flush;
  return r.passed ? 0 : 1;
}

const std::vector<FeatureCombination>& feature_combinations() {
  static const std::vector<FeatureCombination> rows = {
      {"S", true, false, false},    {"S+V", true, false, true}, {"S+A", true, true, false},
      {"S+A+V", true, true, true},  {"V", false, false, true},  {"A", false, true, false},
      {"A+V", false, true, true},
  };
  return rows;
}

std::vector<FeatureCombination> parse_combinations(const std::string& spec) {
  if (trim(spec) == "all") return feature_combinations();
  std::vector<FeatureCombination> out;
  for (const auto& piece : split(spec, ',')) {
    const std::string name(trim(piece));
    auto it = std::find_if(feature_combinations().begin(), feature_combinations().end(),
                           [&](const FeatureCombination& f) { return f.name == name; });
    if (it == feature_combinations().end())
      throw ConfigError("unknown feature combination '" + name +
                        "' (expected S, S+V, S+A, S+A+V, V, A, A+V or all)");
    out.push_back(*it);
  }
  if (out.empty()) throw ConfigError("experiment.combinations is empty");
  return out;
}

std::vector<ExperimentRow> run_experiment(const RunConfig& config, const Dataset& data,
                                          std::ostream* log) {
  const auto combos = parse_combinations(config.get("experiment.combinations"));
  const std::size_t n_seeds = config.count("experiment.n_seeds");
  const std::size_t k_best = config.count("experiment.k_best");
  const std::string metric = config.get("experiment.selection_metric");
  selection_score(RunReport{}, metric);
  if (k_best == 0 || k_best > n_seeds)
    throw ConfigError("experiment.k_best must lie in [1, experiment.n_seeds]");
  const EvalConfig eval = config.eval_config();
  TrainRunConfig run = config.train_config();
  run.validate_each_epoch = false;
  const std::uint64_t base_seed = run.seed;
  const std::size_t n = data.info.vocab.size();

  std::vector<ExperimentRow> rows;
  for (const auto& combo : combos) {
    CrnnConfig model = config.model_config(data.info);
    model.use_spectral = combo.spectral;
    model.use_pre_audio = combo.pre_audio;
    model.use_pre_visual = combo.pre_visual;
    model.validate();
    auto one = [&](std::size_t i) {
      TrainRunConfig r = run;
      r.seed = base_seed + i;
      TrainResult result = train(model, r, data);
      SeedOutcome o;
      o.seed = r.seed;
      const auto val = score_partition(result.student, data.val, run.eval_batch);
      o.validation = selection_score(evaluate_run(val, data.val.strong, data.val.durations, n, eval), metric);
      const auto test = score_partition(result.student, data.test, run.eval_batch);
      o.test = evaluate_run(test, data.test.strong, data.test.durations, n, eval);
      if (log)
        *log << combo.name << "\tseed " << o.seed << "\tval " << format_double(o.validation)
             << "\ttest " << format_table_row(o.test) << '\n'
             << std::flush;
      return o;
    };
    rows.push_back({combo, multi_seed_select(n_seeds, k_best, one)});
  }
  return rows;
}

std::string format_experiment_table(const std::vector<ExperimentRow>& rows) {
  std::ostringstream os;
  os << "| Spectral auditory | Pretrained auditory | Pretrained visual | Clip-based micro F1 | "
        "Segment-based micro F1 | Event-based macro F1 |\n"
     << "|---|---|---|---|---|---|\n";
  auto mark = [](bool b) { return b ? "x" : "-"; };
  for (const auto& r : rows)
    os << "| " << mark(r.combination.spectral) << " | " << mark(r.combination.pre_audio) << " | "
       << mark(r.combination.pre_visual) << " | " << percent(r.report.clip_f1) << " | "
       << percent(r.report.segment_f1) << " | " << percent(r.report.event_f1) << " |\n";
  return os.str();
}

int cmd_experiment(const CommandContext& ctx) {
  const fs::path& out = require_out(ctx, "experiment");
  parse_combinations(ctx.config.get("experiment.combinations"));
  prepare_output_dir(out, ctx.force);
  fs::path data_dir = ctx.config.get("dataset");
  if (data_dir.empty()) {
    data_dir = out / "data";
    CommandContext gen = ctx;
    gen.out = data_dir;
    gen.force = true;
    cmd_generate(gen);
  }
  const Dataset data = load_split(data_dir);
  const auto rows = run_experiment(ctx.config, data, ctx.log);

  std::ostringstream runs;
  runs << "combination\tseed\tvalidation\tselected\ttest_clip_f1\ttest_segment_f1\ttest_event_f1\n";
  for (const auto& r : rows)
    for (std::size_t i = 0; i < r.report.runs.size(); ++i) {
      const auto& o = r.report.runs[i];
      const bool sel = std::find(r.report.selected.begin(), r.report.selected.end(), i) !=
                       r.report.selected.end();
      runs << r.combination.name << '\t' << o.seed << '\t' << format_double(o.validation) << '\t'
           << (sel ? 1 : 0) << '\t' << format_double(o.test.clip.f1) << '\t'
           << format_double(o.test.segment.f1) << '\t' << format_double(o.test.event.f1) << '\n';
    }
  const std::string table = format_experiment_table(rows);
  write_text_file(out / "runs.tsv", runs.str());
  write_text_file(out / "table.md", table);
  write_text_file(out / kRunConfigFile, ctx.config.to_text());
  say(ctx, table);
  return 0;
}

}  // namespace avsed
