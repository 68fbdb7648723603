// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "avsed/checkpoint.hpp"
#include "avsed/meanteacher.hpp"
#include "avsed/runconfig.hpp"

namespace avsed {

struct CommandContext {
  RunConfig config;
  std::filesystem::path out;
  bool force = false;
  std::ostream* log = nullptr;  // progress and summaries; null is silent
};

/// Each command returns its exit status (0 success); validation and runtime
/// failures are thrown.
int cmd_generate(const CommandContext& ctx);
int cmd_train(const CommandContext& ctx);
int cmd_predict(const CommandContext& ctx);
int cmd_evaluate(const CommandContext& ctx);
/// 0 iff every check is below the tolerance, 1 otherwise.
int cmd_gradcheck(const CommandContext& ctx);
int cmd_experiment(const CommandContext& ctx);

/// Output directory must be empty or absent unless `force` is set.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

inline constexpr const char* kEventsFile = "events.tsv";
inline constexpr const char* kTagsFile = "tags.tsv";
inline constexpr const char* kReportFile = "report.tsv";
inline constexpr const char* kRunConfigFile = "run_config.txt";

struct Predictions {
  EventsByClip events;  // every clip, possibly with no events
  TagsByClip tags;      // every clip, possibly with no tags
  std::vector<std::string> clips;
};

Predictions predict_partition(Crnn<float>& model, const Partition& part,
                              const EvalConfig& eval, std::size_t batch_size = 16);
void write_predictions(const std::filesystem::path& dir, const Predictions& p,
                       const Vocabulary& vocab);
Predictions read_predictions(const std::filesystem::path& dir, const Vocabulary& vocab);

/// Scores decoded predictions against references over the reference clip
/// universe; a clip present on one side only is a DataError.
RunReport evaluate_predictions(const Predictions& p, const EventsByClip& reference,
                               const std::map<std::string, double>& durations,
                               std::size_t n_classes, const EvalConfig& eval);

/// `| clip | segment | event |` markdown row in percent.
std::string format_table_row(const RunReport& report);

/// Names the checkpoint/dataset keys that differ; empty when compatible.
std::vector<std::string> checkpoint_mismatches(const LoadedCheckpoint& ckpt,
                                               const DatasetInfo& info);

struct FeatureCombination {
  std::string name;  // e.g. "S+A+V"
  bool spectral, pre_audio, pre_visual;
};

/// The seven rows of the feature-combination table, in table order.
const std::vector<FeatureCombination>& feature_combinations();
std::vector<FeatureCombination> parse_combinations(const std::string& spec);

struct ExperimentRow {
  FeatureCombination combination;
  MultiSeedReport report;
};

/// Trains `experiment.n_seeds` runs per selected combination on `data` and
/// keeps the `experiment.k_best` by validation score.
std::vector<ExperimentRow> run_experiment(const RunConfig& config, const Dataset& data,
                                          std::ostream* log = nullptr);
std::string format_experiment_table(const std::vector<ExperimentRow>& rows);

}  // namespace avsed
