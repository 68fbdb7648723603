// SPDX-License-Identifier: Apache-2.0
// avsed: synthetic data generation, training, prediction and scoring.
#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "avsed/commands.hpp"
#include "avsed/errors.hpp"

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::vector<std::string> sets;
  std::map<std::string, std::string> paths;
  bool resume = false;
};

avsed::RunConfig build_config(const Options& o) {
  avsed::RunConfig cfg = o.config_path.empty() ? avsed::RunConfig()
                                               : avsed::RunConfig::from_file(o.config_path);
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw avsed::ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (o.seed) cfg.set("seed", std::to_string(*o.seed));
  for (const auto& [k, v] : o.paths)
    if (!v.empty()) cfg.set(k, v);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-visual sound event detection with a mean-teacher CRNN", "avsed"};
  app.require_subcommand(1);
  Options o;
  o.paths = {{"dataset", ""}, {"checkpoint", ""}, {"split", ""}, {"predictions", ""},
             {"references", ""}};

  app.add_option("--config", o.config_path, "key=value run configuration file")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "master seed (overrides the config)");
  app.add_option("--out", o.out, "output directory");
  app.add_flag("--force", o.force, "write into a non-empty output directory");
  app.add_option("--set", o.sets, "override one config key (key=value), repeatable");

  using Command = int (*)(const avsed::CommandContext&);
  struct Verb {
    const char* name;
    const char* help;
    Command run;
    std::vector<const char*> paths;
  };
  const std::vector<Verb> verbs = {
      {"generate", "synthesize a dataset directory", avsed::cmd_generate, {}},
      {"train", "train student and teacher on a dataset", avsed::cmd_train, {"dataset"}},
      {"predict", "write tags and events for a dataset split", avsed::cmd_predict,
       {"dataset", "checkpoint", "split"}},
      {"evaluate", "score predictions against references", avsed::cmd_evaluate,
       {"dataset", "predictions", "references", "split"}},
      {"gradcheck", "finite-difference check of every layer and the full model",
       avsed::cmd_gradcheck, {}},
      {"experiment", "feature-combination comparison over several seeds",
       avsed::cmd_experiment, {"dataset"}},
  };
  Command selected = nullptr;
  for (const auto& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->fallthrough();
    for (const char* p : v.paths) sub->add_option(std::string("--") + p, o.paths[p]);
    if (std::string(v.name) == "train")
      sub->add_flag("--resume", o.resume, "not supported; reported as an error");
    sub->callback([&selected, run = v.run] { selected = run; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (o.resume)
      throw avsed::ConfigError(
          "checkpoint resumption is not supported; start a fresh run with train");
    avsed::CommandContext ctx{build_config(o), o.out, o.force, &std::cout};
    return selected(ctx);
  } catch (const avsed::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << '\n';
    return 2;
  }
}
