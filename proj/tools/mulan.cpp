// Copyright 2026 The Mulan Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// mulan: pretrain, eval, ablate, gradcheck.

#include <CLI11.hpp>
#include <iostream>

#include "mulan/gradcheck.hpp"
#include "mulan/runner.hpp"

namespace {

using mulan::RunConfig;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<std::string> protocol;
  std::vector<std::string> sets;  // section.key=value

  void attach(CLI::App* app) {
    app->add_option("--config", config, "sectioned key=value config file")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "run seed (train.seed)");
    app->add_flag("--deterministic", deterministic, "reproducible metrics.csv");
    app->add_option("--protocol", protocol, "evaluation protocol")->check(CLI::IsMember({"knn", "linear", "both"}));
    app->add_option("--set", sets, "override one key, section.key=value (repeatable)");
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : mulan::load_config(config);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw mulan::ConfigError("--set expects section.key=value, got '" + s + "'");
      mulan::set_config_value(c, mulan::detail::trim(s.substr(0, eq)), mulan::detail::trim(s.substr(eq + 1)));
    }
    if (seed) c.train.seed = *seed;
    if (deterministic) c.train.deterministic = true;
    if (protocol) mulan::set_config_value(c, "eval.protocol", *protocol);
    return c;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view self-supervised pretraining on a small CPU tensor library"};
  app.require_subcommand(1);

  CommonFlags pre_flags, eval_flags, ablate_flags;
  std::string out = "run";
  std::string resume;
  std::size_t stop_after = 0;
  bool quiet = false;
  auto* pre = app.add_subcommand("pretrain", "train a model, checkpoint it and evaluate it");
  pre_flags.attach(pre);
  pre->add_option("--out", out, "run directory");
  pre->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);
  pre->add_option("--stop-after", stop_after, "stop after this many epochs (0: run to the end)");
  pre->add_flag("--quiet", quiet, "no per-epoch lines");

  std::string checkpoint, eval_out;
  auto* ev = app.add_subcommand("eval", "evaluate a stored checkpoint");
  eval_flags.attach(ev);
  ev->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "directory for eval_report.txt");

  std::string grid = "views", ablate_out = "ablation";
  auto* ab = app.add_subcommand("ablate", "train a grid of configurations and tabulate them");
  ablate_flags.attach(ab);
  ab->add_option("--grid", grid, "views | augment | g/l/c;g/l/c;...");
  ab->add_option("--out", ablate_out, "output directory");
  ab->add_flag("--quiet", quiet, "no per-epoch lines");

  std::vector<std::uint64_t> gc_seeds;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference and accumulation checks at 64-bit");
  gc->add_option("--seeds", gc_seeds, "seeds (default 1..5)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pre) {
      mulan::RunOptions o;
      o.out_dir = out;
      if (!resume.empty()) o.resume = resume;
      if (stop_after > 0) o.stop_after_epochs = stop_after;
      o.quiet = quiet;
      const auto res = mulan::cmd_pretrain(pre_flags.resolve(), o);
      return res.exit_code;
    }
    if (*ev) {
      std::optional<mulan::fs::path> dir;
      if (!eval_out.empty()) dir = eval_out;
      std::cout << mulan::cmd_eval(eval_flags.resolve(), checkpoint, dir).to_text();
      return 0;
    }
    if (*ab) {
      const auto base = ablate_flags.resolve();
      std::cout << mulan::cmd_ablate(mulan::parse_grid(base, grid), ablate_out, grid == "augment", quiet);
      return 0;
    }
    if (*gc) {
      mulan::GradCheckOptions opt;
      if (!gc_seeds.empty()) opt.seeds = gc_seeds;
      const auto rep = mulan::cmd_gradcheck(opt);
      std::cout << rep.to_text();
      return rep.passed ? 0 : 1;
    }
  } catch (const mulan::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
