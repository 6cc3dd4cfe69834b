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

#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/checkpoint.hpp"
#include "mulan/config.hpp"
#include "mulan/datasets.hpp"
#include "mulan/eval.hpp"
#include "mulan/model.hpp"
#include "mulan/objective.hpp"
#include "mulan/train.hpp"

namespace mulan {

namespace fs = std::filesystem;

/// Worker count: MULAN_THREADS if set, else the hardware concurrency.
inline unsigned worker_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MULAN_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) n = static_cast<unsigned>(v);
  }
  return n;
}

struct DataSplits {
  Dataset train;
  Dataset val;
  DatasetStats stats;
};

inline Dataset take_first(Dataset ds, std::size_t limit) {
  if (limit > 0 && limit < ds.items.size()) ds.items.resize(limit);
  return ds;
}

inline DataSplits load_data(const DataConfig& cfg) {
  DataSplits d;
  if (cfg.source == DataSource::kSynth) {
    d.train = synth_shapes(cfg.data_seed, cfg.train_per_class);
    d.val = synth_shapes(cfg.data_seed + 0x5eed0001ULL, cfg.val_per_class);
  } else {
    d.train = take_first(load_cifar_split(cfg.path, true), cfg.train_limit);
    d.val = take_first(load_cifar_split(cfg.path, false), cfg.val_limit);
  }
  if (d.train.empty() || d.val.empty()) throw ConfigError("empty training or validation split");
  d.stats = compute_stats(d.train);
  return d;
}

// ---------------------------------------------------------------------------
// Metrics

inline const char* kMetricsHeader =
    "step,epoch,loss_total,loss_glob,loss_loc,loss_cutout,lr,ema_tau,embed_std,grad_norm,time_ms,lr_pred";

inline std::string metrics_line(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << r.step << ',' << r.epoch << ',' << r.loss_total << ',' << r.loss[0] << ',' << r.loss[1] << ','
     << r.loss[2] << ',' << r.lr << ',' << r.ema_tau << ',' << r.embed_std << ',' << r.grad_norm << ','
     << std::setprecision(6) << r.time_ms << ',' << std::setprecision(10) << r.lr_pred;
  return os.str();
}

struct MetricsTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError("metrics: no column '" + name + "'");
  }
};

inline MetricsTable read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  MetricsTable t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("metrics: empty file");
  std::stringstream hs(line);
  for (std::string c; std::getline(hs, c, ',');) t.header.push_back(c);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) row.push_back(std::stod(c));
    if (row.size() != t.header.size()) throw FormatError("metrics: ragged row");
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Pretraining

struct RunOptions {
  fs::path out_dir = "run";
  std::optional<fs::path> resume;
  std::optional<std::size_t> stop_after_epochs;  // end early, e.g. to test resuming
  bool evaluate = true;
  bool quiet = false;
};

struct PretrainResult {
  int exit_code = 0;
  fs::path run_dir;
  std::optional<EvalReport> report;
  std::uint64_t steps = 0;
  std::size_t collapsed_after_warmup = 0;
  bool nonfinite = false;
  std::string error;
  double seconds = 0;
};

inline Schedule schedule_for(const RunConfig& cfg, std::size_t steps_per_epoch) {
  Schedule s;
  s.base_lr = cfg.train.base_lr;
  s.batch_size = cfg.train.batch_size;
  s.total_steps = steps_per_epoch * cfg.train.epochs;
  s.warmup_steps = static_cast<std::uint64_t>(
      std::llround(cfg.train.warmup_epochs * static_cast<double>(steps_per_epoch)));
  s.warmup_steps = std::min(s.warmup_steps, s.total_steps);
  s.ema_base = cfg.train.ema_base;
  return s;
}

inline StepConfig step_config_for(const RunConfig& cfg) {
  StepConfig sc;
  sc.objective.kind = objective_for(cfg.model.method);
  sc.objective.temperature = cfg.train.temperature;
  sc.weights.lambda = cfg.views.lambda;
  sc.constant_predictor_lr = cfg.train.constant_predictor_lr;
  sc.collapse_threshold = cfg.train.collapse_threshold;
  return sc;
}

/// Resolves derived settings and validates; throws ConfigError before any
/// training work happens.
inline RunConfig resolve_config(RunConfig cfg) {
  cfg.validate();
  cfg.sync_predictors();
  cfg.eval.image_size = static_cast<std::size_t>(cfg.views.global_size);
  cfg.eval.probe.seed = cfg.train.seed;
  return cfg;
}

template <typename T>
PretrainResult pretrain_typed(const RunConfig& cfg, const DataSplits& data, const RunOptions& opt) {
  const auto t_start = std::chrono::steady_clock::now();
  PretrainResult res;
  res.run_dir = opt.out_dir;
  fs::create_directories(opt.out_dir);
  {
    std::ofstream cf(opt.out_dir / "config.ini");
    cf << render_config(cfg);
  }

  const std::size_t n = data.train.size();
  const std::size_t bs = cfg.train.batch_size;
  if (n < bs) throw ConfigError("batch size exceeds the training set");
  const std::size_t steps_per_epoch = n / bs;  // last partial batch dropped
  const Schedule schedule = schedule_for(cfg, steps_per_epoch);
  schedule.validate();
  const StepConfig step_cfg = step_config_for(cfg);
  const PairPlan plan = route_pairs(cfg.views);
  const unsigned threads = worker_threads();

  auto model = init_model<T>(cfg.model, cfg.train.seed);
  OptimizerConfig oc;
  oc.momentum = cfg.train.momentum;
  oc.weight_decay = cfg.train.weight_decay;
  oc.constant_predictor_lr = cfg.train.constant_predictor_lr;
  SgdMomentum<T> sgd(oc);

  CheckpointMeta meta;
  const fs::path metrics_path = opt.out_dir / "metrics.csv";
  if (opt.resume) {
    meta = load_checkpoint(*opt.resume, model, &sgd);
    if (!opt.quiet) std::cout << "resumed at epoch " << meta.epoch << ", step " << meta.step << "\n";
    // keep rows up to the checkpoint, drop anything after it
    std::vector<std::string> keep;
    if (fs::exists(metrics_path)) {
      std::ifstream in(metrics_path);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (std::stoull(line.substr(0, line.find(','))) < meta.step) keep.push_back(line);
      }
    }
    std::ofstream out(metrics_path, std::ios::trunc);
    out << kMetricsHeader << "\n";
    for (const auto& l : keep) out << l << "\n";
  } else {
    std::ofstream out(metrics_path, std::ios::trunc);
    out << kMetricsHeader << "\n";
  }
  std::ofstream metrics(metrics_path, std::ios::app);

  const std::size_t last_epoch =
      opt.stop_after_epochs ? std::min(cfg.train.epochs, *opt.stop_after_epochs) : cfg.train.epochs;
  std::uint64_t step = meta.step;
  for (std::size_t epoch = meta.epoch; epoch < last_epoch; ++epoch) {
    const auto order = epoch_order(n, cfg.train.seed, epoch);
    double loss_sum = 0, std_sum = 0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b * bs),
                                   order.begin() + static_cast<std::ptrdiff_t>((b + 1) * bs));
      const auto views = build_views_for(data.train, idx, cfg.views, data.stats, cfg.train.seed, epoch, threads);
      const auto in = stack_step_inputs<T>(views);
      MetricsRow row;
      try {
        row = train_step(model, sgd, in, plan, schedule, step, step_cfg);
      } catch (const TrainingAborted& e) {
        std::ofstream diag(opt.out_dir / "diagnostics.txt");
        diag << "epoch=" << epoch << "\n" << e.snapshot() << "message=" << e.what() << "\n";
        res.exit_code = 3;
        res.nonfinite = true;
        res.error = e.what();
        res.steps = step;
        std::cerr << "error: " << e.what() << " (diagnostics in " << (opt.out_dir / "diagnostics.txt") << ")\n";
        return res;
      }
      row.epoch = epoch;
      if (cfg.train.deterministic) row.time_ms = 0;
      if (row.collapsed && step >= schedule.warmup_steps) ++res.collapsed_after_warmup;
      metrics << metrics_line(row) << "\n";
      loss_sum += row.loss_total;
      std_sum += row.embed_std;
    }
    metrics.flush();
    meta.epoch = epoch + 1;
    meta.step = step;
    const bool periodic = cfg.train.checkpoint_every > 0 && meta.epoch % cfg.train.checkpoint_every == 0;
    if (periodic || meta.epoch == last_epoch) {
      save_checkpoint(opt.out_dir / ("epoch_" + std::to_string(meta.epoch) + ".muln"), model, &sgd, meta);
    }
    if (!opt.quiet)
      std::cout << "epoch " << meta.epoch << "/" << cfg.train.epochs << "  loss "
                << loss_sum / static_cast<double>(steps_per_epoch) << "  embed_std "
                << std_sum / static_cast<double>(steps_per_epoch) << std::endl;
  }
  res.steps = step;
  if (meta.epoch == cfg.train.epochs)
    save_checkpoint(opt.out_dir / "final.muln", model, &sgd, meta);

  if (opt.evaluate && meta.epoch == cfg.train.epochs) {
    res.report = evaluate(model, data.train, data.val, data.stats, cfg.eval);
    std::ofstream rep(opt.out_dir / "eval_report.txt");
    rep << res.report->to_text();
    if (!opt.quiet) std::cout << res.report->to_text();
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

inline PretrainResult cmd_pretrain(RunConfig cfg, const RunOptions& opt) {
  cfg = resolve_config(std::move(cfg));
  const auto data = load_data(cfg.data);
  if (cfg.train.precision == "double") return pretrain_typed<double>(cfg, data, opt);
  return pretrain_typed<float>(cfg, data, opt);
}

// ---------------------------------------------------------------------------
// Evaluation of a stored checkpoint

template <typename T>
EvalReport eval_typed(const RunConfig& cfg, const DataSplits& data, const fs::path& checkpoint) {
  auto model = init_model<T>(cfg.model, cfg.train.seed);
  load_checkpoint<T>(checkpoint, model, nullptr);
  return evaluate(model, data.train, data.val, data.stats, cfg.eval);
}

inline EvalReport cmd_eval(RunConfig cfg, const fs::path& checkpoint, std::optional<fs::path> out_dir = {}) {
  cfg = resolve_config(std::move(cfg));
  const auto data = load_data(cfg.data);
  const EvalReport rep = cfg.train.precision == "double" ? eval_typed<double>(cfg, data, checkpoint)
                                                         : eval_typed<float>(cfg, data, checkpoint);
  if (out_dir) {
    fs::create_directories(*out_dir);
    std::ofstream(*out_dir / "eval_report.txt") << rep.to_text();
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation grids

struct AblationRow {
  std::string label;
  RunConfig config;
};

struct AblationOutcome {
  std::string label;
  std::string columns;  // row descriptor cells
  std::optional<double> knn;
  std::optional<double> linear;
  std::string status = "ok";
};

/// View compositions as (global, local, cutout) counts.
inline std::vector<AblationRow> view_grid(const RunConfig& base, const std::vector<std::array<int, 3>>& counts) {
  std::vector<AblationRow> rows;
  for (const auto& c : counts) {
    RunConfig r = base;
    r.views.n_global = c[0];
    r.views.n_local = c[1];
    r.views.n_cutout = c[2];
    rows.push_back({std::to_string(c[0]) + "/" + std::to_string(c[1]) + "/" + std::to_string(c[2]), r});
  }
  return rows;
}

inline std::vector<std::array<int, 3>> table_view_compositions() {
  return {{2, 0, 0}, {4, 0, 0}, {2, 4, 0}, {2, 0, 2}, {2, 2, 1}};
}

struct AugmentToggles {
  bool crop, cutout, flip, jitter, gray, solar, blur;
};

inline std::vector<std::pair<std::string, AugmentToggles>> table_augment_rows() {
  return {{"Baseline", {true, false, true, true, true, true, true}},
          {"Remove crop", {false, false, true, true, true, true, true}},
          {"Crop only", {true, false, false, false, false, false, false}},
          {"Cutout only", {false, true, false, false, false, false, false}}};
}

inline RunConfig apply_toggles(RunConfig r, const AugmentToggles& t) {
  r.views.crop = t.crop;
  r.views.flip = t.flip;
  r.views.jitter = t.jitter;
  r.views.grayscale = t.gray;
  r.views.solarize = t.solar;
  r.views.blur = t.blur;
  if (t.cutout) {
    // one complete target view, one masked online view of the same image
    r.views.n_global = 1;
    r.views.n_local = 0;
    r.views.n_cutout = 1;
  } else {
    r.views.n_global = 2;
    r.views.n_local = 0;
    r.views.n_cutout = 0;
  }
  return r;
}

inline std::vector<AblationRow> augment_grid(const RunConfig& base) {
  std::vector<AblationRow> rows;
  for (const auto& [label, t] : table_augment_rows()) rows.push_back({label, apply_toggles(base, t)});
  return rows;
}

/// Parses a grid spec: "views" (the five compositions), "augment" (the four
/// augmentation rows), or a ';'-separated list of g/l/c triples, e.g.
/// "2/0/0;2/2/1".
inline std::vector<AblationRow> parse_grid(const RunConfig& base, const std::string& spec) {
  if (spec == "views") return view_grid(base, table_view_compositions());
  if (spec == "augment") return augment_grid(base);
  std::vector<std::array<int, 3>> counts;
  std::stringstream ss(spec);
  for (std::string item; std::getline(ss, item, ';');) {
    item = detail::trim(item);
    if (item.empty()) continue;
    std::array<int, 3> c{};
    std::stringstream is(item);
    std::string tok;
    for (int k = 0; k < 3; ++k) {
      if (!std::getline(is, tok, '/')) throw ConfigError("grid entry '" + item + "' is not g/l/c");
      c[static_cast<std::size_t>(k)] = detail::parse_int<int>("grid", detail::trim(tok));
    }
    if (std::getline(is, tok, '/')) throw ConfigError("grid entry '" + item + "' is not g/l/c");
    counts.push_back(c);
  }
  if (counts.empty()) throw ConfigError("ablation grid is empty");
  return view_grid(base, counts);
}

inline std::string row_cells(const RunConfig& c, bool augment_layout) {
  auto mark = [](bool b) { return std::string(b ? "x" : "-"); };
  std::ostringstream os;
  if (augment_layout) {
    os << std::setw(5) << mark(c.views.crop) << std::setw(7) << mark(c.views.n_cutout > 0) << std::setw(5)
       << mark(c.views.flip) << std::setw(7) << mark(c.views.jitter) << std::setw(5) << mark(c.views.grayscale)
       << std::setw(6) << mark(c.views.solarize) << std::setw(5) << mark(c.views.blur);
  } else {
    os << std::setw(6) << c.views.n_global << std::setw(5) << c.views.n_local << std::setw(7) << c.views.n_cutout;
  }
  return os.str();
}

inline std::string render_ablation(const std::vector<AblationOutcome>& rows, bool augment_layout) {
  std::size_t label_w = 5;
  for (const auto& r : rows) label_w = std::max(label_w, r.label.size());
  std::ostringstream os;
  auto pct = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) s << std::fixed << std::setprecision(1) << 100.0 * *v;
    else s << "n/a";
    return s.str();
  };
  os << std::left << std::setw(static_cast<int>(label_w)) << "run" << std::right;
  if (augment_layout) os << std::setw(5) << "crop" << std::setw(7) << "cutout" << std::setw(5) << "flip"
                         << std::setw(7) << "jitter" << std::setw(5) << "gray" << std::setw(6) << "solar"
                         << std::setw(5) << "blur";
  else os << std::setw(6) << "glob." << std::setw(5) << "loc." << std::setw(7) << "cutout";
  os << std::setw(8) << "kNN" << std::setw(8) << "Lin." << "  status\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(label_w)) << r.label << std::right << r.columns << std::setw(8)
       << pct(r.knn) << std::setw(8) << pct(r.linear) << "  " << r.status << "\n";
  }
  return os.str();
}

/// Trains every row with the base seed and budget, sequentially, each in its
/// own subdirectory. A failing row is reported in the table, never fatal.
inline std::string cmd_ablate(const std::vector<AblationRow>& grid, const fs::path& out_dir, bool augment_layout,
                              bool quiet = false) {
  if (grid.empty()) throw ConfigError("ablation grid is empty");
  fs::create_directories(out_dir);
  std::vector<AblationOutcome> outcomes;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& row = grid[i];
    AblationOutcome o;
    o.label = row.label;
    o.columns = row_cells(row.config, augment_layout);
    RunOptions ro;
    ro.out_dir = out_dir / ("row_" + std::to_string(i));
    ro.quiet = quiet;
    try {
      const auto res = cmd_pretrain(row.config, ro);
      if (res.exit_code != 0) {
        o.status = "failed: " + res.error;
      } else if (res.report) {
        o.knn = res.report->knn_top1;
        o.linear = res.report->linear_top1;
        if (res.collapsed_after_warmup > 0) o.status = "ok (collapse flag x" + std::to_string(res.collapsed_after_warmup) + ")";
      }
    } catch (const std::exception& e) {
      o.status = std::string("failed: ") + e.what();
    }
    outcomes.push_back(o);
  }
  const std::string table = render_ablation(outcomes, augment_layout);
  std::ofstream(out_dir / "table.txt") << table;
  return table;
}

}  // namespace mulan
