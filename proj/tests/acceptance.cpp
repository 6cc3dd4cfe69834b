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

// Acceptance checks, one PASS/FAIL line each. With no arguments every check
// runs; otherwise only the listed numbers. Exit status is nonzero if any
// selected check fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mulan/checkpoint.hpp"
#include "mulan/gradcheck.hpp"
#include "mulan/runner.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace {

using namespace mulan;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;
  std::vector<std::string> failures;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (std::find(failures.begin(), failures.end(), what) == failures.end()) failures.push_back(what);
    }
  }
  std::string line() const {
    std::string out = detail.str();
    for (const auto& f : failures) out += " [failed: " + f + "]";
    return out;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ViewRecipe recipe(int g, int l, int c) {
  ViewRecipe r;
  r.n_global = g;
  r.n_local = l;
  r.n_cutout = c;
  return r;
}

/// Seconds-scale run for the persistence and harness checks.
RunConfig tiny_run() {
  RunConfig c;
  c.data.train_per_class = 8;
  c.data.val_per_class = 4;
  c.model.widths = {4, 8};
  c.model.proj_hidden = 16;
  c.model.proj_out = 8;
  c.model.pred_hidden = 16;
  c.train.epochs = 3;
  c.train.batch_size = 8;
  c.train.warmup_epochs = 1;
  c.train.deterministic = true;
  c.train.checkpoint_every = 1;
  c.eval.probe.epochs = 2;
  return c;
}

RunOptions quiet_to(const fs::path& dir, bool evaluate = true) {
  RunOptions o;
  o.out_dir = dir;
  o.quiet = true;
  o.evaluate = evaluate;
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

Verdict gradient_correctness() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckOptions opt;
  const auto rep = cmd_gradcheck(opt);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  for (const auto& l : rep.lines) {
    if (l.max_rel_error >= worst) {
      worst = l.max_rel_error;
      worst_name = l.name;
    }
    v.require(l.passed, l.name);
  }
  v.require(rep.passed, "report");
  v.require(opt.seeds.size() >= 5, "at least five seeds");
  v.require(secs < 120, "runtime under 2 min");
  v.detail << rep.lines.size() << " cases x " << opt.seeds.size() << " seeds, worst rel err " << worst << " ("
           << worst_name << "), " << secs << " s";
  return v;
}

Verdict accumulation_equivalence() {
  Verdict v;
  double worst = 0;
  for (Method m : {Method::kByol, Method::kSimSiam, Method::kMocoV3})
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto r = per_view_equivalence(seed, m);
      worst = std::max(worst, r.max_abs_diff);
      v.require(r.max_abs_diff <= 1e-6, std::string(to_string(m)) + " seed " + std::to_string(seed));
      v.require(r.high_water_small == r.high_water_large, "tape peak depends on view count");
      if (m == Method::kByol && seed == 1)
        v.detail << "tape peak 2/0/0=" << r.high_water_small << " 2/2/1=" << r.high_water_large
                 << " joint 2/2/1=" << r.high_water_joint << ", ";
    }
  v.detail << "max |per-view - joint| = " << worst;
  return v;
}

Verdict pair_routing() {
  Verdict v;
  const auto plan = route_pairs(recipe(2, 2, 1));
  v.require(plan.pairs == oracle::enumerate_pairs(2, 2, 1), "(2,2,1) enumeration");
  v.require(plan.pairs.size() == 8, "eight pairs");
  v.require(route_pairs(recipe(2, 0, 0)).pairs == oracle::enumerate_pairs(2, 0, 0), "(2,0,0) enumeration");

  Rng rng(31);
  const std::size_t n = 6, d = 5;
  std::vector<Tensor<double>> preds, targets;
  for (int i = 0; i < 2; ++i) {
    preds.push_back(testing::random_tensor(rng, {n, d}));
    targets.push_back(testing::random_tensor(rng, {n, d}));
  }
  const auto r = recipe(2, 0, 0);
  Tape<double> tape;
  const double got =
      total_loss(tape, preds, targets, slot_types(r), route_pairs(r), LossWeights{}, ObjectiveConfig{}).total.item();
  const double want = oracle::two_view_byol(testing::to_vec(preds[0]), testing::to_vec(preds[1]),
                                            testing::to_vec(targets[0]), testing::to_vec(targets[1]), d);
  v.require(std::abs(got - want) <= 1e-6, "two-view loss");
  v.detail << plan.pairs.size() << " pairs for (2,2,1); two-view loss " << got << " vs direct " << want;
  return v;
}

Verdict predictor_isolation() {
  Verdict v;
  std::size_t checked = 0;
  for (const auto& [g, l, c] : std::vector<std::array<int, 3>>{{2, 0, 0}, {2, 2, 0}, {2, 0, 1}, {1, 0, 1}})
    for (Method m : {Method::kByol, Method::kSimSiam}) {
      HeadConfig hc;
      hc.method = m;
      hc.widths = {4, 8};
      hc.proj_hidden = 16;
      hc.proj_out = 8;
      hc.pred_hidden = 16;
      hc.view_types = {ViewType::kGlobal, ViewType::kLocal, ViewType::kCutout};
      auto model = init_model<double>(hc, 5);
      ViewRecipe r = recipe(g, l, c);
      r.global_size = 16;
      r.local_size = 8;
      const auto ds = synth_shapes(9, 2, 16);
      std::vector<std::size_t> idx(ds.size());
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      const auto in = stack_step_inputs<double>(build_views_for(ds, idx, r, compute_stats(ds), 1, 0));
      const auto plan = route_pairs(r);
      const auto counts = plan.count_by_type();
      std::map<std::string, std::vector<double>> before;
      model.visit([&](const std::string& name, Tensor<double>& t, ParamRole) { before[name] = testing::to_vec(t); });
      SgdMomentum<double> opt;
      Schedule s;
      s.total_steps = 10;
      for (std::uint64_t k = 0; k < 3; ++k) train_step(model, opt, in, plan, s, k, StepConfig{});
      const std::string tag = std::to_string(g) + "/" + std::to_string(l) + "/" + std::to_string(c);
      for (ViewType t : kAllViewTypes) {
        const bool active = counts[index_of(t)] > 0;
        const std::string prefix = "predictor." + std::string(to_string(t)) + ".";
        bool any_change = false;
        model.visit([&](const std::string& name, Tensor<double>& p, ParamRole) {
          if (name.rfind(prefix, 0) != 0) return;
          const bool same = testing::to_vec(p) == before.at(name);
          any_change = any_change || !same;
          if (!active) {
            v.require(same, tag + " " + name + " moved");
            if (p.has_grad())
              for (double x : p.grad()) v.require(x == 0.0, tag + " " + name + " has gradient");
            ++checked;
          }
        });
        if (active) v.require(any_change, tag + " active " + prefix + " did not train");
      }
    }
  v.detail << checked << " idle predictor tensors checked across 4 recipes x 2 methods";
  return v;
}

Verdict schedules() {
  Verdict v;
  Schedule s;
  s.base_lr = 0.4;
  s.batch_size = 256;
  s.warmup_steps = 10;
  s.total_steps = 110;
  v.require(lr_at(0, s) == 0.0, "lr(0) = 0");
  v.require(lr_at(10, s) == 0.4, "lr at warmup end = base");
  v.require(std::abs(lr_at(110, s)) <= 1e-15, "lr(final) = 0");
  for (std::uint64_t k = 11; k <= 110; ++k) v.require(lr_at(k, s) <= lr_at(k - 1, s), "post-warmup lr nonincreasing");
  Schedule e;
  e.total_steps = 100;
  v.require(ema_tau_at(0, e) == 0.996, "tau(0)");
  v.require(std::abs(ema_tau_at(50, e) - 0.998) <= 1e-15, "tau(mid)");
  v.require(ema_tau_at(100, e) == 1.0, "tau(final)");
  for (std::uint64_t k = 1; k <= 100; ++k) v.require(ema_tau_at(k, e) >= ema_tau_at(k - 1, e), "tau nondecreasing");
  v.detail << "lr 0 -> " << lr_at(10, s) << " -> " << lr_at(110, s) << ", tau " << ema_tau_at(0, e) << " -> "
           << ema_tau_at(50, e) << " -> " << ema_tau_at(100, e);
  return v;
}

/// Cutout-only recipe: one complete target view, one masked online view,
/// photometric and crop augmentations off so masking is the only signal.
RunConfig cutout_only(bool symmetric) {
  RunConfig c;  // synth_shapes, 500 train / 125 val per class
  c.views.n_global = 1;
  c.views.n_local = 0;
  c.views.n_cutout = 1;
  c.views.crop = c.views.flip = c.views.jitter = c.views.grayscale = c.views.blur = c.views.solarize = false;
  c.views.symmetric_cutout = symmetric;
  c.train.epochs = 30;
  c.train.ema_base = 0.99;
  c.eval.protocol = Protocol::kKnn;
  return c;
}

Verdict asymmetric_cutout(const fs::path& dir) {
  Verdict v;
  const auto asym = cmd_pretrain(cutout_only(false), quiet_to(dir / "asymmetric"));
  const auto sym = cmd_pretrain(cutout_only(true), quiet_to(dir / "symmetric"));
  // untrained encoder on the same data, for context: the floor a run that
  // learns nothing would sit at
  const auto resolved = resolve_config(cutout_only(false));
  const auto data = load_data(resolved.data);
  auto untrained = init_model<float>(resolved.model, resolved.train.seed);
  const double floor = evaluate(untrained, data.train, data.val, data.stats, resolved.eval).knn_top1.value_or(0);
  const double chance = 0.25;
  const double a = asym.report ? asym.report->knn_top1.value_or(0) : 0;
  const double s = sym.report ? sym.report->knn_top1.value_or(0) : 0;
  v.require(asym.exit_code == 0 && sym.exit_code == 0, "runs completed");
  v.require(a >= 2 * chance, "asymmetric kNN >= 50%");
  v.require(std::abs(s - chance) <= 0.10 || sym.collapsed_after_warmup > 0,
            "symmetric near chance or collapsed");
  v.require(asym.seconds <= 900 && sym.seconds <= 900, "runtime <= 15 min each");
  v.detail << "asymmetric kNN " << 100 * a << "% (" << asym.seconds << " s), symmetric kNN " << 100 * s
           << "% collapse steps " << sym.collapsed_after_warmup << " (" << sym.seconds << " s), untrained encoder kNN "
           << 100 * floor << "%";
  return v;
}

Verdict multi_predictor_multicrop(const fs::path& dir) {
  Verdict v;
  RunConfig base;
  base.data.train_per_class = 1250;  // 5 000 images
  base.train.epochs = 40;
  base.eval.protocol = Protocol::kKnn;
  auto with = [&](int g, int l, int c, bool shared) {
    RunConfig r = base;
    r.views.n_global = g;
    r.views.n_local = l;
    r.views.n_cutout = c;
    r.model.shared_predictor = shared;
    return r;
  };
  const auto t0 = std::chrono::steady_clock::now();
  const auto two = cmd_pretrain(with(2, 0, 0, false), quiet_to(dir / "two_view"));
  const auto multi = cmd_pretrain(with(2, 2, 1, false), quiet_to(dir / "multi_predictor"));
  const auto shared = cmd_pretrain(with(2, 2, 1, true), quiet_to(dir / "shared_predictor"));
  const double secs = seconds_since(t0);
  auto knn = [](const PretrainResult& r) { return r.report ? r.report->knn_top1.value_or(0) : 0.0; };
  v.require(two.exit_code == 0, "two-view run completed");
  v.require(multi.exit_code == 0 && !multi.nonfinite, "multi-predictor run finite");
  v.require(multi.collapsed_after_warmup == 0, "no collapse flag after warmup");
  v.require(knn(multi) >= knn(two), "multi-predictor kNN >= two-view kNN");
  v.require(secs <= 3600, "runtime <= 60 min total");
  v.detail << "kNN two-view " << 100 * knn(two) << "%, multi-predictor 2/2/1 " << 100 * knn(multi)
           << "% (collapse steps " << multi.collapsed_after_warmup << "), shared-predictor 2/2/1 "
           << 100 * knn(shared) << "% (collapse steps " << shared.collapsed_after_warmup << "), " << secs << " s";
  return v;
}

Verdict sampler_statistics() {
  Verdict v;
  constexpr std::size_t kDraws = 100000;
  Rng rng(3);
  double crop = 0, cut = 0;
  std::size_t fallbacks = 0;
  for (std::size_t i = 0; i < kDraws; ++i) {
    const auto d = sample_resized_crop(rng, 32, 32, {0.08, 1.0});
    v.require(d.rect.inside(32, 32), "crop in bounds");
    crop += static_cast<double>(d.rect.area()) / 1024.0;
  }
  for (std::size_t i = 0; i < kDraws; ++i) {
    const auto d = sample_cutout_rect(rng, 32, 32);
    v.require(d.rect.inside(32, 32), "cutout in bounds");
    const double f = static_cast<double>(d.rect.area()) / 1024.0;
    if (d.fallback) ++fallbacks;
    else if (f < 0.20 || f > 0.40) v.require(false, "cutout area in [0.20, 0.40]");
    cut += f;
  }
  crop /= kDraws;
  cut /= kDraws;
  const double crop_ref = oracle::mean_area_fraction(32, {0.08, 1.0}, kDraws, false);
  const double cut_ref = oracle::mean_area_fraction(32, {0.20, 0.40}, kDraws, true);
  v.require(std::abs(crop - crop_ref) <= 0.01 * crop_ref, "crop mean area");
  v.require(std::abs(cut - cut_ref) <= 0.01 * cut_ref, "cutout mean area");
  v.detail << "crop mean area " << crop << " vs oracle " << crop_ref << ", cutout " << cut << " vs " << cut_ref
           << ", flagged fallbacks " << fallbacks;
  return v;
}

Verdict evaluation_oracles() {
  Verdict v;
  std::size_t queries = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inst = oracle::random_knn_instance(seed);
    KnnClassifier knn(inst.bank, {inst.k, false});
    for (const auto& q : inst.queries) {
      v.require(knn.classify(q) == oracle::brute_force_knn(inst.bank, q, inst.k), "kNN seed " + std::to_string(seed));
      ++queries;
    }
  }
  // separable bank: class sets +-3 on the first coordinate
  auto separable = [](std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    FeatureBank b;
    b.dim = 5;
    b.n_classes = 2;
    for (std::size_t i = 0; i < n; ++i) {
      const int y = static_cast<int>(i % 2);
      for (std::size_t j = 0; j < 5; ++j) b.features.push_back(0.5 * rng.normal());
      b.features[i * 5] += y ? 3.0 : -3.0;
      b.labels.push_back(y);
    }
    return b;
  };
  const double sep = linear_probe(separable(1, 400), separable(2, 200), ProbeConfig{}).final_top1;
  v.require(sep >= 0.99, "separable probe >= 99%");
  auto gaussian = [](std::uint64_t seed, std::size_t n) {
    Rng rng(seed);
    FeatureBank b;
    b.dim = 8;
    b.n_classes = 4;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < 8; ++j) b.features.push_back(rng.normal());
      b.labels.push_back(static_cast<int>(i % 4));
    }
    return b;
  };
  auto train = gaussian(6, 1000);
  Rng perm(8);
  for (std::size_t i = train.size(); i > 1; --i)
    std::swap(train.labels[i - 1], train.labels[static_cast<std::size_t>(perm.uniform_int(0, static_cast<long>(i - 1)))]);
  const auto st = standardize(train);
  const double shuffled = linear_probe(st, apply_standardization(gaussian(7, 1000), st), ProbeConfig{}).final_top1;
  const double sigma3 = 3 * std::sqrt(0.25 * 0.75 / 1000);
  v.require(std::abs(shuffled - 0.25) <= sigma3, "permuted-label probe within 3 sigma of chance");
  v.detail << queries << " kNN queries agree with brute force; probe separable " << 100 * sep
           << "%, permuted labels " << 100 * shuffled << "% (chance 25 +- " << 100 * sigma3 << ")";
  return v;
}

Verdict determinism_and_persistence(const fs::path& dir) {
  Verdict v;
  auto c = tiny_run();
  c.views.n_local = 1;
  c.views.n_cutout = 1;
  cmd_pretrain(c, quiet_to(dir / "a"));
  cmd_pretrain(c, quiet_to(dir / "b"));
  const auto m = slurp(dir / "a" / "metrics.csv");
  v.require(!m.empty() && m == slurp(dir / "b" / "metrics.csv"), "metrics.csv bit-identical");

  HeadConfig hc = resolve_config(c).model;
  auto src = init_model<double>(hc, 1);
  auto dst = init_model<double>(hc, 2);
  save_checkpoint(dir / "rt.muln", src, static_cast<SgdMomentum<double>*>(nullptr), {});
  load_checkpoint(dir / "rt.muln", dst, static_cast<SgdMomentum<double>*>(nullptr));
  std::vector<double> a, b;
  src.visit([&](const std::string&, Tensor<double>& t, ParamRole) { a.insert(a.end(), t.values().begin(), t.values().end()); });
  dst.visit([&](const std::string&, Tensor<double>& t, ParamRole) { b.insert(b.end(), t.values().begin(), t.values().end()); });
  v.require(a == b, "checkpoint round trip parameter-exact");

  auto first = quiet_to(dir / "split", false);
  first.stop_after_epochs = 1;
  cmd_pretrain(c, first);
  auto second = quiet_to(dir / "split");
  second.resume = dir / "split" / "epoch_1.muln";
  cmd_pretrain(c, second);
  v.require(slurp(dir / "split" / "metrics.csv") == m, "resumed metrics equal uninterrupted");
  v.detail << "metrics.csv " << m.size() << " bytes identical across runs and after resume; " << a.size()
           << " checkpoint values restored exactly";
  return v;
}

std::size_t data_rows(const std::string& table) {
  return static_cast<std::size_t>(std::count(table.begin(), table.end(), '\n')) - 1;
}

Verdict ablation_harness(const fs::path& dir) {
  Verdict v;
  auto c = tiny_run();
  c.train.epochs = 1;
  const auto views = cmd_ablate(parse_grid(c, "views"), dir / "views", false, true);
  v.require(data_rows(views) == 5, "five view rows");
  std::size_t pos = 0;
  for (const char* label : {"2/0/0", "4/0/0", "2/4/0", "2/0/2", "2/2/1"}) {
    const auto at = views.find(std::string("\n") + label, pos);
    v.require(at != std::string::npos, std::string("row ") + label + " in order");
    if (at != std::string::npos) pos = at + 1;
  }
  v.require(views.find("failed") == std::string::npos, "view rows succeed");
  const auto aug = cmd_ablate(parse_grid(c, "augment"), dir / "augment", true, true);
  v.require(data_rows(aug) == 4, "four augmentation rows");
  v.require(aug.find("Remove crop") != std::string::npos, "Remove crop row");
  const auto broken = cmd_ablate(parse_grid(c, "2/0/0;0/2/0;2/2/1"), dir / "broken", false, true);
  v.require(data_rows(broken) == 3, "table complete with a failing row");
  v.require(broken.find("failed:") != std::string::npos, "failure recorded in its row");
  v.detail << "views table " << data_rows(views) << " rows, augment table " << data_rows(aug)
           << " rows, grid with one invalid row still tabulated " << data_rows(broken) << " rows\n"
           << views << aug;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::string tag = "acceptance";
  for (int i = 1; i < argc; ++i) tag += std::string("_") + argv[i];
  const fs::path root = testing::scratch_dir(tag);  // per selection, so parallel ctest runs do not collide
  const std::vector<std::pair<std::string, std::function<Verdict()>>> checks{
      {"gradient correctness", gradient_correctness},
      {"per-view accumulation equals joint backward", accumulation_equivalence},
      {"pair routing", pair_routing},
      {"predictor isolation", predictor_isolation},
      {"schedules", schedules},
      {"asymmetric vs symmetric cutout", [&] { return asymmetric_cutout(root / "c6"); }},
      {"multi-predictor multi-crop", [&] { return multi_predictor_multicrop(root / "c7"); }},
      {"sampler statistics", sampler_statistics},
      {"evaluation oracles", evaluation_oracles},
      {"determinism and persistence", [&] { return determinism_and_persistence(root / "c10"); }},
      {"ablation harness", [&] { return ablation_harness(root / "c11"); }},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  bool all_pass = true;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Verdict v;
    try {
      v = checks[i].second();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    all_pass = all_pass && v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << checks[i].first
              << "): " << v.line() << std::endl;
  }
  return all_pass ? 0 : 1;
}
