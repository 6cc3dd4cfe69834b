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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/model.hpp"
#include "mulan/objective.hpp"
#include "mulan/ops.hpp"
#include "mulan/rng.hpp"
#include "mulan/train.hpp"

namespace mulan {

/// A differentiable function of some leaf tensors, reduced to a scalar.
struct GradCase {
  std::string name;
  /// Fresh inputs for a seed.
  std::function<std::vector<Tensor<double>>(Rng&)> make_inputs;
  /// Scalar function of the inputs, recorded on the tape.
  std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)> f;
};

struct GradCheckLine {
  std::string name;
  double max_rel_error = 0;
  std::size_t coords = 0;
  std::size_t kinks = 0;  // coordinates whose stencil crossed a ReLU kink, not scored
  bool passed = true;
};

struct GradCheckOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double step = 3e-5;
  double tolerance = 1e-4;
  double floor = 1e-5;              // denominator floor for near-zero gradients
  std::size_t max_coords = 400;     // per input tensor and seed; sampled beyond that
  double max_kink_fraction = 0.02;  // more skipped coordinates than this fails the case
};

/// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline GradCheckLine run_grad_case(const GradCase& c, const GradCheckOptions& opt) {
  GradCheckLine line;
  line.name = c.name;
  for (std::uint64_t seed : opt.seeds) {
    Rng rng = Rng::stream({seed, 0x96adULL});
    auto inputs = c.make_inputs(rng);
    for (auto& t : inputs) t.set_requires_grad(true);
    Tape<double> tape;
    const auto out = c.f(tape, inputs);
    backward(out, tape);
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
    // value plus the sign pattern of every ReLU input; a central difference
    // whose stencil changes the pattern straddles a kink and says nothing
    // about the derivative
    auto eval = [&](std::vector<bool>& pattern) {
      Tape<double> probe_tape;
      const double v = c.f(probe_tape, inputs).item();
      pattern.clear();
      for (const auto& e : probe_tape.entries())
        if (e.op == "relu")
          for (double x : e.inputs[0]->value) pattern.push_back(x > 0);
      return v;
    };
    std::vector<bool> base, pattern;
    eval(base);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto vals = inputs[k].values_mut();
      std::vector<std::size_t> coords(vals.size());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
      if (coords.size() > opt.max_coords) {
        for (std::size_t i = 0; i < opt.max_coords; ++i)
          std::swap(coords[i], coords[i + static_cast<std::size_t>(rng.uniform_int(
                                          0, static_cast<std::int64_t>(coords.size() - i - 1)))]);
        coords.resize(opt.max_coords);
      }
      for (std::size_t i : coords) {
        const double saved = vals[i];
        // five-point central stencil, O(h^4) truncation error
        double f[4];
        bool crossed = false;
        const double offsets[4] = {2, 1, -1, -2};
        for (int s = 0; s < 4; ++s) {
          vals[i] = saved + offsets[s] * opt.step;
          f[s] = eval(pattern);
          crossed = crossed || pattern != base;
        }
        vals[i] = saved;
        if (crossed) {
          ++line.kinks;
          continue;
        }
        const double numeric = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * opt.step);
        line.max_rel_error = std::max(line.max_rel_error, rel_error(analytic[k][i], numeric, opt.floor));
        ++line.coords;
      }
    }
  }
  line.passed = line.max_rel_error <= opt.tolerance &&
                static_cast<double>(line.kinks) <= opt.max_kink_fraction * static_cast<double>(line.coords + line.kinks);
  return line;
}

// ---------------------------------------------------------------------------
// Built-in cases

namespace detail {

inline Tensor<double> randn(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values_mut()) v = scale * rng.normal();
  return t;
}

/// Weighted sum with fixed random weights, so every output coordinate gets a
/// distinct upstream gradient.
inline Tensor<double> probe(Tape<double>& tape, const Tensor<double>& x, std::uint64_t salt = 0) {
  Rng rng = Rng::stream({0x9e0beULL, salt, x.numel()});
  Tensor<double> w(x.shape());
  for (auto& v : w.values_mut()) v = rng.normal();
  return sum(tape, mul(tape, x, w));
}

/// Two-layer model with every head type, small enough for exhaustive checks.
inline HeadConfig tiny_head(Method m) {
  HeadConfig h;
  h.method = m;
  h.widths = {3, 4};
  h.proj_hidden = 6;
  h.proj_out = 5;
  h.pred_hidden = 6;
  h.view_types = {ViewType::kGlobal, ViewType::kLocal, ViewType::kCutout};
  return h;
}

/// Nonzero biases keep every prediction row away from the origin, where the
/// normalization is not differentiable. Zero-init biases behind a narrow
/// ReLU layer hit it often at these sizes.
inline void randomize_biases(SiameseModel<double>& model, Rng& rng) {
  model.visit_trainable([&](const std::string&, Tensor<double>& t, ParamRole role) {
    if (role == ParamRole::kBias)
      for (auto& v : t.values_mut()) v = 0.5 * rng.normal();
  });
}

/// Full multi-view loss on a (2, 2, 1) micro-batch as a function of every
/// trainable online tensor.
inline GradCase full_loss_case(Method method) {
  GradCase c;
  c.name = std::string("full_loss/") + std::string(to_string(method));
  auto model = std::make_shared<SiameseModel<double>>(init_model<double>(tiny_head(method), 11));
  auto data = std::make_shared<std::vector<Tensor<double>>>();
  c.make_inputs = [model, data](Rng& rng) {
    *model = init_model<double>(tiny_head(model->config.method), rng.next_u64());
    randomize_biases(*model, rng);
    data->clear();
    // online inputs of the five slots, then two target embeddings
    for (int s = 0; s < 5; ++s) data->push_back(randn(rng, {3, 3, 8, 8}));
    // targets are constants of the loss, so they are computed once up front
    for (int g = 0; g < 2; ++g) data->push_back(target_forward(*model, randn(rng, {3, 3, 8, 8})));
    std::vector<Tensor<double>> params;
    model->visit_trainable([&](const std::string&, Tensor<double>& t, ParamRole) { params.push_back(t); });
    return params;
  };
  c.f = [model, data](Tape<double>& tape, const std::vector<Tensor<double>>&) {
    ViewRecipe recipe;
    recipe.n_global = 2;
    recipe.n_local = 2;
    recipe.n_cutout = 1;
    const auto plan = route_pairs(recipe);
    const auto types = slot_types(recipe);
    ObjectiveConfig obj;
    obj.kind = objective_for(model->config.method);
    LossWeights w;
    w.lambda = {1.0, 0.7, 0.4};
    BnOptions opt;
    opt.update_running = false;
    const std::vector<Tensor<double>> targets{(*data)[5], (*data)[6]};
    std::vector<Tensor<double>> preds;
    for (std::size_t s = 0; s < types.size(); ++s) {
      const auto enc = encode(tape, model->online, (*data)[s], opt);
      preds.push_back(predict(tape, model->predictors, types[s], enc.z, opt));
    }
    return total_loss(tape, preds, targets, types, plan, w, obj).total;
  };
  return c;
}

}  // namespace detail

inline std::vector<GradCase> builtin_grad_cases() {
  using detail::probe;
  using detail::randn;
  using V = std::vector<Tensor<double>>;
  using Tp = Tape<double>;
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [](Rng& r) { return V{randn(r, {4, 5}), randn(r, {5, 3})}; },
                   [](Tp& t, const V& x) { return probe(t, matmul(t, x[0], x[1])); }});
  cases.push_back({"add_bias", [](Rng& r) { return V{randn(r, {4, 3}), randn(r, {3})}; },
                   [](Tp& t, const V& x) { return probe(t, add_bias(t, x[0], x[1])); }});
  cases.push_back({"relu", [](Rng& r) { return V{randn(r, {5, 4})}; },
                   [](Tp& t, const V& x) { return probe(t, relu(t, x[0])); }});
  cases.push_back({"add", [](Rng& r) { return V{randn(r, {3, 4}), randn(r, {3, 4})}; },
                   [](Tp& t, const V& x) { return probe(t, add(t, x[0], x[1])); }});
  cases.push_back({"mul", [](Rng& r) { return V{randn(r, {3, 4}), randn(r, {3, 4})}; },
                   [](Tp& t, const V& x) { return probe(t, mul(t, x[0], x[1])); }});
  cases.push_back({"scale", [](Rng& r) { return V{randn(r, {3, 4})}; },
                   [](Tp& t, const V& x) { return probe(t, scale(t, x[0], -1.7)); }});
  cases.push_back({"sub", [](Rng& r) { return V{randn(r, {3, 4}), randn(r, {3, 4})}; },
                   [](Tp& t, const V& x) { return probe(t, sub(t, x[0], x[1])); }});
  cases.push_back({"sum", [](Rng& r) { return V{randn(r, {3, 4})}; },
                   [](Tp& t, const V& x) { return scale(t, sum(t, mul(t, x[0], x[0])), 0.5); }});
  cases.push_back({"mean", [](Rng& r) { return V{randn(r, {3, 4})}; },
                   [](Tp& t, const V& x) { return mean(t, mul(t, x[0], x[0])); }});
  cases.push_back({"l2_normalize", [](Rng& r) { return V{randn(r, {4, 6})}; },
                   [](Tp& t, const V& x) { return probe(t, l2_normalize(t, x[0])); }});
  cases.push_back({"global_mean_pool", [](Rng& r) { return V{randn(r, {2, 3, 4, 4})}; },
                   [](Tp& t, const V& x) { return probe(t, global_mean_pool(t, x[0])); }});
  cases.push_back({"batchnorm/2d", [](Rng& r) { return V{randn(r, {6, 4}), randn(r, {4}), randn(r, {4})}; },
                   [](Tp& t, const V& x) {
                     BnRunning<double> run{Tensor<double>({4}, 0.0), Tensor<double>({4}, 1.0)};
                     return probe(t, batchnorm(t, x[0], x[1], x[2], run, {BnMode::kTrain, 1e-5, 0.1, false}));
                   }});
  cases.push_back({"batchnorm/4d", [](Rng& r) { return V{randn(r, {3, 2, 3, 3}), randn(r, {2}), randn(r, {2})}; },
                   [](Tp& t, const V& x) {
                     BnRunning<double> run{Tensor<double>({2}, 0.0), Tensor<double>({2}, 1.0)};
                     return probe(t, batchnorm(t, x[0], x[1], x[2], run, {BnMode::kTrain, 1e-5, 0.1, false}));
                   }});
  cases.push_back({"batchnorm/eval", [](Rng& r) { return V{randn(r, {5, 3}), randn(r, {3}), randn(r, {3})}; },
                   [](Tp& t, const V& x) {
                     BnRunning<double> run{Tensor<double>({3}, 0.2), Tensor<double>({3}, 1.5)};
                     return probe(t, batchnorm(t, x[0], x[1], x[2], run, {BnMode::kEval, 1e-5, 0.1, false}));
                   }});
  cases.push_back({"conv2d/stride1", [](Rng& r) { return V{randn(r, {2, 3, 5, 5}), randn(r, {4, 3, 3, 3})}; },
                   [](Tp& t, const V& x) { return probe(t, conv2d(t, x[0], x[1], 1)); }});
  cases.push_back({"conv2d/stride2", [](Rng& r) { return V{randn(r, {2, 2, 6, 6}), randn(r, {3, 2, 3, 3})}; },
                   [](Tp& t, const V& x) { return probe(t, conv2d(t, x[0], x[1], 2)); }});
  for (auto [label, kind] : {std::pair{"byol", Objective::kByol}, std::pair{"simsiam", Objective::kSimSiam},
                             std::pair{"infonce", Objective::kInfoNce}}) {
    cases.push_back({std::string("alignment_loss/") + label,
                     [](Rng& r) { return V{randn(r, {4, 5})}; },
                     [kind](Tp& t, const V& x) {
                       Rng tr = Rng::stream({0x7a46e7ULL});
                       std::vector<Tensor<double>> targets{randn(tr, {4, 5}), randn(tr, {4, 5})};
                       ObjectiveConfig obj;
                       obj.kind = kind;
                       return alignment_loss(t, x[0], targets, obj, 0.75);
                     }});
  }
  for (Method m : {Method::kByol, Method::kSimSiam, Method::kMocoV3}) cases.push_back(detail::full_loss_case(m));
  return cases;
}

// ---------------------------------------------------------------------------
// Per-view accumulation versus one joint backward

struct EquivalenceResult {
  double max_abs_diff = 0;
  std::size_t coords = 0;
  std::size_t high_water_small = 0;  // tape entries, per-view mode, few views
  std::size_t high_water_large = 0;  // tape entries, per-view mode, many views
  std::size_t high_water_joint = 0;  // tape entries, joint mode, many views
};

/// Gradients of the (2, 2, 1) loss accumulated view by view against a single
/// joint backward, plus peak tape sizes for (2, 0, 0) versus (2, 2, 1).
inline EquivalenceResult per_view_equivalence(std::uint64_t seed, Method method = Method::kByol) {
  EquivalenceResult res;
  auto cfg = detail::tiny_head(method);
  Rng rng = Rng::stream({seed, 0xacc0ULL});
  ViewRecipe big;
  big.n_global = 2;
  big.n_local = 2;
  big.n_cutout = 1;
  ViewRecipe small = big;
  small.n_local = 0;
  small.n_cutout = 0;
  auto inputs_for = [&](const ViewRecipe& r) {
    StepInputs<double> in;
    in.types = slot_types(r);
    for (ViewType v : in.types) {
      const std::size_t side = v == ViewType::kLocal ? 8 : 12;
      in.online.push_back(detail::randn(rng, {4, 3, side, side}));
      in.target.push_back(v == ViewType::kGlobal ? detail::randn(rng, {4, 3, side, side}) : Tensor<double>());
    }
    return in;
  };
  const auto in_big = inputs_for(big);
  const auto in_small = inputs_for(small);
  ObjectiveConfig obj;
  obj.kind = objective_for(method);
  LossWeights w;
  w.lambda = {1.0, 0.5, 0.25};

  auto grads = [&](Accumulation mode, const StepInputs<double>& in, const ViewRecipe& r, std::size_t& hw) {
    auto model = init_model<double>(cfg, seed);
    Rng bias_rng = Rng::stream({seed, 0xb1a5ULL});
    detail::randomize_biases(model, bias_rng);
    const auto pass = accumulate_gradients(model, in, route_pairs(r), w, obj, mode);
    hw = pass.high_water_entries;
    std::vector<double> g;
    model.visit_trainable([&](const std::string&, Tensor<double>& t, ParamRole) {
      if (!t.has_grad()) {
        g.insert(g.end(), t.numel(), 0.0);
        return;
      }
      auto tg = t.grad();
      g.insert(g.end(), tg.begin(), tg.end());
    });
    return g;
  };
  const auto per_view = grads(Accumulation::kPerView, in_big, big, res.high_water_large);
  const auto joint = grads(Accumulation::kJoint, in_big, big, res.high_water_joint);
  grads(Accumulation::kPerView, in_small, small, res.high_water_small);
  for (std::size_t i = 0; i < per_view.size(); ++i)
    res.max_abs_diff = std::max(res.max_abs_diff, std::abs(per_view[i] - joint[i]));
  res.coords = per_view.size();
  return res;
}

struct GradCheckReport {
  std::vector<GradCheckLine> lines;
  EquivalenceResult equivalence;
  double equivalence_tolerance = 1e-6;
  bool passed = true;

  std::string to_text() const {
    std::ostringstream os;
    os << std::left;
    for (const auto& l : lines)
      os << (l.passed ? "PASS " : "FAIL ") << std::setw(26) << l.name << " max_rel_err=" << std::scientific
         << std::setprecision(3) << l.max_rel_error << " coords=" << std::defaultfloat << l.coords
         << (l.kinks ? " kink_skipped=" + std::to_string(l.kinks) : std::string()) << "\n";
    const bool eq_ok = equivalence.max_abs_diff <= equivalence_tolerance &&
                       equivalence.high_water_small == equivalence.high_water_large;
    os << (eq_ok ? "PASS " : "FAIL ") << std::setw(26) << "per_view_vs_joint"
       << " max_abs_diff=" << std::scientific << std::setprecision(3) << equivalence.max_abs_diff
       << std::defaultfloat << " coords=" << equivalence.coords
       << " tape_peak(2/0/0)=" << equivalence.high_water_small
       << " tape_peak(2/2/1)=" << equivalence.high_water_large
       << " tape_peak_joint(2/2/1)=" << equivalence.high_water_joint << "\n";
    os << (passed ? "gradcheck: all checks passed" : "gradcheck: FAILED") << "\n";
    return os.str();
  }
};

/// Runs `cases` (the built-in ones when empty) and the accumulation check.
inline GradCheckReport cmd_gradcheck(const GradCheckOptions& opt = {}, std::vector<GradCase> cases = {}) {
  if (cases.empty()) cases = builtin_grad_cases();
  GradCheckReport rep;
  for (const auto& c : cases) {
    rep.lines.push_back(run_grad_case(c, opt));
    rep.passed = rep.passed && rep.lines.back().passed;
  }
  rep.equivalence = per_view_equivalence(opt.seeds.empty() ? 1 : opt.seeds.front());
  rep.passed = rep.passed && rep.equivalence.max_abs_diff <= rep.equivalence_tolerance &&
               rep.equivalence.high_water_small == rep.equivalence.high_water_large;
  return rep;
}

}  // namespace mulan
