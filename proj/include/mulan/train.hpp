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

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/datasets.hpp"
#include "mulan/model.hpp"
#include "mulan/objective.hpp"

namespace mulan {

// ---------------------------------------------------------------------------
// Schedules

struct Schedule {
  double base_lr = 0.4;  // reference value at batch size 256
  std::size_t batch_size = 256;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;
  double ema_base = 0.996;

  double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }

  void validate() const {
    if (warmup_steps > total_steps) throw ConfigError("warmup longer than the whole schedule");
    if (ema_base < 0 || ema_base > 1) throw ConfigError("ema_base must lie in [0, 1]");
    if (total_steps == 0) throw ConfigError("schedule needs at least one step");
  }
};

/// Linear warmup from 0 to the peak, then half-cosine decay to 0 at total_steps.
inline double lr_at(std::uint64_t step, const Schedule& s) {
  const double peak = s.peak_lr();
  if (step < s.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  const std::uint64_t decay = s.total_steps - s.warmup_steps;
  if (decay == 0) return peak;
  const double progress =
      std::min(1.0, static_cast<double>(step - s.warmup_steps) / static_cast<double>(decay));
  return peak * (std::cos(M_PI * progress) + 1.0) / 2.0;
}

/// tau(k) = 1 - (1 - ema_base) * (cos(pi k / K) + 1) / 2.
inline double ema_tau_at(std::uint64_t step, const Schedule& s) {
  const double progress =
      std::min(1.0, static_cast<double>(step) / static_cast<double>(s.total_steps));
  return 1.0 - (1.0 - s.ema_base) * (std::cos(M_PI * progress) + 1.0) / 2.0;
}

// ---------------------------------------------------------------------------
// Optimizer

/// v <- m v + g + wd w (wd skipped when excluded); w <- w - lr v.
template <typename T>
void sgd_momentum_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity,
                       double lr, double momentum, double weight_decay, bool exclude_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw DimensionError("sgd_momentum_step: buffer sizes differ");
  const T m = static_cast<T>(momentum);
  const T wd = exclude_decay ? T(0) : static_cast<T>(weight_decay);
  const T eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] + grads[i] + wd * params[i];
    params[i] -= eta * velocity[i];
  }
}

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 1.5e-6;
  bool constant_predictor_lr = false;  // predictor group skips the schedule
};

inline bool is_predictor_param(const std::string& name) { return name.rfind("predictor.", 0) == 0; }

/// SGD with momentum over the trainable tensors of a SiameseModel. Biases and
/// normalization parameters are excluded from weight decay.
template <typename T>
class SgdMomentum {
 public:
  explicit SgdMomentum(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::map<std::string, Tensor<T>>& velocity() { return velocity_; }

  /// Tensors whose name starts with one of `frozen` are left untouched,
  /// including their momentum and weight decay.
  void step(SiameseModel<T>& model, double encoder_lr, double predictor_lr,
            const std::vector<std::string>& frozen = {}) {
    model.visit_trainable([&](const std::string& name, Tensor<T>& p, ParamRole role) {
      for (const auto& f : frozen)
        if (name.rfind(f, 0) == 0) return;
      auto it = velocity_.find(name);
      if (it == velocity_.end()) it = velocity_.emplace(name, Tensor<T>(p.shape(), T(0))).first;
      if (!p.has_grad()) p.grad_mut();
      const bool excluded = role == ParamRole::kBias || role == ParamRole::kNormAffine;
      const double lr = is_predictor_param(name) ? predictor_lr : encoder_lr;
      sgd_momentum_step<T>(p.values_mut(), p.grad(), it->second.values_mut(), lr, cfg_.momentum,
                           cfg_.weight_decay, excluded);
    });
  }

 private:
  OptimizerConfig cfg_;
  std::map<std::string, Tensor<T>> velocity_;
};

/// Name prefixes of predictor heads that no routed view of `plan` uses.
template <typename T>
std::vector<std::string> idle_predictor_prefixes(SiameseModel<T>& model, const PairPlan& plan,
                                                 const std::vector<ViewType>& types) {
  std::array<bool, 3> used{false, false, false};
  for (int s : plan.online_slots()) used[index_of(types.at(static_cast<std::size_t>(s)))] = true;
  const auto& bank = model.predictors;
  std::vector<bool> head_used(bank.heads.size(), false);
  for (ViewType v : kAllViewTypes)
    if (bank.has(v) && used[index_of(v)]) head_used[static_cast<std::size_t>(bank.slot[index_of(v)])] = true;
  std::vector<std::string> out;
  for (ViewType v : kAllViewTypes) {
    if (!bank.has(v)) continue;
    const auto h = static_cast<std::size_t>(bank.slot[index_of(v)]);
    if (head_used[h]) continue;
    const std::string name = bank.shared() ? "shared" : std::string(to_string(v));
    out.push_back("predictor." + name + ".");
  }
  return out;
}

/// Learning rates of the (encoder, predictor) groups at a step.
struct GroupRates {
  double encoder = 0;
  double predictor = 0;
};

inline GroupRates constant_lr_group(const Schedule& s, std::uint64_t step, bool constant_predictor) {
  GroupRates r;
  r.encoder = lr_at(step, s);
  r.predictor = constant_predictor ? s.peak_lr() : r.encoder;
  return r;
}

// ---------------------------------------------------------------------------
// Collapse diagnostics

struct CollapseStats {
  std::vector<double> per_dim_std;
  double mean_std = 0;
  double mean_cosine = 0;
  double grad_norm = 0;
  bool collapsed = false;
};

/// Default threshold: 0.2 / sqrt(D), a fixed fraction of the isotropic value
/// 1 / sqrt(D).
inline double default_collapse_threshold(std::size_t dim) {
  return 0.2 / std::sqrt(static_cast<double>(dim));
}

template <typename T>
CollapseStats collapse_stats(const Tensor<T>& embeddings, double threshold = -1) {
  if (embeddings.rank() != 2 || embeddings.dim(0) < 2)
    throw ContractError("collapse_stats: needs an N x D matrix with N >= 2");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  Tape<T> off = Tape<T>::no_grad();
  const auto unit = l2_normalize(off, embeddings);
  auto u = unit.values();
  CollapseStats st;
  st.per_dim_std.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m += u[i * d + j];
    m /= static_cast<double>(n);
    double v = 0;
    for (std::size_t i = 0; i < n; ++i) v += (u[i * d + j] - m) * (u[i * d + j] - m);
    st.per_dim_std[j] = std::sqrt(v / static_cast<double>(n));
  }
  st.mean_std = std::accumulate(st.per_dim_std.begin(), st.per_dim_std.end(), 0.0) /
                static_cast<double>(d);
  double cos_sum = 0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += u[a * d + j] * u[b * d + j];
      cos_sum += s;
    }
  st.mean_cosine = cos_sum / (static_cast<double>(n * (n - 1)) / 2.0);
  if (threshold < 0) threshold = default_collapse_threshold(d);
  st.collapsed = st.mean_std < threshold;
  return st;
}

// ---------------------------------------------------------------------------
// Training step

/// Thrown when a step produces a non-finite loss; carries a snapshot.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, std::string snapshot)
      : NumericError(what), snapshot_(std::move(snapshot)) {}
  const std::string& snapshot() const { return snapshot_; }

 private:
  std::string snapshot_;
};

/// Batched views of one step: per slot, the online input and (for global
/// slots) the target input.
template <typename T>
struct StepInputs {
  std::vector<ViewType> types;
  std::vector<Tensor<T>> online;
  std::vector<Tensor<T>> target;
};

template <typename T>
StepInputs<T> stack_step_inputs(const std::vector<ViewBatch>& batch) {
  if (batch.empty()) throw ContractError("empty batch");
  StepInputs<T> in;
  const std::size_t slots = batch.front().views.size();
  for (std::size_t s = 0; s < slots; ++s) {
    std::vector<const Image*> on, tg;
    for (const auto& vb : batch) {
      on.push_back(&vb.views.at(s).online);
      tg.push_back(&vb.views.at(s).target);
    }
    in.types.push_back(batch.front().views[s].type);
    in.online.push_back(stack_images<T>(on));
    in.target.push_back(in.types.back() == ViewType::kGlobal ? stack_images<T>(tg) : Tensor<T>());
  }
  return in;
}

enum class Accumulation { kPerView, kJoint };

template <typename T>
struct GradientPass {
  double loss_total = 0;
  std::array<double, 3> loss_per_type{0, 0, 0};
  std::size_t high_water_entries = 0;
  std::size_t high_water_values = 0;
  Tensor<T> probe_z;  // online projection of the first global view
};

/// Computes target embeddings once, then accumulates gradients of the
/// multi-view loss into the online parameters, either one view at a time
/// (tape released after each view) or with a single joint backward.
template <typename T>
GradientPass<T> accumulate_gradients(SiameseModel<T>& model, const StepInputs<T>& in,
                                     const PairPlan& plan, const LossWeights& weights,
                                     const ObjectiveConfig& obj, Accumulation mode) {
  GradientPass<T> out;
  std::vector<Tensor<T>> targets(in.types.size());
  for (std::size_t s = 0; s < in.types.size(); ++s)
    if (in.types[s] == ViewType::kGlobal) targets[s] = target_forward(model, in.target[s]);

  BnOptions train_opt;
  Tape<T> tape;
  auto loss_for_slot = [&](int s) {
    const auto us = static_cast<std::size_t>(s);
    const auto enc = encode(tape, model.online, in.online[us], train_opt);
    if (s == 0) out.probe_z = enc.z.detach();
    const auto p = predict(tape, model.predictors, in.types[us], enc.z, train_opt);
    std::vector<Tensor<T>> ts;
    for (int g : plan.targets_of(s)) ts.push_back(targets[static_cast<std::size_t>(g)]);
    const T scale = static_cast<T>(pair_scale(plan, weights, in.types[us]));
    return alignment_loss(tape, p, ts, obj, scale);
  };

  const auto slots = plan.online_slots();
  if (mode == Accumulation::kPerView) {
    for (int s : slots) {
      const auto loss = loss_for_slot(s);
      backward(loss, tape);
      out.loss_per_type[index_of(in.types[static_cast<std::size_t>(s)])] += loss.item();
      out.loss_total += loss.item();
      tape.clear();
    }
  } else {
    Tensor<T> total;
    for (int s : slots) {
      const auto loss = loss_for_slot(s);
      out.loss_per_type[index_of(in.types[static_cast<std::size_t>(s)])] += loss.item();
      total = total.defined() ? add(tape, total, loss) : loss;
    }
    backward(total, tape);
    out.loss_total = total.item();
  }
  out.high_water_entries = tape.high_water_entries();
  out.high_water_values = tape.high_water_values();
  if (!out.probe_z.defined()) {
    // first global view is not routed as an online view (single global view)
    Tape<T> off = Tape<T>::no_grad();
    BnOptions opt;
    opt.update_running = false;
    out.probe_z = encode(off, model.online, in.online[0], opt).z;
  }
  return out;
}

template <typename T>
double grad_norm(SiameseModel<T>& model) {
  double sq = 0;
  model.visit_trainable([&](const std::string&, Tensor<T>& t, ParamRole) {
    if (!t.has_grad()) return;
    for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  });
  return std::sqrt(sq);
}

struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double loss_total = 0;
  std::array<double, 3> loss{0, 0, 0};  // global, local, cutout
  double lr = 0;
  double lr_pred = 0;
  double ema_tau = 1;
  double embed_std = 0;
  double grad_norm = 0;
  double time_ms = 0;
  bool collapsed = false;
};

struct StepConfig {
  ObjectiveConfig objective;
  LossWeights weights;
  bool constant_predictor_lr = false;
  double collapse_threshold = -1;  // < 0: default_collapse_threshold(D)
};

/// One optimizer step: target embeddings, per-view forward/backward with
/// gradient accumulation, SGD update, EMA update, collapse statistics.
template <typename T>
MetricsRow train_step(SiameseModel<T>& model, SgdMomentum<T>& opt, const StepInputs<T>& in,
                      const PairPlan& plan, const Schedule& schedule, std::uint64_t step,
                      const StepConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  MetricsRow row;
  row.step = step;
  model.zero_grad();
  GradientPass<T> pass;
  try {
    pass = accumulate_gradients(model, in, plan, cfg.weights, cfg.objective, Accumulation::kPerView);
  } catch (const NumericError& e) {
    std::ostringstream snap;
    snap << "step=" << step << "\nerror=" << e.what() << "\ngrad_norm=" << grad_norm(model) << "\n";
    throw TrainingAborted(std::string("non-finite value at step ") + std::to_string(step) + ": " +
                              e.what(),
                          snap.str());
  }
  row.loss_total = pass.loss_total;
  row.loss = pass.loss_per_type;
  row.grad_norm = grad_norm(model);
  if (!std::isfinite(row.loss_total) || !std::isfinite(row.grad_norm)) {
    std::ostringstream snap;
    snap << "step=" << step << "\nloss_total=" << row.loss_total << "\nloss_global=" << row.loss[0]
         << "\nloss_local=" << row.loss[1] << "\nloss_cutout=" << row.loss[2]
         << "\ngrad_norm=" << row.grad_norm << "\n";
    throw TrainingAborted("non-finite loss or gradient at step " + std::to_string(step), snap.str());
  }

  const auto rates = constant_lr_group(schedule, step, cfg.constant_predictor_lr);
  row.lr = rates.encoder;
  row.lr_pred = rates.predictor;
  opt.step(model, rates.encoder, rates.predictor, idle_predictor_prefixes(model, plan, in.types));
  if (model.target) {
    row.ema_tau = ema_tau_at(step, schedule);
    ema_update(*model.target, model.online, row.ema_tau);
  }
  model.zero_grad();

  const auto stats = collapse_stats(pass.probe_z, cfg.collapse_threshold);
  row.embed_std = stats.mean_std;
  row.collapsed = stats.collapsed;
  row.time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return row;
}

/// Epoch order: a seeded Fisher-Yates shuffle keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng::stream({seed, epoch, 0x5a0ffULL});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace mulan
