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
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/model.hpp"
#include "mulan/tensor.hpp"

namespace mulan {

enum class Objective { kByol, kSimSiam, kInfoNce };

inline Objective objective_for(Method m) {
  switch (m) {
    case Method::kByol:
      return Objective::kByol;
    case Method::kSimSiam:
      return Objective::kSimSiam;
    case Method::kMocoV3:
      return Objective::kInfoNce;
  }
  return Objective::kByol;
}

struct ObjectiveConfig {
  Objective kind = Objective::kByol;
  double temperature = 0.2;
  double eps = 1e-12;
};

// ---------------------------------------------------------------------------
// Pair routing

struct PairRoute {
  int online = 0;  // slot of the online view
  int target = 0;  // slot of the global view providing the target
  ViewType type = ViewType::kGlobal;

  friend bool operator==(const PairRoute&, const PairRoute&) = default;
};

struct PairPlan {
  std::vector<PairRoute> pairs;

  std::array<int, 3> count_by_type() const {
    std::array<int, 3> c{0, 0, 0};
    for (const auto& p : pairs) ++c[index_of(p.type)];
    return c;
  }
  std::vector<int> targets_of(int online_slot) const {
    std::vector<int> t;
    for (const auto& p : pairs)
      if (p.online == online_slot) t.push_back(p.target);
    return t;
  }
  /// Online slots that appear in at least one pair, ascending.
  std::vector<int> online_slots() const {
    std::vector<int> s;
    for (const auto& p : pairs)
      if (std::find(s.begin(), s.end(), p.online) == s.end()) s.push_back(p.online);
    std::sort(s.begin(), s.end());
    return s;
  }
};

/// Every global view predicts every other global view; every local and cutout
/// view predicts every global view. Slots follow slot_types(): globals first.
inline PairPlan route_pairs(const ViewRecipe& recipe) {
  if (recipe.n_global < 1) throw ConfigError("route_pairs: at least one global view is required");
  PairPlan plan;
  const auto types = slot_types(recipe);
  for (int s = 0; s < static_cast<int>(types.size()); ++s) {
    for (int g = 0; g < recipe.n_global; ++g) {
      if (g == s) continue;
      plan.pairs.push_back({s, g, types[static_cast<std::size_t>(s)]});
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Per-vector losses

namespace detail {

template <typename T>
std::vector<T> normalized(std::span<const T> v, T eps) {
  T sq = 0;
  for (T x : v) sq += x * x;
  const T d = std::max(std::sqrt(sq), eps);
  std::vector<T> out(v.begin(), v.end());
  for (auto& x : out) x /= d;
  return out;
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// ||p/|p| - z/|z|||^2, which equals 2 - 2 cos(p, z) for nonzero inputs.
template <typename T>
T byol_pair_loss(std::span<const T> p, std::span<const T> z, T eps = T(1e-12)) {
  if (p.size() != z.size()) throw DimensionError("byol_pair_loss: length mismatch");
  const auto ph = detail::normalized(p, eps), zh = detail::normalized(z, eps);
  T s = 0;
  for (std::size_t i = 0; i < ph.size(); ++i) s += (ph[i] - zh[i]) * (ph[i] - zh[i]);
  return s;
}

template <typename T>
T simsiam_pair_loss(std::span<const T> p, std::span<const T> z, T eps = T(1e-12)) {
  if (p.size() != z.size()) throw DimensionError("simsiam_pair_loss: length mismatch");
  const auto ph = detail::normalized(p, eps), zh = detail::normalized(z, eps);
  return -detail::dot<T>(ph, zh);
}

/// Cross-entropy over cosine similarities / temperature with the positive at
/// index 0.
template <typename T>
T infonce_loss(std::span<const T> q, std::span<const T> positive,
               const std::vector<std::span<const T>>& negatives, T temperature,
               T eps = T(1e-12)) {
  if (temperature <= 0) throw ConfigError("infonce_loss: temperature must be positive");
  if (negatives.empty()) throw ConfigError("infonce_loss: needs at least one negative");
  const auto qh = detail::normalized(q, eps);
  std::vector<T> logits;
  logits.push_back(detail::dot<T>(qh, detail::normalized(positive, eps)) / temperature);
  for (auto n : negatives) logits.push_back(detail::dot<T>(qh, detail::normalized(n, eps)) / temperature);
  const T mx = *std::max_element(logits.begin(), logits.end());
  T se = 0;
  for (T l : logits) se += std::exp(l - mx);
  return mx + std::log(se) - logits[0];
}

// ---------------------------------------------------------------------------
// Batched alignment loss

/// scale * sum over targets of the batch-mean pair loss between predictions
/// p (N x D) and each target (N x D). Targets are constants: no gradient
/// reaches them. Recorded as a single tape entry regardless of target count.
template <typename T>
Tensor<T> alignment_loss(Tape<T>& tape, const Tensor<T>& p, const std::vector<Tensor<T>>& targets,
                         const ObjectiveConfig& obj, T scale) {
  if (p.rank() != 2) throw DimensionError("alignment_loss: predictions must be N x D");
  const std::size_t n = p.dim(0), d = p.dim(1);
  const T eps = static_cast<T>(obj.eps);
  const T temp = static_cast<T>(obj.temperature);
  if (obj.kind == Objective::kInfoNce) {
    if (temp <= 0) throw ConfigError("alignment_loss: temperature must be positive");
    if (n < 2) throw ConfigError("alignment_loss: contrastive loss needs in-batch negatives (N >= 2)");
  }
  for (const auto& t : targets)
    if (t.shape() != p.shape())
      throw DimensionError("alignment_loss: target shape " + shape_str(t.shape()) +
                           " differs from prediction " + shape_str(p.shape()));

  auto pv = p.values();
  std::vector<T> ph(n * d), norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    T sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += pv[i * d + j] * pv[i * d + j];
    norm[i] = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < d; ++j) ph[i * d + j] = pv[i * d + j] / norm[i];
  }
  // gradient of the loss with respect to the normalized predictions
  std::vector<T> g_hat(n * d, T(0));
  T total = 0;
  const T inv_n = T(1) / static_cast<T>(n);
  for (const auto& target : targets) {
    auto tv = target.values();
    std::vector<T> zh(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      T sq = 0;
      for (std::size_t j = 0; j < d; ++j) sq += tv[i * d + j] * tv[i * d + j];
      const T dn = std::max(std::sqrt(sq), eps);
      for (std::size_t j = 0; j < d; ++j) zh[i * d + j] = tv[i * d + j] / dn;
    }
    if (obj.kind == Objective::kByol) {
      for (std::size_t k = 0; k < n * d; ++k) {
        const T diff = ph[k] - zh[k];
        total += inv_n * diff * diff;
        g_hat[k] += inv_n * T(2) * diff;
      }
    } else if (obj.kind == Objective::kSimSiam) {
      for (std::size_t k = 0; k < n * d; ++k) {
        total -= inv_n * ph[k] * zh[k];
        g_hat[k] -= inv_n * zh[k];
      }
    } else {
      std::vector<T> logits(n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t m = 0; m < n; ++m) {
          T s = 0;
          for (std::size_t j = 0; j < d; ++j) s += ph[i * d + j] * zh[m * d + j];
          logits[m] = s / temp;
        }
        const T mx = *std::max_element(logits.begin(), logits.end());
        T se = 0;
        for (std::size_t m = 0; m < n; ++m) {
          logits[m] = std::exp(logits[m] - mx);
          se += logits[m];
        }
        total += inv_n * (-std::log(logits[i] / se));
        for (std::size_t m = 0; m < n; ++m) {
          const T dl = inv_n * (logits[m] / se - (m == i ? T(1) : T(0))) / temp;
          for (std::size_t j = 0; j < d; ++j) g_hat[i * d + j] += dl * zh[m * d + j];
        }
      }
    }
  }
  Tensor<T> out = Tensor<T>::scalar(scale * total);
  check_finite(out, "alignment_loss");
  if (tape.should_record(p)) {
    tape.record("alignment_loss", {p}, out,
                [n, d, eps, scale, ph = std::move(ph), norm = std::move(norm),
                 g_hat = std::move(g_hat)](const auto& e) {
                  const T go = e.output_grad()[0] * scale;
                  auto gp = e.input_grad(0);
                  for (std::size_t i = 0; i < n; ++i) {
                    const T* gh = g_hat.data() + i * d;
                    const T* y = ph.data() + i * d;
                    if (norm[i] > eps) {
                      T dt = 0;
                      for (std::size_t j = 0; j < d; ++j) dt += y[j] * gh[j];
                      for (std::size_t j = 0; j < d; ++j)
                        gp[i * d + j] += go * (gh[j] - y[j] * dt) / norm[i];
                    } else {
                      for (std::size_t j = 0; j < d; ++j) gp[i * d + j] += go * gh[j] / eps;
                    }
                  }
                });
  }
  return out;
}

struct LossWeights {
  std::array<double, 3> lambda{1.0, 1.0, 1.0};  // indexed by ViewType
};

/// Weight applied to a single (online view, target) pair loss so that each
/// view type contributes lambda_v times the mean of its pair losses.
inline double pair_scale(const PairPlan& plan, const LossWeights& w, ViewType v) {
  const int count = plan.count_by_type()[index_of(v)];
  return count > 0 ? w.lambda[index_of(v)] / count : 0.0;
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  std::array<double, 3> per_type{0, 0, 0};  // weighted components, indexed by ViewType
};

/// Sum over view types of lambda_v times the mean pair loss of that type.
/// `predictions[s]` is the predictor output of online slot s (may be undefined
/// for slots without pairs); `targets[g]` the target embedding of global slot g.
template <typename T>
LossBreakdown<T> total_loss(Tape<T>& tape, const std::vector<Tensor<T>>& predictions,
                            const std::vector<Tensor<T>>& targets, const std::vector<ViewType>& types,
                            const PairPlan& plan, const LossWeights& weights,
                            const ObjectiveConfig& obj) {
  if (plan.pairs.empty()) throw ConfigError("total_loss: empty pair plan");
  LossBreakdown<T> out;
  for (int s : plan.online_slots()) {
    const auto& p = predictions.at(static_cast<std::size_t>(s));
    if (!p.defined()) throw ContractError("total_loss: missing prediction for a routed slot");
    std::vector<Tensor<T>> ts;
    for (int g : plan.targets_of(s)) ts.push_back(targets.at(static_cast<std::size_t>(g)));
    const ViewType v = types.at(static_cast<std::size_t>(s));
    const auto term = alignment_loss(tape, p, ts, obj, static_cast<T>(pair_scale(plan, weights, v)));
    out.per_type[index_of(v)] += static_cast<double>(term.item());
    out.total = out.total.defined() ? add(tape, out.total, term) : term;
  }
  return out;
}

}  // namespace mulan
