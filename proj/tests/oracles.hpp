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

// Reference implementations shared by the unit tests and the acceptance
// binary. Deliberately naive: full sorts, no caching.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/eval.hpp"
#include "mulan/objective.hpp"
#include "mulan/rng.hpp"

namespace mulan::oracle {

/// Cosine kNN by exhaustive scoring and a full stable sort. Same tie rules as
/// the classifier: nearer first, then lower index; vote by count, then summed
/// similarity, then lower class id.
inline int brute_force_knn(const FeatureBank& bank, std::span<const double> q, std::size_t k) {
  const std::size_t n = bank.size(), d = bank.dim;
  k = std::min(k, n);
  double qq = 0;
  for (double v : q) qq += v * v;
  const double qn = std::max(std::sqrt(qq), 1e-12);
  std::vector<double> sim(n);
  for (std::size_t i = 0; i < n; ++i) {
    double rr = 0;
    for (std::size_t j = 0; j < d; ++j) rr += bank.features[i * d + j] * bank.features[i * d + j];
    const double rn = std::max(std::sqrt(rr), 1e-12);
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += bank.features[i * d + j] / rn * q[j];
    sim[i] = s / qn;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  std::map<int, std::pair<int, double>> tally;
  for (std::size_t r = 0; r < k; ++r) {
    auto& t = tally[bank.labels[order[r]]];
    t.first += 1;
    t.second += sim[order[r]];
  }
  int best = -1;
  std::pair<int, double> best_t{-1, 0};
  for (const auto& [c, t] : tally)
    if (t.first > best_t.first || (t.first == best_t.first && t.second > best_t.second)) {
      best = c;
      best_t = t;
    }
  return best;
}

struct KnnInstance {
  FeatureBank bank;
  std::vector<std::vector<double>> queries;
  std::size_t k = 20;
};

/// Random clustered bank with N <= 1000, a random k and 10 queries.
inline KnnInstance random_knn_instance(std::uint64_t seed) {
  Rng rng = Rng::stream({seed, 0x6b6e6eULL});
  KnnInstance inst;
  const auto n = static_cast<std::size_t>(rng.uniform_int(5, 1000));
  const auto d = static_cast<std::size_t>(rng.uniform_int(2, 16));
  const int classes = static_cast<int>(rng.uniform_int(2, 6));
  inst.k = static_cast<std::size_t>(rng.uniform_int(1, 25));
  inst.bank.dim = d;
  inst.bank.n_classes = classes;
  std::vector<double> centers(static_cast<std::size_t>(classes) * d);
  for (auto& c : centers) c = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(rng.uniform_int(0, classes - 1));
    for (std::size_t j = 0; j < d; ++j)
      inst.bank.features.push_back(centers[static_cast<std::size_t>(y) * d + j] + rng.normal());
    inst.bank.labels.push_back(y);
  }
  for (int q = 0; q < 10; ++q) {
    std::vector<double> v(d);
    for (auto& x : v) x = 1.5 * rng.normal();
    inst.queries.push_back(v);
  }
  return inst;
}

/// Independent re-implementation of the rejection sampler on std::mt19937_64
/// for a square image; mean realized area fraction over `draws`. `strict`
/// also rejects rounded rects whose area falls outside the range.
inline double mean_area_fraction(std::size_t side, Range area, std::size_t draws, bool strict) {
  std::mt19937_64 gen(12345);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double full = static_cast<double>(side * side);
  double total = 0;
  for (std::size_t d = 0; d < draws; ++d) {
    double frac = 1.0;  // square image: fallback is the whole image
    for (int attempt = 0; attempt < 10; ++attempt) {
      const double a = full * (area.lo + (area.hi - area.lo) * u01(gen));
      const double r = std::exp(std::log(0.75) + (std::log(4.0 / 3.0) - std::log(0.75)) * u01(gen));
      const long w = std::lround(std::sqrt(a * r)), h = std::lround(std::sqrt(a / r));
      const double f = static_cast<double>(w * h) / full;
      if (w > 0 && h > 0 && w <= static_cast<long>(side) && h <= static_cast<long>(side) &&
          (!strict || (f >= area.lo && f <= area.hi))) {
        frac = f;
        break;
      }
    }
    total += frac;
  }
  return total / static_cast<double>(draws);
}

/// Every (online slot, target slot) pair written out by hand: globals predict
/// the other globals, locals and cutouts predict every global.
inline std::vector<PairRoute> enumerate_pairs(int g, int l, int c) {
  std::vector<PairRoute> out;
  for (int s = 0; s < g; ++s)
    for (int t = 0; t < g; ++t)
      if (s != t) out.push_back({s, t, ViewType::kGlobal});
  for (int s = g; s < g + l; ++s)
    for (int t = 0; t < g; ++t) out.push_back({s, t, ViewType::kLocal});
  for (int s = g + l; s < g + l + c; ++s)
    for (int t = 0; t < g; ++t) out.push_back({s, t, ViewType::kCutout});
  return out;
}

/// Symmetric two-view BYOL, 2 - 2 cos per row, averaged over rows and both
/// directions. No library code involved.
inline double two_view_byol(const std::vector<double>& p1, const std::vector<double>& p2,
                            const std::vector<double>& z1, const std::vector<double>& z2, std::size_t d) {
  auto cos_row = [d](const std::vector<double>& a, const std::vector<double>& b, std::size_t i) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t j = 0; j < d; ++j) {
      ab += a[i * d + j] * b[i * d + j];
      aa += a[i * d + j] * a[i * d + j];
      bb += b[i * d + j] * b[i * d + j];
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
  };
  const std::size_t n = p1.size() / d;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += (2 - 2 * cos_row(p1, z2, i)) + (2 - 2 * cos_row(p2, z1, i));
  return total / static_cast<double>(2 * n);
}

}  // namespace mulan::oracle
