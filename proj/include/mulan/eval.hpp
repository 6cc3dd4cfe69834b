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
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/datasets.hpp"
#include "mulan/model.hpp"
#include "mulan/rng.hpp"

namespace mulan {

/// Row-major N x D matrix of frozen features with labels.
struct FeatureBank {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<int> labels;
  int n_classes = 0;
  std::vector<double> mean;  // standardization stats, empty until standardized
  std::vector<double> std;

  std::size_t size() const { return labels.size(); }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }
};

// ---------------------------------------------------------------------------
// kNN

struct KnnOptions {
  std::size_t k = 20;
  bool warn_on_clamp = true;
};

namespace detail {

inline std::vector<double> unit_rows(const std::vector<double>& m, std::size_t dim) {
  std::vector<double> out(m);
  const std::size_t n = dim ? m.size() / dim : 0;
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t j = 0; j < dim; ++j) sq += out[i * dim + j] * out[i * dim + j];
    const double d = std::max(std::sqrt(sq), 1e-12);
    for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] /= d;
  }
  return out;
}

/// Majority vote among neighbours; ties by larger summed similarity, then by
/// smaller class id.
inline int vote(const std::vector<std::pair<double, std::size_t>>& neighbours,
                const std::vector<int>& labels, int n_classes) {
  std::vector<int> count(static_cast<std::size_t>(n_classes), 0);
  std::vector<double> sim(static_cast<std::size_t>(n_classes), 0.0);
  for (const auto& [s, i] : neighbours) {
    const auto c = static_cast<std::size_t>(labels[i]);
    ++count[c];
    sim[c] += s;
  }
  int best = 0;
  for (int c = 1; c < n_classes; ++c) {
    const auto uc = static_cast<std::size_t>(c), ub = static_cast<std::size_t>(best);
    if (count[uc] > count[ub] || (count[uc] == count[ub] && sim[uc] > sim[ub])) best = c;
  }
  return best;
}

}  // namespace detail

/// Cosine-similarity kNN classifier over a bank; normalizes the bank once.
class KnnClassifier {
 public:
  KnnClassifier(const FeatureBank& bank, KnnOptions opt = {})
      : bank_(bank), unit_(detail::unit_rows(bank.features, bank.dim)), opt_(opt) {
    if (bank.size() == 0) throw ContractError("knn_classify: empty feature bank");
    if (opt_.k > bank.size()) {
      if (opt_.warn_on_clamp)
        std::cerr << "warning: k=" << opt_.k << " exceeds bank size " << bank.size()
                  << ", using all entries\n";
      opt_.k = bank.size();
    }
  }

  int classify(std::span<const double> query) const {
    if (query.size() != bank_.dim) throw DimensionError("knn_classify: query dimension mismatch");
    double sq = 0;
    for (double v : query) sq += v * v;
    const double qn = std::max(std::sqrt(sq), 1e-12);
    std::vector<std::pair<double, std::size_t>> sims(bank_.size());
    for (std::size_t i = 0; i < bank_.size(); ++i) {
      double s = 0;
      const double* r = unit_.data() + i * bank_.dim;
      for (std::size_t j = 0; j < bank_.dim; ++j) s += r[j] * query[j];
      sims[i] = {s / qn, i};
    }
    auto closer = [](const auto& a, const auto& b) {
      return a.first > b.first || (a.first == b.first && a.second < b.second);
    };
    std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(opt_.k), sims.end(),
                      closer);
    sims.resize(opt_.k);
    return detail::vote(sims, bank_.labels, bank_.n_classes);
  }

  std::size_t k() const { return opt_.k; }

 private:
  const FeatureBank& bank_;
  std::vector<double> unit_;
  KnnOptions opt_;
};

inline int knn_classify(const FeatureBank& bank, std::span<const double> query, KnnOptions opt = {}) {
  return KnnClassifier(bank, opt).classify(query);
}

// ---------------------------------------------------------------------------
// Standardization

inline constexpr double kStandardizeEps = 1e-6;

namespace detail {
// A dimension with std below eps carries no signal, only rounding noise in
// its mean; it maps to exactly zero.
inline double inv_std(double s) { return s > kStandardizeEps ? 1.0 / s : 0.0; }
}  // namespace detail

/// Standardizes a bank with its own per-dimension mean and std; the stats are
/// kept for apply_standardization.
inline FeatureBank standardize(const FeatureBank& bank) {
  if (bank.size() < 2) throw ContractError("standardize: needs at least two rows");
  FeatureBank out = bank;
  const std::size_t n = bank.size(), d = bank.dim;
  out.mean.assign(d, 0.0);
  out.std.assign(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m += bank.features[i * d + j];
    m /= static_cast<double>(n);
    double v = 0;
    for (std::size_t i = 0; i < n; ++i) v += (bank.features[i * d + j] - m) * (bank.features[i * d + j] - m);
    out.mean[j] = m;
    out.std[j] = std::sqrt(v / static_cast<double>(n));
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      out.features[i * d + j] = (bank.features[i * d + j] - out.mean[j]) * detail::inv_std(out.std[j]);
  return out;
}

/// Applies `stats_source`'s stored stats (computed on the training split).
inline FeatureBank apply_standardization(const FeatureBank& bank, const FeatureBank& stats_source) {
  if (stats_source.mean.size() != bank.dim) throw ContractError("apply_standardization: no stats");
  FeatureBank out = bank;
  out.mean = stats_source.mean;
  out.std = stats_source.std;
  for (std::size_t i = 0; i < bank.size(); ++i)
    for (std::size_t j = 0; j < bank.dim; ++j)
      out.features[i * bank.dim + j] =
          (bank.features[i * bank.dim + j] - out.mean[j]) * detail::inv_std(out.std[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeConfig {
  int epochs = 20;
  double lr = 0.005;
  std::size_t batch = 256;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double best_top1 = 0;
  double final_top1 = 0;
  std::vector<double> per_class;  // at the final epoch
};

namespace detail {

inline std::vector<int> linear_predict(const FeatureBank& bank, const std::vector<double>& w,
                                       const std::vector<double>& b, int classes) {
  std::vector<int> pred(bank.size());
  const auto uc = static_cast<std::size_t>(classes);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    int best = 0;
    double best_v = -INFINITY;
    for (std::size_t c = 0; c < uc; ++c) {
      double v = b[c];
      for (std::size_t j = 0; j < bank.dim; ++j) v += bank.features[i * bank.dim + j] * w[j * uc + c];
      if (v > best_v) {
        best_v = v;
        best = static_cast<int>(c);
      }
    }
    pred[i] = best;
  }
  return pred;
}

inline std::pair<double, std::vector<double>> accuracy(const std::vector<int>& pred,
                                                       const std::vector<int>& labels, int classes) {
  std::vector<double> hit(static_cast<std::size_t>(classes), 0), tot(static_cast<std::size_t>(classes), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    tot[c] += 1;
    if (pred[i] == labels[i]) {
      ++correct;
      hit[c] += 1;
    }
  }
  for (std::size_t c = 0; c < hit.size(); ++c) hit[c] = tot[c] > 0 ? hit[c] / tot[c] : 0.0;
  return {labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size()), hit};
}

}  // namespace detail

/// Softmax regression on frozen (standardized) features: SGD with momentum,
/// cosine schedule per step. Returns the best validation top-1 over epochs.
inline ProbeResult linear_probe(const FeatureBank& train, const FeatureBank& val, const ProbeConfig& cfg) {
  const int classes = std::max(train.n_classes, val.n_classes);
  if (train.dim != val.dim) throw DimensionError("linear_probe: feature dimensions differ");
  std::vector<bool> seen(static_cast<std::size_t>(classes), false);
  for (int l : train.labels) seen[static_cast<std::size_t>(l)] = true;
  for (int l : val.labels)
    if (!seen[static_cast<std::size_t>(l)])
      throw ConfigError("linear_probe: class " + std::to_string(l) + " absent from training labels");

  const std::size_t d = train.dim, uc = static_cast<std::size_t>(classes);
  Rng rng = Rng::stream({cfg.seed, 0x9c0beULL});
  std::vector<double> w(d * uc), b(uc, 0.0), vw(d * uc, 0.0), vb(uc, 0.0);
  for (auto& x : w) x = 0.01 * rng.normal();

  ProbeResult result;
  if (cfg.epochs <= 0) {
    auto [acc, per] = detail::accuracy(detail::linear_predict(val, w, b, classes), val.labels, classes);
    result.best_top1 = result.final_top1 = acc;
    result.per_class = per;
    return result;
  }
  const std::size_t n = train.size();
  const std::size_t batch = std::max<std::size_t>(1, std::min(cfg.batch, n));
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
  std::uint64_t step = 0;
  std::vector<double> logits(uc), gw(d * uc), gb(uc);
  std::vector<std::size_t> order(n);
  result.best_top1 = -1;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
    for (std::size_t start = 0; start < n; start += batch, ++step) {
      const std::size_t end = std::min(n, start + batch);
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t t = start; t < end; ++t) {
        const std::size_t i = order[t];
        const double* x = train.features.data() + i * d;
        for (std::size_t c = 0; c < uc; ++c) {
          double v = b[c];
          for (std::size_t j = 0; j < d; ++j) v += x[j] * w[j * uc + c];
          logits[c] = v;
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double se = 0;
        for (auto& l : logits) se += (l = std::exp(l - mx));
        for (std::size_t c = 0; c < uc; ++c) {
          const double g = logits[c] / se - (static_cast<int>(c) == train.labels[i] ? 1.0 : 0.0);
          gb[c] += g;
          for (std::size_t j = 0; j < d; ++j) gw[j * uc + c] += g * x[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      const double lr = cfg.lr * (std::cos(M_PI * static_cast<double>(step) / total_steps) + 1.0) / 2.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        vw[k] = cfg.momentum * vw[k] + gw[k] * inv;
        w[k] -= lr * vw[k];
      }
      for (std::size_t c = 0; c < uc; ++c) {
        vb[c] = cfg.momentum * vb[c] + gb[c] * inv;
        b[c] -= lr * vb[c];
      }
    }
    auto [acc, per] = detail::accuracy(detail::linear_predict(val, w, b, classes), val.labels, classes);
    result.final_top1 = acc;
    result.per_class = per;
    result.best_top1 = std::max(result.best_top1, acc);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Model evaluation

enum class Protocol { kKnn, kLinear, kBoth };

inline Protocol parse_protocol(std::string_view s) {
  if (s == "knn") return Protocol::kKnn;
  if (s == "linear") return Protocol::kLinear;
  if (s == "both") return Protocol::kBoth;
  throw ConfigError("unknown protocol '" + std::string(s) + "' (knn|linear|both)");
}

struct EvalConfig {
  Protocol protocol = Protocol::kBoth;
  std::size_t knn_k = 20;
  ProbeConfig probe{};
  std::size_t image_size = 32;
  std::size_t batch = 256;
};

struct EvalReport {
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  int n_classes = 0;
  std::optional<double> knn_top1;
  std::optional<double> linear_top1;
  std::vector<double> knn_per_class;
  std::vector<double> linear_per_class;
  std::vector<std::size_t> val_class_counts;

  /// Flat key=value block, one entry per line.
  std::string to_text() const {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed;
    os << "n_train=" << n_train << "\n" << "n_val=" << n_val << "\n" << "n_classes=" << n_classes << "\n";
    if (knn_top1) os << "knn_top1=" << *knn_top1 << "\n";
    if (linear_top1) os << "linear_top1=" << *linear_top1 << "\n";
    for (std::size_t c = 0; c < knn_per_class.size(); ++c) os << "knn_class_" << c << "=" << knn_per_class[c] << "\n";
    for (std::size_t c = 0; c < linear_per_class.size(); ++c)
      os << "linear_class_" << c << "=" << linear_per_class[c] << "\n";
    for (std::size_t c = 0; c < val_class_counts.size(); ++c)
      os << "val_count_" << c << "=" << val_class_counts[c] << "\n";
    return os.str();
  }
};

/// Backbone features (post-pool, pre-projector) of every image, computed in
/// eval mode with the deterministic eval transform. Does not touch the model.
template <typename T>
FeatureBank extract_features(SiameseModel<T>& model, const Dataset& ds, const DatasetStats& stats,
                             std::size_t image_size, std::size_t batch = 256) {
  FeatureBank bank;
  bank.n_classes = ds.n_classes;
  Tape<T> off = Tape<T>::no_grad();
  BnOptions opt;
  opt.mode = BnMode::kEval;
  opt.update_running = false;
  for (std::size_t start = 0; start < ds.size(); start += batch) {
    const std::size_t end = std::min(ds.size(), start + batch);
    std::vector<Image> views;
    views.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) views.push_back(eval_view(ds.items[i].image, image_size, stats));
    std::vector<const Image*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v);
    const auto feats = model.online.backbone.forward(off, stack_images<T>(ptrs), opt);
    bank.dim = feats.dim(1);
    for (T v : feats.values()) bank.features.push_back(static_cast<double>(v));
    for (std::size_t i = start; i < end; ++i) bank.labels.push_back(ds.items[i].label);
  }
  return bank;
}

inline std::pair<double, std::vector<double>> knn_accuracy(const FeatureBank& train, const FeatureBank& val,
                                                           std::size_t k) {
  KnnClassifier knn(train, KnnOptions{k, true});
  std::vector<int> pred(val.size());
  for (std::size_t i = 0; i < val.size(); ++i) pred[i] = knn.classify(val.row(i));
  return detail::accuracy(pred, val.labels, std::max(train.n_classes, val.n_classes));
}

template <typename T>
EvalReport evaluate(SiameseModel<T>& model, const Dataset& train, const Dataset& val,
                    const DatasetStats& stats, const EvalConfig& cfg) {
  EvalReport rep;
  rep.n_train = train.size();
  rep.n_val = val.size();
  rep.n_classes = std::max(train.n_classes, val.n_classes);
  rep.val_class_counts.assign(static_cast<std::size_t>(rep.n_classes), 0);
  for (const auto& it : val.items) ++rep.val_class_counts[static_cast<std::size_t>(it.label)];

  const auto train_bank = extract_features(model, train, stats, cfg.image_size, cfg.batch);
  const auto val_bank = extract_features(model, val, stats, cfg.image_size, cfg.batch);
  if (cfg.protocol != Protocol::kLinear) {
    auto [acc, per] = knn_accuracy(train_bank, val_bank, cfg.knn_k);
    rep.knn_top1 = acc;
    rep.knn_per_class = per;
  }
  if (cfg.protocol != Protocol::kKnn) {
    const auto st = standardize(train_bank);
    const auto sv = apply_standardization(val_bank, st);
    const auto res = linear_probe(st, sv, cfg.probe);
    rep.linear_top1 = res.final_top1;
    rep.linear_per_class = res.per_class;
  }
  return rep;
}

}  // namespace mulan
