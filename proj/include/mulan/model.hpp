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
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mulan/augment.hpp"
#include "mulan/ops.hpp"
#include "mulan/rng.hpp"
#include "mulan/tensor.hpp"

namespace mulan {

enum class Method { kByol, kSimSiam, kMocoV3 };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::kByol:
      return "byol";
    case Method::kSimSiam:
      return "simsiam";
    case Method::kMocoV3:
      return "mocov3";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  if (s == "byol") return Method::kByol;
  if (s == "simsiam") return Method::kSimSiam;
  if (s == "mocov3") return Method::kMocoV3;
  throw ConfigError("unknown method '" + std::string(s) + "' (byol|simsiam|mocov3)");
}

struct HeadConfig {
  Method method = Method::kByol;
  std::vector<int> widths{16, 32, 64, 64};  // conv blocks, each stride 2
  int proj_hidden = 512;
  int proj_out = 64;
  int pred_hidden = 512;  // simsiam uses a bottleneck, see effective_pred_hidden()
  bool shared_predictor = false;
  std::vector<ViewType> view_types{ViewType::kGlobal};

  int effective_pred_hidden() const {
    return method == Method::kSimSiam ? std::max(1, proj_out / 4) : pred_hidden;
  }
  bool has_target_encoder() const { return method != Method::kSimSiam; }

  void validate() const {
    if (widths.empty()) throw ConfigError("model needs at least one conv block");
    for (int w : widths)
      if (w < 1) throw ConfigError("conv widths must be positive");
    if (proj_hidden < 1 || proj_out < 1 || pred_hidden < 1)
      throw ConfigError("head dimensions must be positive");
    if (view_types.empty()) throw ConfigError("predictor bank needs at least one view type");
  }
};

enum class ParamRole { kWeight, kBias, kNormAffine, kBuffer };

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x) const {
    return add_bias(tape, matmul(tape, x, weight), bias);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight, ParamRole::kWeight);
    f(prefix + ".bias", bias, ParamRole::kBias);
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  BnRunning<T> running;

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, const BnOptions& opt) {
    return batchnorm(tape, x, gamma, beta, running, opt);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma, ParamRole::kNormAffine);
    f(prefix + ".beta", beta, ParamRole::kNormAffine);
    f(prefix + ".running_mean", running.mean, ParamRole::kBuffer);
    f(prefix + ".running_var", running.var, ParamRole::kBuffer);
  }
};

template <typename T>
struct MlpLayer {
  Linear<T> linear;
  std::optional<BatchNorm<T>> bn;
  bool relu = false;
};

template <typename T>
struct Mlp {
  std::vector<MlpLayer<T>> layers;

  Tensor<T> forward(Tape<T>& tape, Tensor<T> x, const BnOptions& opt) {
    for (auto& layer : layers) {
      x = layer.linear.forward(tape, x);
      if (layer.bn) x = layer.bn->forward(tape, x, opt);
      if (layer.relu) x = relu(tape, x);
    }
    return x;
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      layers[i].linear.visit(p + ".linear", f);
      if (layers[i].bn) layers[i].bn->visit(p + ".bn", f);
    }
  }
};

template <typename T>
struct ConvBlock {
  Tensor<T> kernel;  // F x C x 3 x 3
  BatchNorm<T> bn;
  std::size_t stride = 2;
};

template <typename T>
struct Backbone {
  std::vector<ConvBlock<T>> blocks;

  /// Conv stack followed by global mean pool: N x C x H x W -> N x widths.back().
  Tensor<T> forward(Tape<T>& tape, Tensor<T> x, const BnOptions& opt) {
    for (auto& b : blocks) {
      x = conv2d(tape, x, b.kernel, b.stride, 1);
      x = b.bn.forward(tape, x, opt);
      x = relu(tape, x);
    }
    return global_mean_pool(tape, x);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = prefix + "." + std::to_string(i);
      f(p + ".kernel", blocks[i].kernel, ParamRole::kWeight);
      blocks[i].bn.visit(p + ".bn", f);
    }
  }
};

template <typename T>
struct Encoded {
  Tensor<T> features;  // post-pool backbone output, pre-projector
  Tensor<T> z;         // projector output
};

template <typename T>
struct Encoder {
  Backbone<T> backbone;
  Mlp<T> projector;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    backbone.visit(prefix + ".backbone", f);
    projector.visit(prefix + ".projector", f);
  }
};

/// Backbone -> global mean pool -> projector. Accepts any spatial size.
template <typename T>
Encoded<T> encode(Tape<T>& tape, Encoder<T>& enc, const Tensor<T>& views, const BnOptions& opt) {
  if (views.rank() != 4 || views.dim(2) < 8 || views.dim(3) < 8)
    throw DimensionError("encode: expected N x C x H x W input with H, W >= 8, got " +
                         shape_str(views.shape()));
  Encoded<T> out;
  out.features = enc.backbone.forward(tape, views, opt);
  out.z = enc.projector.forward(tape, out.features, opt);
  check_finite(out.z, "encode");
  return out;
}

template <typename T>
struct PredictorBank {
  std::array<int, 3> slot{-1, -1, -1};  // ViewType -> index into heads
  std::vector<Mlp<T>> heads;

  bool has(ViewType v) const { return slot[index_of(v)] >= 0; }
  Mlp<T>& head(ViewType v) {
    if (!has(v))
      throw ConfigError("no predictor for view type '" + std::string(to_string(v)) + "'");
    return heads[static_cast<std::size_t>(slot[index_of(v)])];
  }
  bool shared() const { return heads.size() == 1 && std::count_if(slot.begin(), slot.end(), [](int s) { return s >= 0; }) > 1; }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      std::string name = heads.size() == 1 && shared() ? "shared" : "";
      if (name.empty()) {
        for (ViewType v : kAllViewTypes)
          if (slot[index_of(v)] == static_cast<int>(h)) name = std::string(to_string(v));
      }
      heads[h].visit(prefix + "." + name, f);
    }
  }
};

/// Applies only the predictor of view type `v`.
template <typename T>
Tensor<T> predict(Tape<T>& tape, PredictorBank<T>& bank, ViewType v, const Tensor<T>& z,
                  const BnOptions& opt) {
  return bank.head(v).forward(tape, z, opt);
}

template <typename T>
struct SiameseModel {
  HeadConfig config;
  Encoder<T> online;
  std::optional<Encoder<T>> target;  // absent for simsiam
  PredictorBank<T> predictors;

  /// Every tensor, with a stable dotted name, in a fixed order.
  template <typename F>
  void visit(F&& f) {
    online.visit("online", f);
    predictors.visit("predictor", f);
    if (target) target->visit("target", f);
  }
  /// Trainable online tensors (encoder and predictors).
  template <typename F>
  void visit_trainable(F&& f) {
    auto only_trainable = [&](const std::string& name, Tensor<T>& t, ParamRole role) {
      if (role != ParamRole::kBuffer) f(name, t, role);
    };
    online.visit("online", only_trainable);
    predictors.visit("predictor", only_trainable);
  }
  void zero_grad() {
    visit_trainable([](const std::string&, Tensor<T>& t, ParamRole) { t.zero_grad(); });
  }
};

// ---------------------------------------------------------------------------
// Construction

namespace detail {

template <typename T>
Tensor<T> he_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.values_mut()) v = static_cast<T>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
BatchNorm<T> make_bn(std::size_t n) {
  BatchNorm<T> bn;
  bn.gamma = Tensor<T>({n}, T(1));
  bn.beta = Tensor<T>({n}, T(0));
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
  bn.running.mean = Tensor<T>({n}, T(0));
  bn.running.var = Tensor<T>({n}, T(1));
  return bn;
}

template <typename T>
MlpLayer<T> make_layer(Rng& rng, std::size_t in, std::size_t out, bool bn, bool relu_after) {
  MlpLayer<T> layer;
  layer.linear.weight = he_uniform<T>(rng, {in, out}, in);
  layer.linear.bias = Tensor<T>({out}, T(0));
  layer.linear.bias.set_requires_grad(true);
  if (bn) layer.bn = make_bn<T>(out);
  layer.relu = relu_after;
  return layer;
}

/// byol: L-BN-ReLU-L. mocov3: same plus output BN.
/// simsiam projector: (L-BN-ReLU) x 2, L-BN. simsiam predictor: bottleneck L-BN-ReLU-L.
template <typename T>
Mlp<T> make_projector(Rng& rng, const HeadConfig& cfg, std::size_t in) {
  Mlp<T> mlp;
  const auto h = static_cast<std::size_t>(cfg.proj_hidden);
  const auto o = static_cast<std::size_t>(cfg.proj_out);
  mlp.layers.push_back(make_layer<T>(rng, in, h, true, true));
  if (cfg.method == Method::kSimSiam) {
    mlp.layers.push_back(make_layer<T>(rng, h, h, true, true));
    mlp.layers.push_back(make_layer<T>(rng, h, o, true, false));
  } else {
    mlp.layers.push_back(make_layer<T>(rng, h, o, cfg.method == Method::kMocoV3, false));
  }
  return mlp;
}

template <typename T>
Mlp<T> make_predictor(Rng& rng, const HeadConfig& cfg) {
  Mlp<T> mlp;
  const auto o = static_cast<std::size_t>(cfg.proj_out);
  const auto h = static_cast<std::size_t>(cfg.effective_pred_hidden());
  mlp.layers.push_back(make_layer<T>(rng, o, h, true, true));
  mlp.layers.push_back(make_layer<T>(rng, h, o, cfg.method == Method::kMocoV3, false));
  return mlp;
}

}  // namespace detail

/// Deep copy of every tensor of an encoder; `trainable` controls requires_grad.
template <typename T>
Encoder<T> clone_encoder(Encoder<T>& src, bool trainable) {
  Encoder<T> dst = src;  // shallow: same structure, shared storage
  std::vector<Tensor<T>*> from, to;
  src.visit("", [&](const std::string&, Tensor<T>& t, ParamRole) { from.push_back(&t); });
  dst.visit("", [&](const std::string&, Tensor<T>& t, ParamRole) { to.push_back(&t); });
  for (std::size_t i = 0; i < from.size(); ++i) {
    *to[i] = from[i]->clone();
    to[i]->set_requires_grad(trainable && from[i]->requires_grad());
  }
  return dst;
}

/// Deep copy: no tensor storage is shared with `src`.
template <typename T>
SiameseModel<T> clone_model(SiameseModel<T>& src) {
  SiameseModel<T> dst = src;
  std::vector<Tensor<T>*> from, to;
  src.visit([&](const std::string&, Tensor<T>& t, ParamRole) { from.push_back(&t); });
  dst.visit([&](const std::string&, Tensor<T>& t, ParamRole) { to.push_back(&t); });
  for (std::size_t i = 0; i < from.size(); ++i) {
    const bool rg = from[i]->requires_grad();
    *to[i] = from[i]->clone();
    to[i]->set_requires_grad(rg);
  }
  return dst;
}

/// He-uniform weights, zero biases, unit gamma, zero beta; the target encoder
/// starts as an exact copy of the online encoder.
template <typename T>
SiameseModel<T> init_model(const HeadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SiameseModel<T> m;
  m.config = cfg;
  Rng rng = Rng::stream({seed, 0x1a17ULL});
  std::size_t in_ch = 3;
  for (int w : cfg.widths) {
    ConvBlock<T> block;
    block.kernel = detail::he_uniform<T>(rng, {static_cast<std::size_t>(w), in_ch, 3, 3}, in_ch * 9);
    block.bn = detail::make_bn<T>(static_cast<std::size_t>(w));
    block.stride = 2;
    m.online.backbone.blocks.push_back(std::move(block));
    in_ch = static_cast<std::size_t>(w);
  }
  m.online.projector = detail::make_projector<T>(rng, cfg, in_ch);

  if (cfg.shared_predictor) {
    m.predictors.heads.push_back(detail::make_predictor<T>(rng, cfg));
    for (ViewType v : cfg.view_types) m.predictors.slot[index_of(v)] = 0;
  } else {
    for (ViewType v : kAllViewTypes) {
      if (std::find(cfg.view_types.begin(), cfg.view_types.end(), v) == cfg.view_types.end())
        continue;
      m.predictors.slot[index_of(v)] = static_cast<int>(m.predictors.heads.size());
      m.predictors.heads.push_back(detail::make_predictor<T>(rng, cfg));
    }
  }
  if (cfg.has_target_encoder()) m.target = clone_encoder(m.online, false);
  return m;
}

/// Alignment targets, never recorded for gradients. byol/mocov3 use the
/// target encoder, simsiam the online encoder under stop-gradient. Batch
/// statistics are used without touching running statistics.
template <typename T>
Tensor<T> target_forward(SiameseModel<T>& model, const Tensor<T>& views) {
  Tape<T> off = Tape<T>::no_grad();
  BnOptions opt;
  opt.mode = BnMode::kTrain;
  opt.update_running = false;
  Encoder<T>& enc = model.target ? *model.target : model.online;
  return encode(off, enc, views, opt).z.detach();
}

/// target <- tau * target + (1 - tau) * online over parameters and running
/// statistics.
template <typename T>
void ema_update(Encoder<T>& target, Encoder<T>& online, double tau) {
  if (tau < 0 || tau > 1) throw ContractError("ema_update: tau must lie in [0, 1]");
  std::vector<Tensor<T>*> dst, src;
  target.visit("", [&](const std::string&, Tensor<T>& t, ParamRole) { dst.push_back(&t); });
  online.visit("", [&](const std::string&, Tensor<T>& t, ParamRole) { src.push_back(&t); });
  if (dst.size() != src.size()) throw DimensionError("ema_update: encoder structures differ");
  const T a = static_cast<T>(tau), b = static_cast<T>(1.0 - tau);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->shape() != src[i]->shape())
      throw DimensionError("ema_update: tensor shapes differ");
    auto d = dst[i]->values_mut();
    auto s = src[i]->values();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] = a * d[k] + b * s[k];
  }
}

// ---------------------------------------------------------------------------

/// Stacks images (all the same size) into an N x C x H x W tensor.
template <typename T>
Tensor<T> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw ContractError("stack_images: empty batch");
  const Image& first = *images.front();
  Tensor<T> out({images.size(), first.channels, first.height, first.width});
  auto o = out.values_mut();
  const std::size_t per = first.pixels.size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = *images[i];
    if (im.channels != first.channels || im.height != first.height || im.width != first.width)
      throw DimensionError("stack_images: images differ in size");
    std::copy(im.pixels.begin(), im.pixels.end(), o.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

}  // namespace mulan
