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

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mulan/gemm.hpp"
#include "mulan/tensor.hpp"

namespace mulan {

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, std::string_view op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor<T> out({m, n});
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), out.values_mut().data());
  check_finite(out, "matmul");
  if (tape.should_record(a, b)) {
    tape.record("matmul", {a, b}, out, [m, n, k](const auto& e) {
      const T* g = e.output_grad().data();
      const T* av = e.inputs[0]->value.data();
      const T* bv = e.inputs[1]->value.data();
      if (e.needs_grad(0)) detail::gemm_nt(m, k, n, g, bv, e.input_grad(0).data());
      if (e.needs_grad(1)) detail::gemm_tn(k, n, m, av, g, e.input_grad(1).data());
    });
  }
  return out;
}

/// Adds a length-D bias to every row of an N x D matrix.
template <typename T>
Tensor<T> add_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_rank(x, 2, "add_bias");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.numel() != d) throw DimensionError("add_bias: bias length does not match columns");
  Tensor<T> out({n, d});
  auto o = out.values_mut();
  auto xv = x.values();
  auto bv = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = xv[i * d + j] + bv[j];
  check_finite(out, "add_bias");
  if (tape.should_record(x, bias)) {
    tape.record("add_bias", {x, bias}, out, [n, d](const auto& e) {
      auto g = e.output_grad();
      if (e.needs_grad(0)) {
        auto gx = e.input_grad(0);
        for (std::size_t i = 0; i < n * d; ++i) gx[i] += g[i];
      }
      if (e.needs_grad(1)) {
        auto gb = e.input_grad(1);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.values_mut();
  auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
  check_finite(out, "relu");
  if (tape.should_record(x)) {
    tape.record("relu", {x}, out, [](const auto& e) {
      auto g = e.output_grad();
      auto xin = e.inputs[0]->value;
      auto gx = e.input_grad(0);
      // subgradient at exactly 0 is 0
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xin[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto o = out.values_mut();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  check_finite(out, "add");
  if (tape.should_record(a, b)) {
    tape.record("add", {a, b}, out, [](const auto& e) {
      auto g = e.output_grad();
      for (std::size_t k = 0; k < 2; ++k) {
        if (!e.needs_grad(k)) continue;
        auto gi = e.input_grad(k);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto o = out.values_mut();
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  check_finite(out, "mul");
  if (tape.should_record(a, b)) {
    tape.record("mul", {a, b}, out, [](const auto& e) {
      auto g = e.output_grad();
      const auto& a_val = e.inputs[0]->value;
      const auto& b_val = e.inputs[1]->value;
      if (e.needs_grad(0)) {
        auto ga = e.input_grad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b_val[i];
      }
      if (e.needs_grad(1)) {
        auto gb = e.input_grad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a_val[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto o = out.values_mut();
  auto xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = factor * xv[i];
  check_finite(out, "scale");
  if (tape.should_record(x)) {
    tape.record("scale", {x}, out, [factor](const auto& e) {
      auto g = e.output_grad();
      auto gx = e.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return add(tape, a, scale(tape, b, T(-1)));
}

/// Sum of all elements, as a 1-element tensor.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  check_finite(out, "sum");
  if (tape.should_record(x)) {
    tape.record("sum", {x}, out, [](const auto& e) {
      const T g = e.output_grad()[0];
      auto gx = e.input_grad(0);
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  return scale(tape, sum(tape, x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Normalization and pooling

/// Divides each row of an N x D matrix by max(||row||_2, eps).
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& x, T eps = T(1e-12)) {
  detail::require_rank(x, 2, "l2_normalize");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor<T> out({n, d});
  std::vector<T> denom(n);
  auto xv = x.values();
  auto o = out.values_mut();
  for (std::size_t i = 0; i < n; ++i) {
    T sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += xv[i * d + j] * xv[i * d + j];
    denom[i] = std::max(std::sqrt(sq), eps);
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = xv[i * d + j] / denom[i];
  }
  check_finite(out, "l2_normalize");
  if (tape.should_record(x)) {
    tape.record("l2_normalize", {x}, out, [n, d, eps, denom = std::move(denom)](const auto& e) {
      auto g = e.output_grad();
      const auto& y = e.output->value;
      auto gx = e.input_grad(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T* gi = g.data() + i * d;
        const T* yi = y.data() + i * d;
        if (denom[i] > eps) {
          T dot = 0;
          for (std::size_t j = 0; j < d; ++j) dot += yi[j] * gi[j];
          for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += (gi[j] - yi[j] * dot) / denom[i];
        } else {
          for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += gi[j] / eps;
        }
      }
    });
  }
  return out;
}

/// Spatial mean of an N x C x H x W map, giving N x C.
template <typename T>
Tensor<T> global_mean_pool(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_mean_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  auto xv = x.values();
  auto o = out.values_mut();
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < hw; ++p) acc += xv[i * hw + p];
    o[i] = acc / static_cast<T>(hw);
  }
  check_finite(out, "global_mean_pool");
  if (tape.should_record(x)) {
    tape.record("global_mean_pool", {x}, out, [n, c, hw](const auto& e) {
      auto g = e.output_grad();
      auto gx = e.input_grad(0);
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t i = 0; i < n * c; ++i)
        for (std::size_t p = 0; p < hw; ++p) gx[i * hw + p] += g[i] * inv;
    });
  }
  return out;
}

enum class BnMode { kTrain, kEval };

/// Running statistics of a batch normalization layer. Owned by the layer and
/// updated in place in train mode.
template <typename T>
struct BnRunning {
  Tensor<T> mean;
  Tensor<T> var;
};

struct BnOptions {
  BnMode mode = BnMode::kTrain;
  double eps = 1e-5;
  double momentum = 0.1;
  bool update_running = true;
};

/// Batch normalization over N x D (per column) or N x C x H x W (per channel,
/// statistics over N, H, W).
template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, BnRunning<T>& running, const BnOptions& opt = {}) {
  if (x.rank() != 2 && x.rank() != 4) throw DimensionError("batchnorm: expected rank 2 or 4");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || running.mean.numel() != c ||
      running.var.numel() != c) {
    throw DimensionError("batchnorm: parameter length does not match feature count " +
                         std::to_string(c));
  }
  const bool train = opt.mode == BnMode::kTrain;
  if (train && n < 2) throw DegenerateBatchError("batchnorm: train mode needs at least 2 samples");

  const std::size_t count = n * hw;
  const T eps = static_cast<T>(opt.eps);
  auto xv = x.values();
  std::vector<T> mu(c), inv_std(c);
  if (train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) s += xv[(i * c + ch) * hw + p];
      const T m = s / static_cast<T>(count);
      T v = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < hw; ++p) {
          const T dlt = xv[(i * c + ch) * hw + p] - m;
          v += dlt * dlt;
        }
      v /= static_cast<T>(count);
      mu[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(v + eps);
      if (opt.update_running) {
        const T mom = static_cast<T>(opt.momentum);
        const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
        auto rm = running.mean.values_mut();
        auto rv = running.var.values_mut();
        rm[ch] = (T(1) - mom) * rm[ch] + mom * m;
        rv[ch] = (T(1) - mom) * rv[ch] + mom * unbiased;
      }
    }
  } else {
    auto rm = running.mean.values();
    auto rv = running.var.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = rm[ch];
      inv_std[ch] = T(1) / std::sqrt(rv[ch] + eps);
    }
  }

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  auto o = out.values_mut();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t idx = (i * c + ch) * hw + p;
        xhat[idx] = (xv[idx] - mu[ch]) * inv_std[ch];
        o[idx] = gv[ch] * xhat[idx] + bv[ch];
      }
  check_finite(out, "batchnorm");

  if (tape.should_record(x, gamma, beta)) {
    tape.record("batchnorm", {x, gamma, beta}, out,
                [n, c, hw, count, train, inv_std = std::move(inv_std),
                 xhat = std::move(xhat)](const auto& e) {
                  auto g = e.output_grad();
                  const auto& gam = e.inputs[1]->value;
                  std::vector<T> sum_g(c, T(0)), sum_gx(c, T(0));
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch)
                      for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        sum_g[ch] += g[idx];
                        sum_gx[ch] += g[idx] * xhat[idx];
                      }
                  if (e.needs_grad(1)) {
                    auto gg = e.input_grad(1);
                    for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                  }
                  if (e.needs_grad(2)) {
                    auto gb = e.input_grad(2);
                    for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                  }
                  if (!e.needs_grad(0)) return;
                  auto gx = e.input_grad(0);
                  const T inv_count = T(1) / static_cast<T>(count);
                  for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const T k = gam[ch] * inv_std[ch];
                      for (std::size_t p = 0; p < hw; ++p) {
                        const std::size_t idx = (i * c + ch) * hw + p;
                        if (train) {
                          gx[idx] += k * (g[idx] - inv_count * sum_g[ch] -
                                          xhat[idx] * inv_count * sum_gx[ch]);
                        } else {
                          gx[idx] += k * g[idx];
                        }
                      }
                    }
                });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

/// Unfolds input patches into a (C*KH*KW) x (N*OH*OW) matrix.
template <typename T>
void im2col(const ConvGeometry& g, const T* x, T* cols) {
  const std::size_t np = g.n * g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((ch * g.kh + ky) * g.kw + kx) * np;
        for (std::size_t i = 0; i < g.n; ++i) {
          const T* plane = x + (i * g.c + ch) * g.h * g.w;
          T* dst = row + i * g.positions();
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            T* d = dst + oy * g.ow;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(d, d + g.ow, T(0));
              continue;
            }
            const T* src = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              d[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0)
                                                               : src[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* dx) {
  const std::size_t np = g.n * g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((ch * g.kh + ky) * g.kw + kx) * np;
        for (std::size_t i = 0; i < g.n; ++i) {
          T* plane = dx + (i * g.c + ch) * g.h * g.w;
          const T* src = row + i * g.positions();
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            T* dst = plane + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w))
                dst[static_cast<std::size_t>(ix)] += src[oy * g.ow + ox];
            }
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation of N x C x H x W input with F x C x KH x KW kernel,
/// zero padding `pad` on each side.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 std::size_t pad = 1) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(kernel, 4, "conv2d");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  detail::ConvGeometry g{};
  g.n = x.dim(0);
  g.c = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.f = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (kernel.dim(1) != g.c) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " channels, input has " + std::to_string(g.c));
  }
  if (g.h + 2 * pad < g.kh || g.w + 2 * pad < g.kw) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " larger than padded input " + shape_str(x.shape()));
  }
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;

  const std::size_t np = g.n * g.positions();
  std::vector<T> cols(g.patch() * np);
  detail::im2col(g, x.values().data(), cols.data());
  std::vector<T> out_mat(g.f * np, T(0));
  detail::gemm_nn(g.f, np, g.patch(), kernel.values().data(), cols.data(), out_mat.data());

  Tensor<T> out({g.n, g.f, g.oh, g.ow});
  auto o = out.values_mut();
  const std::size_t p = g.positions();
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t f = 0; f < g.f; ++f)
      std::copy_n(out_mat.data() + f * np + i * p, p, o.data() + (i * g.f + f) * p);
  check_finite(out, "conv2d");

  if (tape.should_record(x, kernel)) {
    tape.record("conv2d", {x, kernel}, out, [g, cols = std::move(cols)](const auto& e) {
      const std::size_t np = g.n * g.positions();
      const std::size_t p = g.positions();
      auto go = e.output_grad();
      std::vector<T> gmat(g.f * np);
      for (std::size_t i = 0; i < g.n; ++i)
        for (std::size_t f = 0; f < g.f; ++f)
          std::copy_n(go.data() + (i * g.f + f) * p, p, gmat.data() + f * np + i * p);
      if (e.needs_grad(1)) {
        detail::gemm_nt(g.f, g.patch(), np, gmat.data(), cols.data(), e.input_grad(1).data());
      }
      if (e.needs_grad(0)) {
        std::vector<T> gcols(g.patch() * np, T(0));
        detail::gemm_tn(g.patch(), np, g.f, e.inputs[1]->value.data(), gmat.data(), gcols.data());
        detail::col2im(g, gcols.data(), e.input_grad(0).data());
      }
    });
  }
  return out;
}

}  // namespace mulan
