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
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "mulan/datasets.hpp"
#include "mulan/errors.hpp"
#include "mulan/image.hpp"
#include "mulan/rng.hpp"

namespace mulan {

enum class ViewType : std::uint8_t { kGlobal = 0, kLocal = 1, kCutout = 2 };
inline constexpr std::array<ViewType, 3> kAllViewTypes{ViewType::kGlobal, ViewType::kLocal,
                                                       ViewType::kCutout};

inline std::string_view to_string(ViewType v) {
  switch (v) {
    case ViewType::kGlobal:
      return "global";
    case ViewType::kLocal:
      return "local";
    case ViewType::kCutout:
      return "cutout";
  }
  return "?";
}

inline std::size_t index_of(ViewType v) { return static_cast<std::size_t>(v); }

struct Range {
  double lo = 0;
  double hi = 0;
};

struct JitterStrength {
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double hue = 0.1;
};

/// Augmentation half of an experiment recipe: view counts, sizes, sampling
/// ranges, photometric toggles and per-type loss weights.
struct ViewRecipe {
  int n_global = 2;
  int n_local = 0;
  int n_cutout = 0;
  int global_size = 32;
  int local_size = 16;
  Range global_area{0.25, 1.0};
  Range local_area{0.08, 0.25};
  Range cutout_crop_area{0.25, 1.0};
  Range cutout_mask_area{0.20, 0.40};
  Range ratio{3.0 / 4.0, 4.0 / 3.0};

  bool crop = true;
  bool flip = true;
  bool jitter = true;
  bool grayscale = true;
  bool blur = true;
  bool solarize = true;
  bool symmetric_cutout = false;  // also mask the global (target) views

  JitterStrength jitter_strength{};
  double jitter_prob = 0.8;
  double grayscale_prob = 0.2;
  double solarize_threshold = 0.5;

  std::array<double, 3> lambda{1.0, 1.0, 1.0};  // indexed by ViewType

  int n_views() const { return n_global + n_local + n_cutout; }
  int count(ViewType v) const {
    return v == ViewType::kGlobal ? n_global : v == ViewType::kLocal ? n_local : n_cutout;
  }

  void validate() const {
    if (n_global < 1) throw ConfigError("recipe needs at least one global view (targets are global)");
    if (n_local < 0 || n_cutout < 0) throw ConfigError("view counts must be nonnegative");
    if (global_size < 8 || (n_local > 0 && local_size < 8))
      throw ConfigError("view sizes must be at least 8 pixels");
    for (double l : lambda)
      if (l < 0) throw ConfigError("loss weights must be nonnegative");
    for (const Range* r : {&global_area, &local_area, &cutout_crop_area, &cutout_mask_area}) {
      if (!(r->lo > 0 && r->lo <= r->hi && r->hi <= 1))
        throw ConfigError("area ranges must satisfy 0 < lo <= hi <= 1");
    }
    if (!(ratio.lo > 0 && ratio.lo <= ratio.hi)) throw ConfigError("invalid aspect-ratio range");
  }
};

struct PhotometricDraws {
  bool flipped = false;
  bool jittered = false;
  double brightness = 1, contrast = 1, saturation = 1, hue = 0;
  bool grayscale = false;
  bool blurred = false;
  double blur_sigma = 0;
  int blur_kernel = 1;
  bool solarized = false;
};

struct AugRecord {
  ViewType view_type = ViewType::kGlobal;
  int slot = 0;
  CropRect crop;
  bool crop_fallback = false;
  std::optional<CropRect> cutout_rect;  // present iff view_type == kCutout
  bool cutout_fallback = false;
  std::optional<CropRect> symmetric_mask;  // global views under symmetric cutout
  PhotometricDraws photo;
  std::uint64_t rng_stream_id = 0;
};

/// One augmented view. `target` is what the target branch would see; it equals
/// `online` except for cutout views, where only `online` is masked.
struct View {
  ViewType type = ViewType::kGlobal;
  Image online;
  Image target;
  AugRecord record;
};

struct ViewBatch {
  std::vector<View> views;
};

// ---------------------------------------------------------------------------
// Samplers

struct CropDraw {
  CropRect rect;
  bool fallback = false;
};

/// Random area/aspect rectangle: area uniform in area_range * H * W, aspect
/// log-uniform in ratio_range, 10 attempts, then the largest centred crop
/// whose aspect lies in ratio_range. With `strict_area`, an attempt whose
/// rounded rect leaves area_range is rejected too.
inline CropDraw sample_resized_crop(Rng& rng, std::size_t img_h, std::size_t img_w,
                                    Range area_range, Range ratio_range = {3.0 / 4.0, 4.0 / 3.0},
                                    bool strict_area = false) {
  const double area = static_cast<double>(img_h) * static_cast<double>(img_w);
  const double log_lo = std::log(ratio_range.lo), log_hi = std::log(ratio_range.hi);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target_area = area * rng.uniform(area_range.lo, area_range.hi);
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    const long w = std::lround(std::sqrt(target_area * aspect));
    const long h = std::lround(std::sqrt(target_area / aspect));
    const double realized = static_cast<double>(w * h) / area;
    const bool area_ok = !strict_area || (realized >= area_range.lo && realized <= area_range.hi);
    if (w > 0 && h > 0 && w <= static_cast<long>(img_w) && h <= static_cast<long>(img_h) && area_ok) {
      const auto top = rng.uniform_int(0, static_cast<long>(img_h) - h);
      const auto left = rng.uniform_int(0, static_cast<long>(img_w) - w);
      return {CropRect{static_cast<int>(top), static_cast<int>(left), static_cast<int>(h),
                       static_cast<int>(w)},
              false};
    }
  }
  const double in_ratio = static_cast<double>(img_w) / static_cast<double>(img_h);
  long w = static_cast<long>(img_w), h = static_cast<long>(img_h);
  if (in_ratio < ratio_range.lo) {
    h = std::lround(static_cast<double>(w) / ratio_range.lo);
  } else if (in_ratio > ratio_range.hi) {
    w = std::lround(static_cast<double>(h) * ratio_range.hi);
  }
  h = std::clamp(h, 1L, static_cast<long>(img_h));
  w = std::clamp(w, 1L, static_cast<long>(img_w));
  return {CropRect{static_cast<int>((static_cast<long>(img_h) - h) / 2),
                   static_cast<int>((static_cast<long>(img_w) - w) / 2), static_cast<int>(h),
                   static_cast<int>(w)},
          true};
}

inline CropDraw sample_cutout_rect(Rng& rng, std::size_t img_h, std::size_t img_w,
                                   Range area_range = {0.20, 0.40},
                                   Range ratio_range = {3.0 / 4.0, 4.0 / 3.0}) {
  if (img_h < 4 || img_w < 4) throw ContractError("sample_cutout_rect: image must be at least 4x4");
  return sample_resized_crop(rng, img_h, img_w, area_range, ratio_range, true);
}

// ---------------------------------------------------------------------------
// Pixel operations (images in [0, 1] unless noted)

inline Image apply_cutout(const Image& img, const CropRect& rect, const std::array<float, 3>& fill) {
  if (!rect.inside(img.height, img.width)) throw ContractError("apply_cutout: rect outside image");
  Image out = img;
  for (std::size_t c = 0; c < img.channels; ++c)
    for (int y = rect.top; y < rect.top + rect.height; ++y)
      for (int x = rect.left; x < rect.left + rect.width; ++x)
        out.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = fill[c % 3];
  return out;
}

inline void hflip_inplace(Image& img) {
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y) {
      float* row = img.pixels.data() + (c * img.height + y) * img.width;
      std::reverse(row, row + img.width);
    }
}

inline float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

inline void grayscale_inplace(Image& img) {
  const std::size_t plane = img.plane();
  float* r = img.pixels.data();
  float* g = r + plane;
  float* b = g + plane;
  for (std::size_t i = 0; i < plane; ++i) {
    const float v = luma(r[i], g[i], b[i]);
    r[i] = g[i] = b[i] = v;
  }
}

namespace detail {

inline float clamp01(float v) { return std::clamp(v, 0.0f, 1.0f); }

inline void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0;
  if (d <= 0) {
    h = 0;
    return;
  }
  if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0f + (b - r) / d;
  } else {
    h = 4.0f + (r - g) / d;
  }
  h /= 6.0f;
  if (h < 0) h += 1.0f;
}

inline void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float h6 = h * 6.0f;
  const int i = static_cast<int>(std::floor(h6)) % 6;
  const float f = h6 - std::floor(h6);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace detail

/// Brightness, contrast, saturation, hue; fixed order.
inline void color_jitter_inplace(Image& img, double brightness, double contrast, double saturation,
                                 double hue) {
  const std::size_t plane = img.plane();
  float* r = img.pixels.data();
  float* g = r + plane;
  float* b = g + plane;
  const auto bf = static_cast<float>(brightness);
  for (auto& v : img.pixels) v = detail::clamp01(v * bf);

  double gray_mean = 0;
  for (std::size_t i = 0; i < plane; ++i) gray_mean += luma(r[i], g[i], b[i]);
  const auto m = static_cast<float>(gray_mean / static_cast<double>(plane));
  const auto cf = static_cast<float>(contrast);
  for (auto& v : img.pixels) v = detail::clamp01(cf * v + (1 - cf) * m);

  const auto sf = static_cast<float>(saturation);
  for (std::size_t i = 0; i < plane; ++i) {
    const float l = luma(r[i], g[i], b[i]);
    r[i] = detail::clamp01(sf * r[i] + (1 - sf) * l);
    g[i] = detail::clamp01(sf * g[i] + (1 - sf) * l);
    b[i] = detail::clamp01(sf * b[i] + (1 - sf) * l);
  }

  if (hue != 0) {
    for (std::size_t i = 0; i < plane; ++i) {
      float h, s, v;
      detail::rgb_to_hsv(r[i], g[i], b[i], h, s, v);
      h = static_cast<float>(std::fmod(static_cast<double>(h) + hue + 1.0, 1.0));
      detail::hsv_to_rgb(h, s, v, r[i], g[i], b[i]);
    }
  }
}

/// Odd kernel size nearest to 0.1 x side (23 at 224 px, 3 at 32 px).
inline int blur_kernel_size(std::size_t side) {
  const double target = 0.1 * static_cast<double>(side);
  const long m = std::lround((target - 1.0) / 2.0);
  return static_cast<int>(2 * std::max(0L, m) + 1);
}

inline std::vector<double> gaussian_weights(int kernel, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(kernel));
  const int r = kernel / 2;
  double total = 0;
  for (int i = -r; i <= r; ++i) {
    w[static_cast<std::size_t>(i + r)] = std::exp(-(i * i) / (2 * sigma * sigma));
    total += w[static_cast<std::size_t>(i + r)];
  }
  for (auto& v : w) v /= total;
  return w;
}

/// Separable Gaussian blur with reflect padding.
inline void gaussian_blur_inplace(Image& img, int kernel, double sigma) {
  if (kernel <= 1) return;
  const auto w = gaussian_weights(kernel, sigma);
  const int r = kernel / 2;
  const auto H = static_cast<int>(img.height), W = static_cast<int>(img.width);
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  std::vector<float> tmp(img.plane());
  for (std::size_t c = 0; c < img.channels; ++c) {
    float* p = img.pixels.data() + c * img.plane();
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int k = -r; k <= r; ++k)
          acc += w[static_cast<std::size_t>(k + r)] * p[y * W + reflect(x + k, W)];
        tmp[static_cast<std::size_t>(y * W + x)] = static_cast<float>(acc);
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int k = -r; k <= r; ++k)
          acc += w[static_cast<std::size_t>(k + r)] * tmp[static_cast<std::size_t>(reflect(y + k, H) * W + x)];
        p[y * W + x] = static_cast<float>(acc);
      }
  }
}

inline void solarize_inplace(Image& img, float threshold) {
  for (auto& v : img.pixels)
    if (v >= threshold) v = 1.0f - v;
}

inline void normalize_inplace(Image& img, const DatasetStats& stats) {
  for (std::size_t c = 0; c < img.channels; ++c) {
    float* p = img.pixels.data() + c * img.plane();
    for (std::size_t i = 0; i < img.plane(); ++i) p[i] = (p[i] - stats.mean[c]) / stats.std[c];
  }
}

/// Per-view probabilities for the photometric stage.
struct PhotometricPolicy {
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  JitterStrength jitter{};
  double grayscale_prob = 0.2;
  double blur_prob = 0.5;
  double solarize_prob = 0.0;
};

/// Policy for a view slot. Global views alternate between the two asymmetric
/// settings (blur 1.0 / solarize 0, then blur 0.1 / solarize 0.2); local and
/// cutout views use flip, jitter, grayscale and blur 0.5.
inline PhotometricPolicy policy_for(const ViewRecipe& recipe, ViewType type, int type_slot) {
  PhotometricPolicy p;
  p.jitter = recipe.jitter_strength;
  p.jitter_prob = recipe.jitter_prob;
  p.grayscale_prob = recipe.grayscale_prob;
  if (type == ViewType::kGlobal) {
    const bool second = type_slot % 2 == 1;
    p.blur_prob = second ? 0.1 : 1.0;
    p.solarize_prob = second ? 0.2 : 0.0;
  }
  if (!recipe.flip) p.flip_prob = 0;
  if (!recipe.jitter) p.jitter_prob = 0;
  if (!recipe.grayscale) p.grayscale_prob = 0;
  if (!recipe.blur) p.blur_prob = 0;
  if (!recipe.solarize) p.solarize_prob = 0;
  return p;
}

inline PhotometricDraws draw_photometric(Rng& rng, const PhotometricPolicy& policy,
                                         std::size_t side) {
  PhotometricDraws d;
  d.flipped = rng.bernoulli(policy.flip_prob);
  d.jittered = rng.bernoulli(policy.jitter_prob);
  const auto& j = policy.jitter;
  const double b = rng.uniform(std::max(0.0, 1 - j.brightness), 1 + j.brightness);
  const double c = rng.uniform(std::max(0.0, 1 - j.contrast), 1 + j.contrast);
  const double s = rng.uniform(std::max(0.0, 1 - j.saturation), 1 + j.saturation);
  const double h = rng.uniform(-j.hue, j.hue);
  if (d.jittered) {
    d.brightness = b;
    d.contrast = c;
    d.saturation = s;
    d.hue = h;
  }
  d.grayscale = rng.bernoulli(policy.grayscale_prob);
  d.blurred = rng.bernoulli(policy.blur_prob);
  const double sigma = rng.uniform(0.1, 2.0);
  if (d.blurred) {
    d.blur_sigma = sigma;
    d.blur_kernel = blur_kernel_size(side);
  }
  d.solarized = rng.bernoulli(policy.solarize_prob);
  return d;
}

/// Applies flip, jitter, grayscale, blur and solarize in that order. Values
/// stay in [0, 1]; normalization is a separate step.
inline Image apply_photometric(const Image& img, const PhotometricDraws& d,
                               float solarize_threshold = 0.5f) {
  Image out = img;
  if (d.flipped) hflip_inplace(out);
  if (d.jittered) color_jitter_inplace(out, d.brightness, d.contrast, d.saturation, d.hue);
  if (d.grayscale) grayscale_inplace(out);
  if (d.blurred) gaussian_blur_inplace(out, d.blur_kernel, d.blur_sigma);
  if (d.solarized) solarize_inplace(out, solarize_threshold);
  return out;
}

/// Photometric stage followed by channel normalization.
inline Image photometric(const Image& img, const AugRecord& record, const DatasetStats& stats,
                         float solarize_threshold = 0.5f) {
  Image out = apply_photometric(img, record.photo, solarize_threshold);
  normalize_inplace(out, stats);
  return out;
}

// ---------------------------------------------------------------------------
// View construction

inline std::uint64_t view_stream_id(std::uint64_t sample_key, int slot) {
  return mix64(sample_key ^ (static_cast<std::uint64_t>(slot) + 1) * Rng::kGolden);
}

inline std::uint64_t sample_key(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  return Rng::stream({seed, epoch, index}).key();
}

/// Slot order: globals, then locals, then cutouts.
inline std::vector<ViewType> slot_types(const ViewRecipe& recipe) {
  std::vector<ViewType> types;
  for (int i = 0; i < recipe.n_global; ++i) types.push_back(ViewType::kGlobal);
  for (int i = 0; i < recipe.n_local; ++i) types.push_back(ViewType::kLocal);
  for (int i = 0; i < recipe.n_cutout; ++i) types.push_back(ViewType::kCutout);
  return types;
}

/// Builds every view of one image from the stream keyed by `key` (see
/// sample_key). Output images are channel-normalized.
inline ViewBatch build_views(const Image& img, const ViewRecipe& recipe, const DatasetStats& stats,
                             std::uint64_t key) {
  recipe.validate();
  ViewBatch batch;
  const auto types = slot_types(recipe);
  std::array<int, 3> type_slot{0, 0, 0};
  const CropRect full{0, 0, static_cast<int>(img.height), static_cast<int>(img.width)};
  for (int slot = 0; slot < static_cast<int>(types.size()); ++slot) {
    const ViewType type = types[static_cast<std::size_t>(slot)];
    View view;
    view.type = type;
    AugRecord& rec = view.record;
    rec.view_type = type;
    rec.slot = slot;
    rec.rng_stream_id = view_stream_id(key, slot);
    Rng rng(rec.rng_stream_id);

    const bool local = type == ViewType::kLocal;
    const auto side = static_cast<std::size_t>(local ? recipe.local_size : recipe.global_size);
    const Range area = type == ViewType::kGlobal ? recipe.global_area
                       : local                   ? recipe.local_area
                                                 : recipe.cutout_crop_area;
    if (recipe.crop) {
      const auto draw = sample_resized_crop(rng, img.height, img.width, area, recipe.ratio);
      rec.crop = draw.rect;
      rec.crop_fallback = draw.fallback;
    } else {
      rec.crop = full;
    }
    Image base = resize_crop(img, rec.crop, side, side);

    rec.photo = draw_photometric(rng, policy_for(recipe, type, type_slot[index_of(type)]), side);
    ++type_slot[index_of(type)];
    const auto thr = static_cast<float>(recipe.solarize_threshold);
    Image target = apply_photometric(base, rec.photo, thr);
    Image online = target;

    if (type == ViewType::kCutout) {
      const auto draw = sample_cutout_rect(rng, side, side, recipe.cutout_mask_area, recipe.ratio);
      rec.cutout_rect = draw.rect;
      rec.cutout_fallback = draw.fallback;
      online = apply_cutout(target, draw.rect, stats.mean);
    } else if (type == ViewType::kGlobal && recipe.symmetric_cutout && recipe.n_cutout > 0) {
      const auto draw = sample_cutout_rect(rng, side, side, recipe.cutout_mask_area, recipe.ratio);
      rec.symmetric_mask = draw.rect;
      online = apply_cutout(target, draw.rect, stats.mean);
      target = online;
    }
    normalize_inplace(online, stats);
    normalize_inplace(target, stats);
    view.online = std::move(online);
    view.target = std::move(target);
    batch.views.push_back(std::move(view));
  }
  return batch;
}

/// Views for a list of dataset indices. Work is split over `threads` workers;
/// each sample has its own stream, so the split never changes the output.
inline std::vector<ViewBatch> build_views_for(const Dataset& ds, const std::vector<std::size_t>& idx,
                                              const ViewRecipe& recipe, const DatasetStats& stats,
                                              std::uint64_t seed, std::uint64_t epoch,
                                              unsigned threads = 1) {
  std::vector<ViewBatch> out(idx.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto& item = ds.items[idx[i]];
      out[i] = build_views(item.image, recipe, stats, sample_key(seed, epoch, item.index));
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(idx.size())));
  if (threads == 1) {
    work(0, idx.size());
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (idx.size() + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t b = t * chunk, e = std::min(idx.size(), b + chunk);
    if (b < e) pool.emplace_back(work, b, e);
  }
  for (auto& th : pool) th.join();
  return out;
}

/// Deterministic evaluation transform: resize the shorter side to
/// round(out * 256 / 224), then center-crop out x out, then normalize.
inline Image eval_view(const Image& img, std::size_t out, const DatasetStats& stats) {
  const auto scaled = static_cast<std::size_t>(std::lround(static_cast<double>(out) * 256.0 / 224.0));
  const std::size_t shorter = std::min(img.height, img.width);
  const auto new_h = static_cast<std::size_t>(
      std::lround(static_cast<double>(img.height) * static_cast<double>(scaled) / static_cast<double>(shorter)));
  const auto new_w = static_cast<std::size_t>(
      std::lround(static_cast<double>(img.width) * static_cast<double>(scaled) / static_cast<double>(shorter)));
  Image resized = resize(img, new_h, new_w);
  const CropRect center{static_cast<int>((new_h - out) / 2), static_cast<int>((new_w - out) / 2),
                        static_cast<int>(out), static_cast<int>(out)};
  Image cropped = resize_crop(resized, center, out, out);
  normalize_inplace(cropped, stats);
  return cropped;
}

}  // namespace mulan
