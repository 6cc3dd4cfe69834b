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
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <string>
#include <vector>

#include "mulan/errors.hpp"
#include "mulan/image.hpp"
#include "mulan/rng.hpp"

namespace mulan {

struct LabeledImage {
  Image image;  // 3 x H x W, values in [0, 1]
  int label = 0;
  std::size_t index = 0;
};

struct Dataset {
  std::vector<LabeledImage> items;
  int n_classes = 0;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

struct DatasetStats {
  std::array<float, 3> mean{0.f, 0.f, 0.f};
  std::array<float, 3> std{1.f, 1.f, 1.f};
  bool guarded = false;  // some channel had zero spread and was clamped to eps
};

// ---------------------------------------------------------------------------
// CIFAR-10 binary: 3073-byte records, label byte then R, G, B planes of 32x32.

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

inline Dataset parse_cifar_binary(const std::vector<unsigned char>& bytes,
                                  const std::string& origin = "<memory>") {
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError(origin + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of the 3073-byte CIFAR record");
  }
  Dataset ds;
  ds.n_classes = 10;
  const std::size_t n = bytes.size() / kCifarRecord;
  ds.items.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9) {
      throw FormatError(origin + ": record " + std::to_string(r) + " has label byte " +
                        std::to_string(rec[0]));
    }
    LabeledImage li;
    li.label = rec[0];
    li.index = r;
    li.image = Image(3, kCifarSide, kCifarSide);
    for (std::size_t i = 0; i < li.image.pixels.size(); ++i)
      li.image.pixels[i] = static_cast<float>(rec[1 + i]) / 255.0f;
    ds.items.push_back(std::move(li));
  }
  return ds;
}

inline Dataset load_cifar_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return parse_cifar_binary(bytes, path.string());
}

inline std::vector<unsigned char> serialize_cifar_binary(const Dataset& ds) {
  std::vector<unsigned char> bytes;
  bytes.reserve(ds.size() * kCifarRecord);
  for (const auto& li : ds.items) {
    if (li.image.channels != 3 || li.image.height != kCifarSide || li.image.width != kCifarSide)
      throw ContractError("serialize_cifar_binary: images must be 3x32x32");
    if (li.label < 0 || li.label > 9) throw ContractError("serialize_cifar_binary: label > 9");
    bytes.push_back(static_cast<unsigned char>(li.label));
    for (float v : li.image.pixels)
      bytes.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.f, 1.f) * 255.0f)));
  }
  return bytes;
}

inline void write_cifar_binary(const Dataset& ds, const std::filesystem::path& path) {
  const auto bytes = serialize_cifar_binary(ds);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing " + path.string());
}

/// Concatenates every data_batch_*.bin (train) or test_batch.bin (val) in a
/// CIFAR-10 binary directory.
inline Dataset load_cifar_split(const std::filesystem::path& dir, bool train) {
  Dataset all;
  all.n_classes = 10;
  std::vector<std::filesystem::path> files;
  if (train) {
    for (int b = 1; b <= 5; ++b) {
      auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
      if (std::filesystem::exists(p)) files.push_back(p);
    }
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  if (files.empty()) throw FormatError("no CIFAR-10 batches found in " + dir.string());
  for (const auto& f : files) {
    auto part = load_cifar_binary(f);
    for (auto& li : part.items) {
      li.index = all.items.size();
      all.items.push_back(std::move(li));
    }
  }
  return all;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeClass { kDisk = 0, kSquare = 1, kTriangle = 2, kCross = 3 };
inline constexpr int kShapeClasses = 4;

namespace detail {

inline bool inside_shape(ShapeClass cls, double dx, double dy, double s) {
  const double h = s / 2.0;
  switch (cls) {
    case ShapeClass::kDisk:
      return dx * dx + dy * dy <= h * h;
    case ShapeClass::kSquare:
      return std::abs(dx) <= h && std::abs(dy) <= h;
    case ShapeClass::kTriangle: {
      if (dy < -h || dy > h) return false;
      const double half_width = (dy + h) / s * h;  // apex at the top
      return std::abs(dx) <= half_width;
    }
    case ShapeClass::kCross: {
      const double arm = s / 6.0;
      return (std::abs(dx) <= arm && std::abs(dy) <= h) || (std::abs(dy) <= arm && std::abs(dx) <= h);
    }
  }
  return false;
}

}  // namespace detail

struct SynthShapeParams {
  ShapeClass cls;
  double size;  // bounding-box side in pixels
  double cx, cy;
  std::array<float, 3> color;
};

inline constexpr float kSynthNoiseAmplitude = 0.1f;
inline constexpr float kSynthBackground = 0.2f;

/// One synthetic image; a pure function of (seed, index).
inline LabeledImage synth_shape_image(std::uint64_t seed, std::size_t index, std::size_t side,
                                      SynthShapeParams* params_out = nullptr) {
  Rng rng = Rng::stream({seed, 0x5a17ULL, index});
  const auto cls = static_cast<ShapeClass>(index % kShapeClasses);
  const double s = rng.uniform(0.25, 0.60) * static_cast<double>(side);
  const double half = s / 2.0;
  const double cx = rng.uniform(half, static_cast<double>(side) - half);
  const double cy = rng.uniform(half, static_cast<double>(side) - half);
  std::array<float, 3> color{};
  for (auto& c : color) c = static_cast<float>(rng.uniform(0.45, 1.0));

  LabeledImage li;
  li.label = static_cast<int>(cls);
  li.index = index;
  li.image = Image(3, side, side);
  constexpr int kSub = 4;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSub;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub;
          hits += detail::inside_shape(cls, px - cx, py - cy, s) ? 1 : 0;
        }
      const float alpha = static_cast<float>(hits) / (kSub * kSub);
      for (std::size_t c = 0; c < 3; ++c) {
        const float bg = kSynthBackground + kSynthNoiseAmplitude * (static_cast<float>(rng.uniform()) - 0.5f);
        li.image.at(c, y, x) = (1.0f - alpha) * bg + alpha * color[c];
      }
    }
  if (params_out) *params_out = SynthShapeParams{cls, s, cx, cy, color};
  return li;
}

/// Balanced dataset of disks, squares, triangles and crosses (labels 0..3).
inline Dataset synth_shapes(std::uint64_t seed, std::size_t n_per_class, std::size_t side = 32) {
  if (n_per_class < 1) throw ConfigError("synth_shapes: n_per_class must be >= 1");
  Dataset ds;
  ds.n_classes = kShapeClasses;
  ds.items.reserve(n_per_class * kShapeClasses);
  for (std::size_t i = 0; i < n_per_class * kShapeClasses; ++i)
    ds.items.push_back(synth_shape_image(seed, i, side));
  return ds;
}

// ---------------------------------------------------------------------------

inline constexpr float kStatsEps = 1e-6f;

inline DatasetStats compute_stats(const Dataset& ds) {
  if (ds.empty()) throw ConfigError("compute_stats: empty dataset");
  DatasetStats st;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    std::size_t count = 0;
    for (const auto& li : ds.items) {
      const std::size_t plane = li.image.plane();
      const float* p = li.image.pixels.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      count += plane;
    }
    const double m = s / static_cast<double>(count);
    double sq = 0;
    for (const auto& li : ds.items) {
      const std::size_t plane = li.image.plane();
      const float* p = li.image.pixels.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
    }
    const double var = sq / static_cast<double>(count);
    st.mean[c] = static_cast<float>(m);
    double sd = std::sqrt(var);
    if (sd < kStatsEps) {
      sd = kStatsEps;
      st.guarded = true;
    }
    st.std[c] = static_cast<float>(sd);
  }
  if (st.guarded) std::cerr << "warning: zero channel variance, std clamped to eps\n";
  return st;
}

}  // namespace mulan
