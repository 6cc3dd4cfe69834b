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
#include <cstddef>
#include <vector>

#include "mulan/errors.hpp"

namespace mulan {

/// Planar C x H x W float image.
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  std::size_t plane() const { return height * width; }

  friend bool operator==(const Image&, const Image&) = default;
};

struct CropRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  long area() const { return static_cast<long>(height) * width; }
  bool inside(std::size_t img_h, std::size_t img_w) const {
    return top >= 0 && left >= 0 && height >= 1 && width >= 1 &&
           static_cast<std::size_t>(top + height) <= img_h &&
           static_cast<std::size_t>(left + width) <= img_w;
  }
  friend bool operator==(const CropRect&, const CropRect&) = default;
};

/// Bilinear resampling of `rect` of `src` to out_h x out_w, using half-pixel
/// centers and edge clamping.
inline Image resize_crop(const Image& src, const CropRect& rect, std::size_t out_h,
                         std::size_t out_w) {
  if (!rect.inside(src.height, src.width)) throw ContractError("resize_crop: rect outside image");
  Image out(src.channels, out_h, out_w);
  const double sy = static_cast<double>(rect.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(rect.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(rect.height - 1));
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min<std::size_t>(y0 + 1, static_cast<std::size_t>(rect.height - 1));
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(rect.width - 1));
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 =
          std::min<std::size_t>(x0 + 1, static_cast<std::size_t>(rect.width - 1));
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const auto py0 = static_cast<std::size_t>(rect.top) + y0;
        const auto py1 = static_cast<std::size_t>(rect.top) + y1;
        const auto px0 = static_cast<std::size_t>(rect.left) + x0;
        const auto px1 = static_cast<std::size_t>(rect.left) + x1;
        const double top = (1 - wx) * src.at(c, py0, px0) + wx * src.at(c, py0, px1);
        const double bot = (1 - wx) * src.at(c, py1, px0) + wx * src.at(c, py1, px1);
        out.at(c, y, x) = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

inline Image resize(const Image& src, std::size_t out_h, std::size_t out_w) {
  return resize_crop(src, CropRect{0, 0, static_cast<int>(src.height), static_cast<int>(src.width)},
                     out_h, out_w);
}

}  // namespace mulan
