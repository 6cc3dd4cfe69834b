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

#include <gtest/gtest.h>

#include <fstream>

#include "mulan/datasets.hpp"
#include "test_util.hpp"

namespace mulan {
namespace {

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

TEST(Cifar, HandWrittenBlackRecord) {
  const auto dir = testing::scratch_dir("cifar_fixture");
  std::vector<unsigned char> rec(kCifarRecord, 0);
  rec[0] = 3;
  write_bytes(dir / "one.bin", rec);
  const auto ds = load_cifar_binary(dir / "one.bin");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.items[0].label, 3);
  EXPECT_EQ(ds.items[0].image.height, 32u);
  for (float v : ds.items[0].image.pixels) EXPECT_EQ(v, 0.0f);
}

TEST(Cifar, TruncatedFileIsFormatError) {
  const auto dir = testing::scratch_dir("cifar_trunc");
  write_bytes(dir / "short.bin", std::vector<unsigned char>(kCifarRecord - 1, 0));
  EXPECT_THROW(load_cifar_binary(dir / "short.bin"), FormatError);
}

TEST(Cifar, LabelAboveNineIsFormatError) {
  std::vector<unsigned char> rec(kCifarRecord, 0);
  rec[0] = 10;
  EXPECT_THROW(parse_cifar_binary(rec), FormatError);
}

TEST(Cifar, MissingFileIsFormatError) {
  EXPECT_THROW(load_cifar_binary("/nonexistent/mulan/data_batch_1.bin"), FormatError);
}

TEST(Cifar, RoundTripIsByteIdentical) {
  Rng rng(1);
  std::vector<unsigned char> rec(2 * kCifarRecord);
  for (auto& b : rec) b = static_cast<unsigned char>(rng.uniform_int(0, 255));
  rec[0] = 7;
  rec[kCifarRecord] = 0;
  const auto dir = testing::scratch_dir("cifar_roundtrip");
  write_cifar_binary(parse_cifar_binary(rec), dir / "rt.bin");
  std::ifstream in(dir / "rt.bin", std::ios::binary);
  std::vector<unsigned char> back((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(back, rec);
}

TEST(Cifar, SplitDirectoryLoadsBatches) {
  const auto dir = testing::scratch_dir("cifar_split");
  std::vector<unsigned char> rec(kCifarRecord, 0);
  write_bytes(dir / "data_batch_1.bin", rec);
  write_bytes(dir / "data_batch_2.bin", rec);
  write_bytes(dir / "test_batch.bin", rec);
  EXPECT_EQ(load_cifar_split(dir, true).size(), 2u);
  EXPECT_EQ(load_cifar_split(dir, false).size(), 1u);
  EXPECT_EQ(load_cifar_split(dir, true).items[1].index, 1u);
}

TEST(SynthShapes, SameSeedIsBitIdentical) {
  const auto a = synth_shapes(5, 6), b = synth_shapes(5, 6);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.items[i].image, b.items[i].image);
  EXPECT_NE(synth_shapes(6, 6).items[0].image, a.items[0].image);
}

TEST(SynthShapes, ExactClassBalance) {
  const auto ds = synth_shapes(1, 25);
  std::vector<int> hist(4, 0);
  for (const auto& it : ds.items) ++hist[static_cast<std::size_t>(it.label)];
  EXPECT_EQ(hist, (std::vector<int>{25, 25, 25, 25}));
  EXPECT_EQ(ds.n_classes, 4);
}

TEST(SynthShapes, ShapeScaleAndPlacement) {
  for (std::size_t i = 0; i < 200; ++i) {
    SynthShapeParams p;
    const auto li = synth_shape_image(3, i, 32, &p);
    EXPECT_GE(p.size, 0.25 * 32);
    EXPECT_LE(p.size, 0.60 * 32);
    EXPECT_GE(p.cx - p.size / 2, 0.0);
    EXPECT_LE(p.cx + p.size / 2, 32.0);
    for (float v : li.image.pixels) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(SynthShapes, MaskAreaHeuristicSeparatesDiskFromCross) {
  // Fill ratio of the shape inside its bounding box: disk ~0.79, cross ~0.56.
  const auto ds = synth_shapes(11, 100);
  int correct = 0, total = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    SynthShapeParams p;
    synth_shape_image(11, i, 32, &p);
    if (p.cls != ShapeClass::kDisk && p.cls != ShapeClass::kCross) continue;
    const auto& img = ds.items[i].image;
    double covered = 0;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) covered += img.at(0, y, x) > kSynthBackground + kSynthNoiseAmplitude ? 1 : 0;
    const double ratio = covered / (p.size * p.size);
    const ShapeClass guess = ratio > 0.675 ? ShapeClass::kDisk : ShapeClass::kCross;
    correct += guess == p.cls;
    ++total;
  }
  EXPECT_GT(static_cast<double>(correct) / total, 0.5);
}

TEST(SynthShapes, ZeroPerClassIsConfigError) { EXPECT_THROW(synth_shapes(1, 0), ConfigError); }

TEST(Stats, ConstantDatasetGuardsStd) {
  Dataset ds;
  LabeledImage li;
  li.image = Image(3, 4, 4, 0.5f);
  ds.items = {li, li};
  const auto st = compute_stats(ds);
  EXPECT_FLOAT_EQ(st.mean[0], 0.5f);
  EXPECT_EQ(st.std[1], kStatsEps);
  EXPECT_TRUE(st.guarded);
}

TEST(Stats, TwoImageHandComputation) {
  Dataset ds;
  LabeledImage a, b;
  a.image = Image(3, 1, 2);
  b.image = Image(3, 1, 2);
  a.image.pixels = {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f};
  b.image.pixels = {0.3f, 0.4f, 0.0f, 1.0f, 0.5f, 0.5f};
  ds.items = {a, b};
  const auto st = compute_stats(ds);
  // channel 0 values {0.1, 0.2, 0.3, 0.4}: mean 0.25, population variance 0.0125
  EXPECT_NEAR(st.mean[0], 0.25, 1e-7);
  EXPECT_NEAR(st.std[0], std::sqrt(0.0125), 1e-7);
  // channel 1 values {0.3, 0.4, 0.0, 1.0}: mean 0.425
  EXPECT_NEAR(st.mean[1], 0.425, 1e-7);
  const double v1 = (0.125 * 0.125 + 0.025 * 0.025 + 0.425 * 0.425 + 0.575 * 0.575) / 4;
  EXPECT_NEAR(st.std[1], std::sqrt(v1), 1e-7);
  // channel 2 values {0.5, 0.6, 0.5, 0.5}: mean 0.525, variance 0.001875
  EXPECT_NEAR(st.mean[2], 0.525, 1e-7);
  EXPECT_NEAR(st.std[2], std::sqrt(0.001875), 1e-7);
  EXPECT_FALSE(st.guarded);
}

TEST(Stats, PermutationInvariant) {
  auto ds = synth_shapes(2, 5);
  const auto st = compute_stats(ds);
  std::reverse(ds.items.begin(), ds.items.end());
  const auto rev = compute_stats(ds);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(st.mean[c], rev.mean[c], 1e-7);
    EXPECT_NEAR(st.std[c], rev.std[c], 1e-7);
  }
}

TEST(Stats, EmptyDatasetIsConfigError) { EXPECT_THROW(compute_stats(Dataset{}), ConfigError); }

}  // namespace
}  // namespace mulan
