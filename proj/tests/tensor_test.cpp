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

#include <cmath>

#include "mulan/gradcheck.hpp"
#include "mulan/ops.hpp"
#include "test_util.hpp"

namespace mulan {
namespace {

using testing::random_tensor;
using testing::to_vec;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tape<double> tape;
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(to_vec(matmul(tape, eye, m)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, OrthogonalRowsGiveZero) {
  Tape<double> tape;
  Tensor<double> a({1, 2}, {1, 0});
  Tensor<double> b({2, 1}, {0, 1});
  EXPECT_EQ(matmul(tape, a, b).item(), 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  Tape<double> tape;
  auto a = random_tensor(rng, {3, 4});
  auto b = random_tensor(rng, {4, 2});
  auto c = matmul(tape, a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a.at(i * 4 + k) * b.at(k * 2 + j);
      EXPECT_NEAR(c.at(i * 2 + j), s, 1e-6);
    }
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape<double> tape;
  EXPECT_THROW(matmul(tape, Tensor<double>({2, 3}), Tensor<double>({2, 3})), DimensionError);
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  Rng rng(1);
  Tape<double> tape;
  auto x = random_tensor(rng, {2, 3, 6, 6});
  auto y = conv2d(tape, x, Tensor<double>({4, 3, 3, 3}, 0.0), 1);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, CenterKernelIsIdentity) {
  Rng rng(2);
  Tape<double> tape;
  auto x = random_tensor(rng, {1, 1, 5, 5});
  Tensor<double> k({1, 1, 3, 3}, 0.0);
  k.values_mut()[4] = 1;
  EXPECT_EQ(to_vec(conv2d(tape, x, k, 1)), to_vec(x));
}

// Direct cross-correlation with zero padding 1.
std::vector<double> conv_loops(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), f = k.dim(0);
  const std::size_t oh = (h + 2 - 3) / stride + 1, ow = (w + 2 - 3) / stride + 1;
  std::vector<double> out(n * f * oh * ow, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = 0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - 1;
                const long ix = static_cast<long>(xx * stride + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                s += k.at(((o * c + ch) * 3 + ky) * 3 + kx) *
                     x.at(((i * c + ch) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix));
              }
          out[((i * f + o) * oh + y) * ow + xx] = s;
        }
  return out;
}

TEST(Conv2d, MatchesNestedLoops) {
  Rng rng(3);
  Tape<double> tape;
  auto x = random_tensor(rng, {1, 1, 4, 4});
  auto k = random_tensor(rng, {1, 1, 3, 3});
  const auto got = to_vec(conv2d(tape, x, k, 1));
  const auto want = conv_loops(x, k, 1);
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-6);
}

TEST(Conv2d, StridedMultiChannelMatchesNestedLoops) {
  Rng rng(4);
  Tape<double> tape;
  auto x = random_tensor(rng, {2, 3, 7, 6});
  auto k = random_tensor(rng, {5, 3, 3, 3});
  auto y = conv2d(tape, x, k, 2);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 4, 3}));
  const auto got = to_vec(y);
  const auto want = conv_loops(x, k, 2);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-9);
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  Tape<double> tape;
  EXPECT_THROW(conv2d(tape, Tensor<double>({1, 1, 1, 1}), Tensor<double>({1, 1, 5, 5}), 1), DimensionError);
}

BnRunning<double> fresh_running(std::size_t d) { return {Tensor<double>({d}, 0.0), Tensor<double>({d}, 1.0)}; }

TEST(Batchnorm, ConstantColumnGivesBeta) {
  Tape<double> tape;
  Tensor<double> x({4, 2}, {5, 1, 5, 2, 5, 3, 5, 4});
  Tensor<double> gamma({2}, {2.0, 1.0}), beta({2}, {0.25, -1.0});
  auto r = fresh_running(2);
  auto y = batchnorm(tape, x, gamma, beta, r);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i * 2), 0.25, 1e-12);
}

TEST(Batchnorm, StandardizedInputPassesThrough) {
  Tape<double> tape;
  Tensor<double> x({4, 1}, {-1, 1, -1, 1});  // mean 0, population variance 1
  auto r = fresh_running(1);
  auto y = batchnorm(tape, x, Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), r);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i), x.at(i), 1e-5);
}

TEST(Batchnorm, MatchesPerColumnStatistics) {
  Rng rng(5);
  Tape<double> tape;
  auto x = random_tensor(rng, {8, 3}, 2.0);
  auto gamma = random_tensor(rng, {3});
  auto beta = random_tensor(rng, {3});
  auto r = fresh_running(3);
  auto y = batchnorm(tape, x, gamma, beta, r);
  for (std::size_t j = 0; j < 3; ++j) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 8; ++i) m += x.at(i * 3 + j) / 8;
    for (std::size_t i = 0; i < 8; ++i) v += (x.at(i * 3 + j) - m) * (x.at(i * 3 + j) - m) / 8;
    for (std::size_t i = 0; i < 8; ++i) {
      const double want = gamma.at(j) * (x.at(i * 3 + j) - m) / std::sqrt(v + 1e-5) + beta.at(j);
      EXPECT_NEAR(y.at(i * 3 + j), want, 1e-6);
    }
  }
}

TEST(Batchnorm, SingleSampleInTrainModeThrows) {
  Tape<double> tape;
  auto r = fresh_running(2);
  EXPECT_THROW(batchnorm(tape, Tensor<double>({1, 2}), Tensor<double>({2}, 1.0), Tensor<double>({2}, 0.0), r),
               DegenerateBatchError);
}

TEST(Batchnorm, EvalModeUsesRunningStatistics) {
  Tape<double> tape;
  BnRunning<double> r{Tensor<double>({1}, 2.0), Tensor<double>({1}, 4.0)};
  BnOptions opt;
  opt.mode = BnMode::kEval;
  auto y = batchnorm(tape, Tensor<double>({1, 1}, 6.0), Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), r, opt);
  EXPECT_NEAR(y.item(), 4.0 / std::sqrt(4.0 + 1e-5), 1e-12);
}

TEST(Elementwise, ReluClampsNegatives) {
  Tape<double> tape;
  EXPECT_EQ(to_vec(relu(tape, Tensor<double>({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
}

TEST(Elementwise, AddZerosIsIdentity) {
  Rng rng(6);
  Tape<double> tape;
  auto x = random_tensor(rng, {2, 5});
  EXPECT_EQ(to_vec(add(tape, x, Tensor<double>({2, 5}, 0.0))), to_vec(x));
}

TEST(Elementwise, ShapeMismatchThrows) {
  Tape<double> tape;
  EXPECT_THROW(add(tape, Tensor<double>({2}), Tensor<double>({3})), DimensionError);
  EXPECT_THROW(mul(tape, Tensor<double>({2, 1}), Tensor<double>({1, 2})), DimensionError);
}

const GradCase& builtin(const std::string& name) {
  static const auto cases = builtin_grad_cases();
  for (const auto& c : cases)
    if (c.name == name) return c;
  throw std::out_of_range(name);
}

TEST(Elementwise, MulGradientMatchesFiniteDifferences) {
  const auto line = run_grad_case(builtin("mul"), {});
  EXPECT_TRUE(line.passed) << line.max_rel_error;
  EXPECT_LE(line.max_rel_error, 1e-4);
}

TEST(L2Normalize, ThreeFourTriangle) {
  Tape<double> tape;
  auto y = l2_normalize(tape, Tensor<double>({1, 2}, {3, 4}));
  EXPECT_NEAR(y.at(0), 0.6, 1e-15);
  EXPECT_NEAR(y.at(1), 0.8, 1e-15);
}

TEST(L2Normalize, UnitVectorIsFixedPoint) {
  Tape<double> tape;
  Tensor<double> u({1, 3}, {0, 1, 0});
  EXPECT_EQ(to_vec(l2_normalize(tape, u)), to_vec(u));
}

TEST(L2Normalize, DistanceGradientMatchesFiniteDifferences) {
  GradCase c;
  c.name = "normalized distance";
  c.make_inputs = [](Rng& rng) { return std::vector<Tensor<double>>{random_tensor(rng, {3, 5})}; };
  c.f = [](Tape<double>& tape, const std::vector<Tensor<double>>& in) {
    Tensor<double> target({3, 5});
    for (std::size_t i = 0; i < 15; ++i) target.values_mut()[i] = 0.1 * static_cast<double>(i % 4);
    auto d = sub(tape, l2_normalize(tape, in[0]), target);
    return sum(tape, mul(tape, d, d));
  };
  const auto line = run_grad_case(c, {});
  EXPECT_TRUE(line.passed) << line.max_rel_error;
}

TEST(GlobalMeanPool, ConstantMapGivesConstant) {
  Tape<double> tape;
  auto y = global_mean_pool(tape, Tensor<double>({2, 3, 4, 4}, 1.5));
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 1.5);
}

TEST(GlobalMeanPool, OneByOneIsIdentity) {
  Rng rng(7);
  Tape<double> tape;
  auto x = random_tensor(rng, {2, 3, 1, 1});
  EXPECT_EQ(to_vec(global_mean_pool(tape, x)), to_vec(x));
}

TEST(GlobalMeanPool, MatchesExplicitSum) {
  Rng rng(8);
  Tape<double> tape;
  auto x = random_tensor(rng, {2, 3, 5, 4});
  auto y = global_mean_pool(tape, x);
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0;
    for (std::size_t p = 0; p < 20; ++p) s += x.at(i * 20 + p);
    EXPECT_NEAR(y.at(i), s / 20, 1e-6);
  }
}

TEST(Backward, SumGivesOnes) {
  Tape<double> tape;
  Tensor<double> x({2, 3}, 0.7);
  x.set_requires_grad(true);
  backward(sum(tape, x), tape);
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, ZeroScaleGivesZeros) {
  Tape<double> tape;
  Tensor<double> x({4}, {1, 2, 3, 4});
  x.set_requires_grad(true);
  backward(sum(tape, scale(tape, x, 0.0)), tape);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, LeafGradientsAccumulateAcrossCalls) {
  Tape<double> tape;
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad(true);
  auto loss = sum(tape, x);
  backward(loss, tape);
  backward(loss, tape);
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, NonScalarLossThrows) {
  Tape<double> tape;
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad(true);
  EXPECT_THROW(backward(scale(tape, x, 2.0), tape), ContractError);
}

TEST(Backward, NoGradTapeRecordsNothing) {
  auto tape = Tape<double>::no_grad();
  Tensor<double> x({3}, 1.0);
  x.set_requires_grad(true);
  auto y = sum(tape, x);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_THROW(backward(y, tape), ContractError);
}

TEST(Backward, TapeClearReleasesLiveValues) {
  Tape<double> tape;
  Tensor<double> x({10}, 1.0);
  x.set_requires_grad(true);
  sum(tape, relu(tape, x));
  EXPECT_EQ(tape.live_values(), 11u);
  tape.clear();
  EXPECT_EQ(tape.live_values(), 0u);
  EXPECT_EQ(tape.high_water_values(), 11u);
}

TEST(Ops, NonFiniteOutputRaisesNumericError) {
  Tape<double> tape;
  Tensor<double> x({1}, std::numeric_limits<double>::infinity());
  EXPECT_THROW(scale(tape, x, 1.0), NumericError);
}

}  // namespace
}  // namespace mulan
