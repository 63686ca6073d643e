// Copyright (c) 2026 The LEGO Bricks Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace lego;
using namespace lego::testing;

TEST(CoordGrid, Corners) {
  const auto g = coord_grid(2, 2).values;
  EXPECT_EQ(g(0, 0, 0), -1.0f);
  EXPECT_EQ(g(0, 0, 1), -1.0f);
  EXPECT_EQ(g(1, 1, 0), 1.0f);
  EXPECT_EQ(g(1, 1, 1), 1.0f);
  EXPECT_EQ(g(0, 1, 0), -1.0f);
  EXPECT_EQ(g(0, 1, 1), 1.0f);
}

TEST(CoordGrid, CenterAndDegenerateAxis) {
  const auto g = coord_grid(3, 3).values;
  EXPECT_EQ(g(1, 1, 0), 0.0f);
  EXPECT_EQ(g(1, 1, 1), 0.0f);
  const auto line = coord_grid(1, 5).values;
  for (std::size_t q = 0; q < 5; ++q) EXPECT_EQ(line(0, q, 0), 0.0f);
  EXPECT_EQ(line(0, 4, 1), 1.0f);
  EXPECT_THROW(coord_grid(0, 4), ParameterError);
}

TEST(CoordGrid, Row16Of64) {
  const auto g = coord_grid(64, 64).values;
  EXPECT_NEAR(g(16, 0, 0), 2.0 * 16 / 63 - 1, 1e-7);
  EXPECT_NEAR(g(16, 0, 0), -0.4921, 5e-5);
}

TEST(CoordGrid, AffineInPixelIndex) {
  const auto g = coord_grid(17, 9).values;
  for (std::size_t p = 1; p + 1 < 17; ++p)
    EXPECT_NEAR(g(p + 1, 0, 0) - g(p, 0, 0), g(p, 0, 0) - g(p - 1, 0, 0), 1e-6);
  for (std::size_t q = 1; q + 1 < 9; ++q)
    EXPECT_NEAR(g(0, q + 1, 1) - g(0, q, 1), g(0, q, 1) - g(0, q - 1, 1), 1e-6);
}

TEST(PatchGrid, RejectsNonDivisible) {
  try {
    PatchGrid(8, 12, 5);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("r=5"), std::string::npos);
    EXPECT_NE(m.find("H=8"), std::string::npos);
    EXPECT_NE(m.find("W=12"), std::string::npos);
  }
  Rng rng(1);
  EXPECT_THROW(partition(random_tensor<float>({6, 6, 1}, rng), 4), ShapeError);
}

TEST(Partition, FourByFour) {
  Tensor<float> x({4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) x[i] = float(i);
  const auto set = partition(x, 2);
  ASSERT_EQ(set.grid.count(), 4u);
  const auto& p = set.patch({1, 1});
  EXPECT_EQ(p(0, 0, 0), 0.0f);
  EXPECT_EQ(p(0, 1, 0), 1.0f);
  EXPECT_EQ(p(1, 0, 0), 4.0f);
  EXPECT_EQ(p(1, 1, 0), 5.0f);
  EXPECT_EQ(set.patch({2, 1})(0, 0, 0), 8.0f);
  EXPECT_EQ(set.patch({1, 2})(0, 0, 0), 2.0f);
}

TEST(Partition, WholeImagePatchAndRoundTrip) {
  Rng rng(2);
  const auto x = random_tensor<float>({8, 8, 3}, rng);
  const auto whole = partition(x, 8);
  ASSERT_EQ(whole.grid.count(), 1u);
  EXPECT_EQ(whole.patches[0], x);
  EXPECT_EQ(assemble(partition(x, 4)), x);
  EXPECT_EQ(assemble(partition(x, 1)), x);
}

TEST(Partition, BruteForceIndexFormula) {
  Rng rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t r = std::size_t(1 + uniform_int(rng, 0, 5));
    const std::size_t H = r * std::size_t(uniform_int(rng, 1, 4)), W = r * std::size_t(uniform_int(rng, 1, 4));
    const auto x = random_tensor<double>({H, W, 2}, rng);
    const auto set = partition(x, r);
    // every pixel covered exactly once
    std::vector<int> hits(H * W, 0);
    for (int i = 1; i <= set.grid.rows(); ++i) {
      for (int j = 1; j <= set.grid.cols(); ++j) {
        const auto& p = set.patch({i, j});
        for (std::size_t a = 1; a <= r; ++a) {
          for (std::size_t b = 1; b <= r; ++b) {
            const std::size_t row = (std::size_t(i) - 1) * r + a, col = (std::size_t(j) - 1) * r + b;  // 1-based
            ++hits[(row - 1) * W + (col - 1)];
            for (std::size_t c = 0; c < 2; ++c) ASSERT_EQ(p(a - 1, b - 1, c), x(row - 1, col - 1, c));
          }
        }
      }
    }
    for (int h : hits) ASSERT_EQ(h, 1);
  }
}

TEST(Partition, CoordinateSliceCommutes) {
  const auto g = coord_grid(16, 8).values;
  const auto set = partition(g, 4);
  for (std::size_t n = 0; n < set.grid.count(); ++n) {
    const auto p = set.grid.at(n);
    const auto& patch = set.patches[n];
    for (std::size_t a = 0; a < 4; ++a)
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t c = 0; c < 2; ++c)
          ASSERT_EQ(patch(a, b, c), g(set.grid.row0(p) + a, set.grid.col0(p) + b, c));
  }
}

TEST(SamplePatches, FullFractionIsExhaustive) {
  Rng rng(4);
  const PatchGrid grid(16, 16, 4);
  const auto idx = sample_patch_indices(grid, 1.0, rng);
  ASSERT_EQ(idx.size(), 16u);
  for (std::size_t n = 0; n < 16; ++n) EXPECT_EQ(idx[n], grid.at(n));
}

TEST(SamplePatches, HalfOfFourByFourOverManyDraws) {
  Rng rng(5);
  const PatchGrid grid(16, 16, 4);
  std::vector<int> freq(16, 0);
  for (int draw = 0; draw < 1000; ++draw) {
    const auto idx = sample_patch_indices(grid, 0.5, rng);
    ASSERT_EQ(idx.size(), 8u);
    std::set<std::size_t> uniq;
    for (auto p : idx) uniq.insert(grid.linear(p));
    ASSERT_EQ(uniq.size(), 8u);
    for (auto u : uniq) ++freq[u];
  }
  // each patch is included with probability 1/2: 500 +- 3 * sqrt(250)
  for (int f : freq) EXPECT_NEAR(f, 500, 3 * std::sqrt(250.0));
}

TEST(SamplePatches, RoundingAndErrors) {
  Rng rng(6);
  const PatchGrid grid(12, 12, 4);  // 9 patches
  EXPECT_EQ(sample_patch_indices(grid, 0.5, rng).size(), 5u);  // 4.5 rounds up
  EXPECT_EQ(sample_patch_indices(grid, 0.01, rng).size(), 1u);
  EXPECT_THROW(sample_patch_indices(grid, 0.0, rng), ParameterError);
  EXPECT_THROW(sample_patch_indices(grid, -0.2, rng), ParameterError);
  EXPECT_THROW(sample_patch_indices(grid, 1.5, rng), ParameterError);
}

TEST(SamplePatches, DeterministicGivenSeed) {
  const PatchGrid grid(32, 32, 4);
  Rng a(9), b(9);
  EXPECT_EQ(sample_patch_indices(grid, 0.3, a), sample_patch_indices(grid, 0.3, b));
}

TEST(FillMissing, AllNoneHalf) {
  Rng rng(7);
  const auto prev = random_tensor<float>({8, 8, 3}, rng), x0 = random_tensor<float>({8, 8, 3}, rng);
  const PatchGrid grid(8, 8, 4);
  EXPECT_EQ(fill_missing(prev, PatchMask(grid, true), x0), prev);
  EXPECT_EQ(fill_missing(prev, PatchMask(grid, false), x0), x0);

  PatchMask half(grid);
  half.set({1, 2});
  half.set({2, 1});
  const auto out = fill_missing(prev, half, x0);
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) {
      const PatchIndex p{int(y / 4) + 1, int(x / 4) + 1};
      const auto& src = half.get(p) ? prev : x0;
      for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(out(y, x, c), src(y, x, c));
    }
  }
}

TEST(FillMissing, GridMismatch) {
  Rng rng(8);
  const auto prev = random_tensor<float>({8, 8, 1}, rng), x0 = random_tensor<float>({8, 8, 1}, rng);
  EXPECT_THROW(fill_missing(prev, PatchMask(PatchGrid(16, 16, 4)), x0), ShapeError);
  EXPECT_THROW(fill_missing(prev, PatchMask(PatchGrid(8, 8, 4)), random_tensor<float>({8, 8, 2}, rng)), ShapeError);
}
