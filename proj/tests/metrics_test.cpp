/* Copyright 2026 The IQT Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "iqt/error.hpp"
#include "iqt/metrics.hpp"

namespace iqt {
namespace {

Volume3D random_volume(Dims d, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Volume3D v(d, Geometry{});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& x : v.data()) x = u(rng);
  return v;
}

// Windowed statistics evaluated directly at every valid centre.
double naive_ssim(const Volume3D& x, const Volume3D& y, int size, double sigma) {
  std::vector<double> g(size);
  double gs = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    gs += g[i];
  }
  for (double& v : g) v /= gs;
  double lo = y.data()[0];
  double hi = lo;
  for (double v : y.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double c1 = (0.01 * (hi - lo)) * (0.01 * (hi - lo));
  const double c2 = (0.03 * (hi - lo)) * (0.03 * (hi - lo));
  const Dims d = x.dims();
  double total = 0.0;
  int count = 0;
  for (int i = 0; i + size <= d.nx; ++i)
    for (int j = 0; j + size <= d.ny; ++j)
      for (int k = 0; k + size <= d.nz; ++k) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int a = 0; a < size; ++a)
          for (int b = 0; b < size; ++b)
            for (int c = 0; c < size; ++c) {
              const double w = g[a] * g[b] * g[c];
              const double xv = x(i + a, j + b, k + c);
              const double yv = y(i + a, j + b, k + c);
              mx += w * xv;
              my += w * yv;
              sxx += w * xv * xv;
              syy += w * yv * yv;
              sxy += w * xv * yv;
            }
        const double vx = sxx - mx * mx;
        const double vy = syy - my * my;
        const double cxy = sxy - mx * my;
        total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return total / count;
}

TEST(Psnr, IdenticalIsInfinite) {
  const Volume3D v = random_volume({4, 4, 4}, 1);
  EXPECT_EQ(psnr(v, v), std::numeric_limits<double>::infinity());
}

TEST(Psnr, ConstantOffsetTwentyDecibels) {
  Volume3D ref({4, 4, 4}, Geometry{}, 0.5);
  ref(0, 0, 0) = 1.0;
  Volume3D est = ref;
  for (double& v : est.data()) v += 0.1;
  EXPECT_NEAR(psnr(est, ref), 20.0, 1e-9);
}

TEST(Psnr, MatchesTwoPassOracle) {
  const Volume3D a = random_volume({9, 7, 5}, 2, 0.0, 200.0);
  const Volume3D b = random_volume({9, 7, 5}, 3, 0.0, 200.0);
  double peak = 0.0;
  for (double v : b.data()) peak = std::max(peak, v);
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mse += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
  }
  mse /= static_cast<double>(a.size());
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(peak * peak / mse), 1e-9);
}

TEST(Psnr, DecreasesWithNoise) {
  const Volume3D ref = random_volume({10, 10, 10}, 4, 0.0, 100.0);
  const Volume3D noise = random_volume({10, 10, 10}, 5, -1.0, 1.0);
  double prev = std::numeric_limits<double>::infinity();
  for (double s : {1.0, 2.0, 4.0}) {
    Volume3D est = ref;
    for (std::size_t i = 0; i < est.size(); ++i) est.data()[i] += s * noise.data()[i];
    const double p = psnr(est, ref);
    EXPECT_LT(p, prev);
    prev = p;
  }
}

TEST(Psnr, DimsMismatch) {
  EXPECT_THROW(psnr(random_volume({4, 4, 4}, 6), random_volume({4, 4, 5}, 7)), ArgumentError);
}

TEST(Ssim, SelfIsExactlyOne) {
  const Volume3D v = random_volume({16, 16, 16}, 8);
  EXPECT_EQ(ssim(v, v), 1.0);
}

TEST(Ssim, MatchesNaiveWindows) {
  const Volume3D a = random_volume({16, 16, 16}, 9);
  Volume3D b = a;
  const Volume3D n = random_volume({16, 16, 16}, 10, -0.3, 0.3);
  for (std::size_t i = 0; i < b.size(); ++i) b.data()[i] += n.data()[i];
  EXPECT_NEAR(ssim(b, a), naive_ssim(b, a, 11, 1.5), 1e-6);
  SsimOptions small;
  small.window = 5;
  small.sigma = 1.0;
  EXPECT_NEAR(ssim(b, a, small), naive_ssim(b, a, 5, 1.0), 1e-6);
}

TEST(Ssim, NegationIsNegative) {
  const Volume3D a = random_volume({14, 14, 14}, 11, -1.0, 1.0);
  Volume3D b = a;
  for (double& v : b.data()) v = -v;
  EXPECT_LT(ssim(b, a), 0.0);
}

TEST(Ssim, SymmetricForEqualRange) {
  const Volume3D a = random_volume({13, 13, 13}, 12);
  Volume3D b(a.dims(), Geometry{});
  for (int x = 0; x < 13; ++x)
    for (int y = 0; y < 13; ++y)
      for (int z = 0; z < 13; ++z) b(x, y, z) = 0.5 * a(x, y, z) + 0.5 * a(12 - x, y, z);
  b(0, 0, 0) = *std::min_element(a.data().begin(), a.data().end());
  b(1, 0, 0) = *std::max_element(a.data().begin(), a.data().end());
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-12);
}

TEST(Ssim, Errors) {
  const Volume3D small = random_volume({8, 16, 16}, 13);
  EXPECT_THROW(ssim(small, small), ArgumentError);
  const Volume3D flat({12, 12, 12}, Geometry{}, 2.0);
  EXPECT_THROW(ssim(random_volume({12, 12, 12}, 14), flat), ArgumentError);
}

TEST(Ssim, WindowIsNormalised) {
  const auto g = gaussian_window(11, 1.5);
  double s = 0.0;
  for (double v : g) s += v;
  EXPECT_NEAR(s, 1.0, 1e-15);
  EXPECT_EQ(g[0], g[10]);
  EXPECT_GT(g[5], g[4]);
}

TEST(Rve, ClosedForms) {
  EXPECT_EQ(rve_from_volumes(100.0, 100.0), 0.0);
  EXPECT_DOUBLE_EQ(rve_from_volumes(150.0, 100.0), 0.4);
  EXPECT_DOUBLE_EQ(rve_from_volumes(100.0, 150.0), 0.4);
  EXPECT_EQ(rve_from_volumes(0.0, 10.0), 2.0);
  EXPECT_THROW(rve_from_volumes(0.0, 0.0), DegenerateError);
}

TEST(Rve, FromLabelVolumes) {
  const Geometry g{1.0, 2.0, 1.5, 0.0};
  Volume3D est({10, 10, 3}, g);
  Volume3D gold({10, 10, 3}, g);
  for (int i = 0; i < 30; ++i) est.data()[i] = 5.0;
  for (int i = 0; i < 20; ++i) gold.data()[i] = 5.0;
  const LabelVolume le = LabelVolume::from_volume(est);
  const LabelVolume lg = LabelVolume::from_volume(gold);
  EXPECT_DOUBLE_EQ(le.structure_volume_mm3(5), 30 * 3.0);
  EXPECT_DOUBLE_EQ(rve(le, lg, 5), 2.0 * 30.0 / 150.0);
  EXPECT_THROW(rve(le, lg, 9), DegenerateError);
  Volume3D neg({2, 2, 2}, g, -1.0);
  EXPECT_THROW(LabelVolume::from_volume(neg), ArgumentError);
}

}  // namespace
}  // namespace iqt
