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
#include <filesystem>
#include <random>
#include <vector>

#include "iqt/error.hpp"
#include "iqt/normalizer.hpp"

namespace iqt {
namespace {

// Foreground values laid out in a 1 x 1 x n column with a zero border slice.
Volume3D column(const std::vector<double>& values) {
  Volume3D v({1, 1, static_cast<int>(values.size()) + 1}, Geometry{});
  for (std::size_t i = 0; i < values.size(); ++i) v(0, 0, static_cast<int>(i) + 1) = values[i];
  return v;
}

Volume3D uniform_volume(Dims d, double lo, double hi, std::uint64_t seed) {
  Volume3D v(d, Geometry{});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& x : v.data()) x = u(rng);
  return v;
}

// Linear-interpolated order statistic, written out for the test.
double order_statistic(std::vector<double> v, double pct) {
  std::sort(v.begin(), v.end());
  const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

TEST(Landmarks, ConstantForeground) {
  const Volume3D v = column(std::vector<double>(200, 7.0));
  for (double l : compute_landmarks(v, default_percentiles())) EXPECT_EQ(l, 7.0);
}

TEST(Landmarks, UniformMatchesOrderStatistics) {
  const Volume3D v = uniform_volume({20, 20, 20}, 0.0, 100.0, 1);
  const std::vector<double> pct{10.0, 50.0, 90.0};
  const auto l = compute_landmarks(v, pct);
  std::vector<double> all(v.data().begin(), v.data().end());
  for (std::size_t i = 0; i < pct.size(); ++i) {
    EXPECT_NEAR(l[i], order_statistic(all, pct[i]), 1e-9);
    EXPECT_NEAR(l[i], pct[i], 2.0);
  }
}

TEST(Landmarks, RejectsBadPercentiles) {
  const Volume3D v = uniform_volume({8, 8, 8}, 1.0, 2.0, 2);
  const std::vector<double> desc{50.0, 10.0};
  EXPECT_THROW(compute_landmarks(v, desc), ArgumentError);
  const std::vector<double> one{50.0};
  EXPECT_THROW(compute_landmarks(v, one), ArgumentError);
  const std::vector<double> out_of_range{0.0, 50.0};
  EXPECT_THROW(compute_landmarks(v, out_of_range), ArgumentError);
}

TEST(Landmarks, TooFewForegroundVoxels) {
  const Volume3D v = column(std::vector<double>(kMinForegroundVoxels - 1, 3.0));
  EXPECT_THROW(compute_landmarks(v, default_percentiles()), EstimationError);
}

TEST(Fit, SingleVolume) {
  const Volume3D v = uniform_volume({10, 10, 10}, 5.0, 50.0, 3);
  const std::vector<Volume3D> vols{v};
  const LandmarkTable t = fit_normalizer(vols);
  const auto l = compute_landmarks(v, default_percentiles());
  EXPECT_EQ(t.target, l);
  EXPECT_EQ(t.source, t.target);
}

TEST(Fit, MeanOfLandmarks) {
  const Volume3D a = uniform_volume({10, 10, 10}, 5.0, 50.0, 4);
  Volume3D b = a;
  for (double& x : b.data()) x *= 3.0;
  const std::vector<Volume3D> ab{a, b};
  const std::vector<Volume3D> ba{b, a};
  const LandmarkTable t = fit_normalizer(ab);
  const auto l = compute_landmarks(a, default_percentiles());
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_NEAR(t.target[i], 2.0 * l[i], 1e-12);
  EXPECT_EQ(fit_normalizer(ba).target, t.target);
}

TEST(Apply, IdentityTable) {
  const Volume3D v = uniform_volume({6, 6, 6}, 1.0, 9.0, 5);
  LandmarkTable t{{10.0, 90.0}, {1.0, 9.0}, {1.0, 9.0}};
  const Volume3D out = apply_normalization(v, t);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(out.data()[i], v.data()[i], 1e-12);
}

TEST(Apply, DoublingTableAndZeros) {
  Volume3D v = uniform_volume({6, 6, 6}, 1.0, 9.0, 6);
  v(0, 0, 0) = 0.0;
  v(5, 5, 5) = 0.0;
  LandmarkTable t{{10.0, 50.0, 90.0}, {1.0, 4.0, 9.0}, {2.0, 8.0, 18.0}};
  const Volume3D out = apply_normalization(v, t);
  for (std::size_t i = 0; i < v.size(); ++i) {
    EXPECT_NEAR(out.data()[i], 2.0 * v.data()[i], 1e-12);
  }
  EXPECT_EQ(out(0, 0, 0), 0.0);
  EXPECT_EQ(out(5, 5, 5), 0.0);
}

TEST(Apply, LandmarksLandOnTargets) {
  // 1001 voxels put every default percentile on an order statistic.
  const Volume3D v = uniform_volume({7, 11, 13}, 10.0, 200.0, 7);
  const std::vector<Volume3D> others{uniform_volume({12, 12, 12}, 0.5, 3.0, 8)};
  const LandmarkTable standard = fit_normalizer(others);
  const Volume3D out = normalize(v, standard);
  const auto l = compute_landmarks(out, standard.percentiles);
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_NEAR(l[i], standard.target[i], 1e-9);
  // Idempotent.
  const Volume3D twice = normalize(out, standard);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_NEAR(twice.data()[i], out.data()[i], 1e-6);
  }
}

TEST(Apply, Monotone) {
  LandmarkTable t{{10.0, 50.0, 90.0}, {1.0, 1.0, 5.0}, {0.0, 2.0, 3.0}};
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-5.0, 10.0);
  for (int i = 0; i < 5000; ++i) {
    double a = u(rng);
    double b = u(rng);
    if (a > b) std::swap(a, b);
    ASSERT_LE(t.map(a), t.map(b)) << a << " " << b;
  }
}

TEST(Table, ValidationAndFileRoundTrip) {
  LandmarkTable bad{{10.0, 90.0}, {5.0, 1.0}, {1.0, 2.0}};
  EXPECT_THROW(bad.validate(), ArgumentError);
  LandmarkTable uneven{{10.0, 90.0}, {1.0}, {1.0, 2.0}};
  EXPECT_THROW(uneven.validate(), ArgumentError);

  const auto path = std::filesystem::temp_directory_path() / "iqt_normalizer_table.json";
  LandmarkTable t{{1.0, 50.0, 99.0}, {0.1, 0.2, 0.3}, {1.0, 2.0, 3.0}};
  save_landmark_table(t, path);
  const LandmarkTable back = load_landmark_table(path);
  EXPECT_EQ(back.percentiles, t.percentiles);
  EXPECT_EQ(back.source, t.source);
  EXPECT_EQ(back.target, t.target);
  std::filesystem::remove(path);
  EXPECT_THROW(load_landmark_table(path), IoError);
}

TEST(SliceCorrection, SharedHistogramIsFixedPoint) {
  const Dims d{12, 12, 5};
  Volume3D v(d, Geometry{});
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(1.0, 100.0);
  std::vector<double> base(144);
  for (double& x : base) x = u(rng);
  for (int z = 0; z < d.nz; ++z) {
    std::vector<double> perm = base;
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int x = 0; x < d.nx; ++x)
      for (int y = 0; y < d.ny; ++y) v(x, y, z) = perm[x * d.ny + y];
  }
  const Volume3D out = slice_intensity_correct(v, 2);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(out.data()[i], v.data()[i], 1e-6);
}

TEST(SliceCorrection, RecoversScaledSlice) {
  Volume3D v = uniform_volume({16, 16, 6}, 20.0, 120.0, 11);
  double ref_mean = 0.0;
  for (int x = 0; x < 16; ++x)
    for (int y = 0; y < 16; ++y) {
      v(x, y, 4) *= 0.5;
      ref_mean += v(x, y, 0);
    }
  ref_mean /= 256.0;
  const Volume3D out = slice_intensity_correct(v, 0);
  double mean4 = 0.0;
  for (int x = 0; x < 16; ++x)
    for (int y = 0; y < 16; ++y) {
      mean4 += out(x, y, 4);
      EXPECT_EQ(out(x, y, 0), v(x, y, 0));
    }
  mean4 /= 256.0;
  EXPECT_NEAR(mean4, ref_mean, 0.02 * ref_mean);
}

TEST(SliceCorrection, ZerosPreservedAndRangeChecked) {
  Volume3D v = uniform_volume({16, 16, 3}, 1.0, 2.0, 12);
  v(3, 3, 1) = 0.0;
  EXPECT_EQ(slice_intensity_correct(v, 0)(3, 3, 1), 0.0);
  EXPECT_THROW(slice_intensity_correct(v, 3), ArgumentError);
}

}  // namespace
}  // namespace iqt
