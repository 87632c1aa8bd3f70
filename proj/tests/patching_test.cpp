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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "iqt/error.hpp"
#include "iqt/patching.hpp"

namespace iqt {
namespace {

Volume3D random_volume(Dims d, std::uint64_t seed, double zero_fraction = 0.0) {
  Volume3D v(d, Geometry{});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& x : v.data()) x = u(rng) < zero_fraction ? 0.0 : 1.0 + 99.0 * u(rng);
  return v;
}

// Natural cubic spline through f at integer knots, from the second-derivative
// system solved by dense elimination; straight line past the last knot.
std::vector<double> natural_spline(const std::vector<double>& f, int r) {
  const int n = static_cast<int>(f.size());
  std::vector<std::vector<double>> a(n, std::vector<double>(n + 1, 0.0));
  a[0][0] = 1.0;
  a[n - 1][n - 1] = 1.0;
  for (int i = 1; i + 1 < n; ++i) {
    a[i][i - 1] = 1.0;
    a[i][i] = 4.0;
    a[i][i + 1] = 1.0;
    a[i][n] = 6.0 * (f[i + 1] - 2.0 * f[i] + f[i - 1]);
  }
  for (int c = 0; c < n; ++c) {
    int piv = c;
    for (int k = c + 1; k < n; ++k)
      if (std::abs(a[k][c]) > std::abs(a[piv][c])) piv = k;
    std::swap(a[c], a[piv]);
    for (int k = 0; k < n; ++k) {
      if (k == c || a[k][c] == 0.0) continue;
      const double m = a[k][c] / a[c][c];
      for (int j = c; j <= n; ++j) a[k][j] -= m * a[c][j];
    }
  }
  std::vector<double> M(n);
  for (int i = 0; i < n; ++i) M[i] = a[i][n] / a[i][i];

  std::vector<double> out(static_cast<std::size_t>(r * n));
  const double end_slope = (f[n - 1] - f[n - 2]) + (2.0 * M[n - 1] + M[n - 2]) / 6.0;
  for (int j = 0; j < r * n; ++j) {
    const double t = static_cast<double>(j) / r;
    if (t >= n - 1) {
      out[j] = f[n - 1] + (t - (n - 1)) * end_slope;
      continue;
    }
    const int i = static_cast<int>(std::floor(t));
    const double u = t - i;
    const double w = 1.0 - u;
    out[j] = M[i] * w * w * w / 6.0 + M[i + 1] * u * u * u / 6.0 + (f[i] - M[i] / 6.0) * w +
             (f[i + 1] - M[i + 1] / 6.0) * u;
  }
  return out;
}

TEST(Grid, StandardCount) {
  const PatchGrid g = PatchGrid::make({64, 64, 16}, 4, {32, 32, 8}, {16, 16, 4});
  EXPECT_EQ(g.lf.counts, (Extent3{3, 3, 3}));
  EXPECT_EQ(g.size(), 27u);
  const GridLayout hf = g.hf();
  EXPECT_EQ(hf.patch, (Extent3{32, 32, 32}));
  EXPECT_EQ(hf.step, (Extent3{16, 16, 16}));
  EXPECT_EQ(hf.dims, (Dims{64, 64, 64}));
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto lo = g.lf.origin(i);
    const auto ho = hf.origin(i);
    EXPECT_EQ(ho[0], lo[0]);
    EXPECT_EQ(ho[1], lo[1]);
    EXPECT_EQ(ho[2], 4 * lo[2]);
  }
}

TEST(Grid, ClosedFormWithPadding) {
  // n -> smallest m >= max(n, p) with (m - p) % s == 0; count (m - p) / s + 1.
  auto count = [](int n, int p, int s) {
    int m = std::max(n, p);
    while ((m - p) % s != 0) ++m;
    return (m - p) / s + 1;
  };
  std::mt19937 rng(4);
  std::uniform_int_distribution<int> dim(5, 70);
  for (int trial = 0; trial < 30; ++trial) {
    const Dims d{dim(rng), dim(rng), dim(rng) / 4 + 1};
    const PatchGrid g = PatchGrid::make(d, 2, {16, 12, 4}, {8, 5, 3});
    EXPECT_EQ(g.lf.counts.x, count(d.nx, 16, 8));
    EXPECT_EQ(g.lf.counts.y, count(d.ny, 12, 5));
    EXPECT_EQ(g.lf.counts.z, count(d.nz, 4, 3));
  }
}

TEST(Grid, RejectsBadSteps) {
  EXPECT_THROW(PatchGrid::make({32, 32, 8}, 4, {16, 16, 4}, {0, 16, 4}), ArgumentError);
  EXPECT_THROW(PatchGrid::make({32, 32, 8}, 4, {16, 16, 4}, {32, 16, 4}), ArgumentError);
  EXPECT_THROW(PatchGrid::make({32, 32, 8}, 0, {16, 16, 4}, {8, 8, 2}), ArgumentError);
}

TEST(Blend, ExtractBlendIsIdentity) {
  for (int r : {2, 4, 8}) {
    const Dims lfd{37, 29, 11};
    const Volume3D lf = random_volume(lfd, 10 + r);
    const Volume3D hf = random_volume({lfd.nx, lfd.ny, lfd.nz * r}, 20 + r);
    const PatchGrid g = PatchGrid::make(lfd, r, {16, 16, 16 / r}, {8, 8, 8 / r});
    const Volume3D lf_back =
        blend_clip(extract_patches<double>(lf, g.lf), g.lf, lf.geometry());
    const Volume3D hf_back =
        blend_clip(extract_patches<double>(hf, g.hf()), g.hf(), hf.geometry());
    for (std::size_t i = 0; i < lf.size(); ++i) ASSERT_EQ(lf_back.data()[i], lf.data()[i]);
    for (std::size_t i = 0; i < hf.size(); ++i) ASSERT_EQ(hf_back.data()[i], hf.data()[i]);
  }
}

TEST(Blend, SinglePatchIsCropped) {
  const Dims d{5, 6, 3};
  const PatchGrid g = PatchGrid::make(d, 1, {8, 8, 4}, {8, 8, 4});
  ASSERT_EQ(g.size(), 1u);
  std::vector<double> patch(8 * 8 * 4);
  for (std::size_t i = 0; i < patch.size(); ++i) patch[i] = static_cast<double>(i);
  const Volume3D out = blend_clip(std::vector<std::vector<double>>{patch}, g.lf, Geometry{});
  EXPECT_EQ(out.dims(), d);
  for (int x = 0; x < d.nx; ++x)
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz; ++z) EXPECT_EQ(out(x, y, z), (x * 8 + y) * 4 + z);
}

TEST(Blend, StepAtOverlapMidline) {
  const PatchGrid g = PatchGrid::make({48, 4, 4}, 1, {32, 4, 4}, {16, 4, 4});
  ASSERT_EQ(g.size(), 2u);
  const std::size_t n = g.lf.patch.count();
  const Volume3D out = blend_clip(
      std::vector<std::vector<double>>{std::vector<double>(n, 0.0), std::vector<double>(n, 1.0)},
      g.lf, Geometry{});
  // Centres at 15.5 and 31.5, midline between voxels 23 and 24.
  for (int x = 0; x < 48; ++x) EXPECT_EQ(out(x, 2, 2), x < 24 ? 0.0 : 1.0) << x;
}

TEST(Blend, OddOverlapTieGoesToLaterPatch) {
  // Centres at 1.5 and 4.5: voxel 3 is equidistant.
  const PatchGrid g = PatchGrid::make({7, 1, 1}, 1, {4, 1, 1}, {3, 1, 1});
  ASSERT_EQ(g.lf.counts.x, 2);
  EXPECT_EQ(g.lf.owner(2, 0, 0), 0u);
  EXPECT_EQ(g.lf.owner(3, 0, 0), 1u);
}

TEST(Blend, OwnershipPartitionsVolume) {
  const Dims d{40, 33, 9};
  const PatchGrid g = PatchGrid::make(d, 1, {16, 16, 4}, {8, 6, 2});
  std::vector<std::vector<double>> patches(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    patches[i].assign(g.lf.patch.count(), static_cast<double>(i));
  }
  const Volume3D out = blend_clip(patches, g.lf, Geometry{});
  for (int x = 0; x < d.nx; ++x)
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz; ++z) {
        const auto k = static_cast<std::size_t>(out(x, y, z));
        ASSERT_EQ(k, g.lf.owner(x, y, z));
        const auto o = g.lf.origin(k);
        ASSERT_GE(x, o[0]);
        ASSERT_LT(x, o[0] + 16);
        ASSERT_GE(y, o[1]);
        ASSERT_LT(y, o[1] + 16);
        ASSERT_GE(z, o[2]);
        ASSERT_LT(z, o[2] + 4);
      }
}

TEST(Blend, MissingPatchesRejected) {
  const PatchGrid g = PatchGrid::make({48, 4, 4}, 1, {32, 4, 4}, {16, 4, 4});
  std::vector<std::vector<double>> one{std::vector<double>(g.lf.patch.count(), 0.0)};
  EXPECT_THROW(blend_clip(one, g.lf, Geometry{}), ArgumentError);
}

TEST(Pairs, StandardGridCount) {
  const Volume3D lf = random_volume({64, 64, 16}, 1);
  const Volume3D hf = random_volume({64, 64, 64}, 2);
  const PatchSet set = extract_pairs(lf, hf, 4, {32, 32, 8}, {16, 16, 4});
  EXPECT_EQ(set.pairs.size(), 27u);
  EXPECT_EQ(set.hf_patch(), (Extent3{32, 32, 32}));
  for (const PatchPair& p : set.pairs) {
    EXPECT_EQ(p.lf.size(), 32u * 32u * 8u);
    EXPECT_EQ(p.hf.size(), 32u * 32u * 32u);
  }
}

TEST(Pairs, BackgroundFilter) {
  const Volume3D zero_lf({64, 64, 16}, Geometry{});
  const Volume3D hf = random_volume({64, 64, 64}, 3);
  EXPECT_TRUE(extract_pairs(zero_lf, hf, 4, {32, 32, 8}, {16, 16, 4}).pairs.empty());
  EXPECT_EQ(extract_pairs(zero_lf, hf, 4, {32, 32, 8}, {16, 16, 4}, 1.0).pairs.size(), 27u);

  // Only the low-x half has signal: patches starting at x = 32 are empty.
  Volume3D half({64, 64, 16}, Geometry{});
  for (int x = 0; x < 32; ++x)
    for (int y = 0; y < 64; ++y)
      for (int z = 0; z < 16; ++z) half(x, y, z) = 1.0;
  EXPECT_EQ(extract_pairs(half, hf, 4, {32, 32, 8}, {16, 16, 4}).pairs.size(), 18u);
}

TEST(Pairs, PatchContentsMatchVolume) {
  const Volume3D lf = random_volume({40, 40, 10}, 4);
  const Volume3D hf = random_volume({40, 40, 20}, 5);
  const PatchSet set = extract_pairs(lf, hf, 2, {16, 16, 4}, {8, 8, 2}, 1.0);
  const PatchGrid g = PatchGrid::make(lf.dims(), 2, {16, 16, 4}, {8, 8, 2});
  ASSERT_EQ(set.pairs.size(), g.size());
  const PatchPair& p = set.pairs[5];
  const auto o = g.lf.origin(static_cast<std::size_t>(p.index));
  EXPECT_EQ(p.lf[(1 * 16 + 2) * 4 + 3], static_cast<float>(lf(o[0] + 1, o[1] + 2, o[2] + 3)));
  EXPECT_EQ(p.hf[(1 * 16 + 2) * 8 + 5],
            static_cast<float>(hf(o[0] + 1, o[1] + 2, 2 * o[2] + 5)));
}

TEST(Pairs, IncompatibleDims) {
  const Volume3D lf = random_volume({32, 32, 8}, 6);
  const Volume3D hf = random_volume({32, 32, 30}, 7);
  EXPECT_THROW(extract_pairs(lf, hf, 4, {16, 16, 4}, {8, 8, 2}), ArgumentError);
}

TEST(PatchCache, RoundTrip) {
  const Volume3D lf = random_volume({32, 32, 8}, 8, 0.3);
  const Volume3D hf = random_volume({32, 32, 32}, 9);
  PatchSet set = extract_pairs(lf, hf, 4, {16, 16, 4}, {8, 8, 2}, 1.0, nullptr, 3);
  const auto path = std::filesystem::temp_directory_path() / "iqt_patch_cache_test.bin";
  save_patch_cache(set, path);
  const PatchSet back = load_patch_cache(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.r, 4);
  EXPECT_EQ(back.lf_patch, set.lf_patch);
  ASSERT_EQ(back.pairs.size(), set.pairs.size());
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    EXPECT_EQ(back.pairs[i].subject, 3);
    EXPECT_EQ(back.pairs[i].index, set.pairs[i].index);
    EXPECT_EQ(back.pairs[i].lf, set.pairs[i].lf);
    EXPECT_EQ(back.pairs[i].hf, set.pairs[i].hf);
  }
}

TEST(PatchCache, BadMagic) {
  const auto path = std::filesystem::temp_directory_path() / "iqt_patch_cache_bad.bin";
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE and then some bytes";
  }
  EXPECT_THROW(load_patch_cache(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Cubic, ConstantAndRamp) {
  Volume3D c({2, 2, 6}, Geometry{}, 3.25);
  const Volume3D cu = cubic_upsample_z(c, 4);
  for (double x : cu.data()) EXPECT_NEAR(x, 3.25, 1e-12);

  Volume3D ramp({1, 1, 8}, Geometry{});
  for (int z = 0; z < 8; ++z) ramp(0, 0, z) = 2.0 + 0.5 * z;
  const Volume3D up = cubic_upsample_z(ramp, 4);
  ASSERT_EQ(up.dims(), (Dims{1, 1, 32}));
  for (int j = 0; j < 32; ++j) EXPECT_NEAR(up(0, 0, j), 2.0 + 0.5 * j / 4.0, 1e-9);
}

TEST(Cubic, MatchesNaturalSplineOracle) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (int r : {2, 3, 4}) {
    for (int n : {4, 8, 13}) {
      Volume3D v({2, 1, n}, Geometry{});
      for (double& x : v.data()) x = u(rng);
      const Volume3D up = cubic_upsample_z(v, r);
      ASSERT_EQ(up.dims().nz, r * n);
      for (int x = 0; x < 2; ++x) {
        std::vector<double> f(n);
        for (int z = 0; z < n; ++z) f[z] = v(x, 0, z);
        const auto want = natural_spline(f, r);
        for (int j = 0; j < r * n; ++j) EXPECT_NEAR(up(x, 0, j), want[j], 1e-9) << r << " " << n;
      }
    }
  }
}

TEST(Cubic, InterpolatesKnotsAndNeedsFourSlices) {
  const Volume3D v = random_volume({3, 3, 6}, 13);
  const Volume3D up = cubic_upsample_z(v, 2);
  for (int z = 0; z < 6; ++z) EXPECT_NEAR(up(1, 2, 2 * z), v(1, 2, z), 1e-9);
  EXPECT_EQ(up.geometry().slice_thickness, v.geometry().slice_thickness / 2.0);
  EXPECT_THROW(cubic_upsample_z(random_volume({2, 2, 3}, 14), 2), ArgumentError);
}

TEST(Replicate, CopiesSlices) {
  const Volume3D v = random_volume({2, 2, 3}, 15);
  const Volume3D up = replicate_z(v, 3);
  for (int j = 0; j < 9; ++j) EXPECT_EQ(up(1, 0, j), v(1, 0, j / 3));
}

}  // namespace
}  // namespace iqt
