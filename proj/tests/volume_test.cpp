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

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "iqt/error.hpp"
#include "iqt/nifti.hpp"
#include "iqt/phantom.hpp"
#include "iqt/simulator.hpp"
#include "iqt/volume.hpp"

namespace iqt {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("iqt-volume-" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "-" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

// Hand-built NIfTI-1 header; data is appended in file order (x fastest).
std::vector<std::uint8_t> raw_header(std::int16_t nx, std::int16_t ny, std::int16_t nz,
                                     std::int16_t datatype, float slope, float inter) {
  std::vector<std::uint8_t> h(352, 0);
  auto put = [&](std::size_t off, auto v) { std::memcpy(h.data() + off, &v, sizeof(v)); };
  put(0, std::int32_t{348});
  const std::int16_t dim[8] = {3, nx, ny, nz, 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(40 + 2 * i, dim[i]);
  put(70, datatype);
  put(72, static_cast<std::int16_t>(datatype == nifti::kInt16 ? 16 : 32));
  const float pix[8] = {1, 1, 1, 1, 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(76 + 4 * i, pix[i]);
  put(108, 352.0f);
  put(112, slope);
  put(116, inter);
  std::memcpy(h.data() + 344, "n+1\0", 4);
  return h;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TEST(Nifti, RoundTripConstant) {
  TempDir dir;
  const Volume3D v({8, 8, 8}, Geometry{}, 3.5);
  write_nifti(v, dir / "c.nii");
  const NiftiImage img = read_nifti(dir / "c.nii");
  EXPECT_EQ(img.volume.dims(), v.dims());
  for (double x : img.volume.data()) EXPECT_EQ(x, 3.5);
}

TEST(Nifti, ZeroVolumeFileSize) {
  TempDir dir;
  write_nifti(Volume3D({4, 4, 4}, Geometry{}), dir / "z.nii");
  EXPECT_EQ(fs::file_size(dir / "z.nii"), 352u + 4u * 64u);
}

TEST(Nifti, RoundTripIsBitExactForFloatValues) {
  TempDir dir;
  Geometry g{0.7, 0.8, 1.3, 0.0};
  Volume3D v({5, 6, 7}, g);
  std::mt19937 rng(3);
  std::normal_distribution<float> n(0.0f, 50.0f);
  for (double& x : v.data()) x = n(rng);
  write_nifti(v, dir / "r.nii");
  const NiftiImage img = read_nifti(dir / "r.nii");
  ASSERT_EQ(img.volume.dims(), v.dims());
  EXPECT_EQ(std::memcmp(img.volume.data().data(), v.data().data(), v.size() * sizeof(double)), 0);
  EXPECT_EQ(img.volume.geometry().voxel_x, static_cast<double>(0.7f));
  EXPECT_EQ(img.volume.geometry().voxel_y, static_cast<double>(0.8f));
  EXPECT_EQ(img.volume.geometry().slice_thickness, static_cast<double>(1.3f));
  // Axis order survives: the voxel at (1, 2, 3) stays there.
  EXPECT_EQ(img.volume(1, 2, 3), v(1, 2, 3));
}

TEST(Nifti, IsotropicHcpVoxelSize) {
  TempDir dir;
  write_nifti(Volume3D({4, 4, 4}, Geometry{0.7, 0.7, 0.7, 0.0}), dir / "h.nii");
  const Geometry g = read_nifti(dir / "h.nii").volume.geometry();
  EXPECT_FLOAT_EQ(static_cast<float>(g.voxel_x), 0.7f);
  EXPECT_FLOAT_EQ(static_cast<float>(g.voxel_y), 0.7f);
  EXPECT_FLOAT_EQ(static_cast<float>(g.slice_thickness), 0.7f);
  EXPECT_EQ(g.slice_gap, 0.0);
}

TEST(Nifti, BadMagicIsFormatError) {
  TempDir dir;
  auto bytes = raw_header(2, 2, 2, nifti::kFloat32, 0.0f, 0.0f);
  std::memcpy(bytes.data() + 344, "nii\0", 4);
  bytes.resize(352 + 8 * 4, 0);
  write_bytes(dir / "m.nii", bytes);
  EXPECT_THROW(read_nifti(dir / "m.nii"), FormatError);
}

TEST(Nifti, UnsupportedDatatype) {
  TempDir dir;
  auto bytes = raw_header(2, 2, 2, 64, 0.0f, 0.0f);
  bytes.resize(352 + 8 * 8, 0);
  write_bytes(dir / "d.nii", bytes);
  EXPECT_THROW(read_nifti(dir / "d.nii"), UnsupportedFormatError);
}

TEST(Nifti, TruncatedDataIsIoError) {
  TempDir dir;
  auto bytes = raw_header(4, 4, 4, nifti::kFloat32, 0.0f, 0.0f);
  bytes.resize(352 + 10, 0);
  write_bytes(dir / "t.nii", bytes);
  EXPECT_THROW(read_nifti(dir / "t.nii"), IoError);
}

TEST(Nifti, Int16WithScaling) {
  TempDir dir;
  auto bytes = raw_header(3, 2, 2, nifti::kInt16, 0.5f, 10.0f);
  // File order is x fastest.
  for (std::int16_t i = 0; i < 12; ++i) {
    const std::int16_t v = static_cast<std::int16_t>(i * 4 - 8);
    bytes.push_back(static_cast<std::uint8_t>(v & 0xff));
    bytes.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  }
  write_bytes(dir / "i.nii", bytes);
  const Volume3D v = read_nifti(dir / "i.nii").volume;
  ASSERT_EQ(v.dims(), (Dims{3, 2, 2}));
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 3; ++x) {
        const int i = x + 3 * (y + 2 * z);
        EXPECT_EQ(v(x, y, z), 0.5 * (i * 4 - 8) + 10.0);
      }
}

TEST(Nifti, SidecarCarriesSliceGap) {
  TempDir dir;
  const Volume3D v({4, 4, 4}, Geometry{1.0, 1.0, 2.1, 0.7}, 1.0);
  save_volume(v, dir / "g.nii");
  EXPECT_TRUE(fs::exists(sidecar_path(dir / "g.nii")));
  const Volume3D back = load_volume(dir / "g.nii");
  EXPECT_DOUBLE_EQ(back.geometry().slice_thickness, 2.1);
  EXPECT_DOUBLE_EQ(back.geometry().slice_gap, 0.7);
}

TEST(Volume, RejectsWrongDataLength) {
  EXPECT_THROW(Volume3D({2, 2, 2}, Geometry{}, std::vector<double>(7)), Error);
}

TEST(Volume, CheckFiniteFlagsNan) {
  Volume3D v({2, 2, 2}, Geometry{});
  v(1, 1, 1) = std::nan("");
  EXPECT_THROW(v.check_finite("test"), NumericError);
}

TEST(Volume, GeometryValidation) {
  EXPECT_THROW((Geometry{0.0, 1.0, 1.0, 0.0}.validate()), ArgumentError);
  EXPECT_THROW((Geometry{1.0, 1.0, 1.0, -0.1}.validate()), ArgumentError);
  EXPECT_NO_THROW((Geometry{1.0, 1.0, 1.0, 0.0}.validate()));
}

TEST(Volume, BackgroundRegionNeedsZeroAndPureOther) {
  const Dims d{2, 1, 2};
  Volume3D img(d, Geometry{}, std::vector<double>{0.0, 5.0, 0.0, 0.0});
  Volume3D wm(d, Geometry{}, std::vector<double>{0.0, 1.0, 0.5, 0.0});
  Volume3D gm(d, Geometry{});
  Volume3D oth(d, Geometry{}, std::vector<double>{1.0, 0.0, 0.5, 1.0});
  const VoxelMask bg = background_region(img, TissueMasks{wm, gm, oth});
  EXPECT_EQ(bg, (VoxelMask{1, 0, 0, 1}));
}

TEST(Phantom, Deterministic) {
  PhantomConfig cfg;
  cfg.dims = {24, 24, 24};
  cfg.seed = 12;
  const Phantom a = generate_phantom(cfg);
  const Phantom b = generate_phantom(cfg);
  EXPECT_EQ(std::memcmp(a.image.data().data(), b.image.data().data(), a.image.size() * 8), 0);
  EXPECT_EQ(std::memcmp(a.masks.gm.data().data(), b.masks.gm.data().data(), a.image.size() * 8), 0);
}

TEST(Phantom, MasksAreNormalised) {
  PhantomConfig cfg;
  cfg.dims = {32, 28, 20};
  cfg.seed = 4;
  const Phantom p = generate_phantom(cfg);
  for (std::size_t i = 0; i < p.image.size(); ++i) {
    const double s = p.masks.wm.data()[i] + p.masks.gm.data()[i] + p.masks.oth.data()[i];
    ASSERT_NEAR(s, 1.0, 1e-4);
  }
}

TEST(Phantom, WhiteMatterMeanNearConfigured) {
  PhantomConfig cfg;
  cfg.dims = {48, 48, 48};
  cfg.mean_wm = 100.0;
  cfg.mean_gm = 80.0;
  const Phantom p = generate_phantom(cfg);
  EXPECT_NEAR(tissue_mean(p.image, p.masks.wm), 100.0, 2.0);
}

TEST(Phantom, ZeroOutsideBrain) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  const Phantom p = generate_phantom(cfg);
  EXPECT_EQ(p.image(0, 0, 0), 0.0);
  EXPECT_EQ(p.masks.oth(0, 0, 0), 1.0);
  EXPECT_GT(p.image(16, 16, 16), 0.0);
}

TEST(Phantom, TooSmallIsArgumentError) {
  PhantomConfig cfg;
  cfg.dims = {8, 32, 32};
  EXPECT_THROW(generate_phantom(cfg), ArgumentError);
}

TEST(Phantom, LesionRaisesLocalIntensity) {
  PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  const double before = generate_phantom(cfg).image(16, 16, 16);
  cfg.lesions.push_back({{16.0, 16.0, 16.0}, 3.0, 250.0});
  const double after = generate_phantom(cfg).image(16, 16, 16);
  EXPECT_GT(after, before);
}

}  // namespace
}  // namespace iqt
