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

#include <filesystem>
#include <fstream>
#include <iterator>
#include <vector>

#include "iqt/checkpoint.hpp"
#include "iqt/error.hpp"

namespace iqt {
namespace {

namespace fs = std::filesystem;

ModelSpec small_spec() {
  ModelSpec s;
  s.r = 2;
  s.levels = 2;
  s.base_filters = 2;
  s.lf_patch = {8, 8, 4};
  s.lf_step = {4, 4, 2};
  s.masksembles = {2, 2.0};
  s.intensity_scale = 37.5;
  return s;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    path_ = fs::temp_directory_path() / "iqt_checkpoint_test.ckpt";
    ckpt_.spec = small_spec();
    ckpt_.weights = initialize_weights(ckpt_.spec, 3);
    ckpt_.weights.buffers[0].data[0] = 0.25f;
    ckpt_.norm = LandmarkTable{{10.0, 90.0}, {1.0, 2.0}, {1.0, 2.0}};
    ckpt_.metadata = {{"epochs", 4}, {"note", "unit"}};
    save_checkpoint(ckpt_, path_);
  }
  void TearDown() override { fs::remove(path_); }

  fs::path path_;
  Checkpoint ckpt_;
};

TEST_F(CheckpointTest, RoundTrip) {
  const Checkpoint back = load_checkpoint(path_);
  EXPECT_EQ(back.spec.r, 2);
  EXPECT_EQ(back.spec.levels, 2);
  EXPECT_EQ(back.spec.lf_patch, (Extent3{8, 8, 4}));
  EXPECT_EQ(back.spec.masksembles.masks, 2);
  EXPECT_EQ(back.spec.intensity_scale, 37.5);
  ASSERT_TRUE(back.norm.has_value());
  EXPECT_EQ(back.norm->target, ckpt_.norm->target);
  EXPECT_EQ(back.metadata, ckpt_.metadata);
  auto same = [](const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].name, b[i].name);
      EXPECT_EQ(a[i].shape, b[i].shape);
      EXPECT_EQ(a[i].data, b[i].data);
    }
  };
  same(back.weights.params, ckpt_.weights.params);
  same(back.weights.buffers, ckpt_.weights.buffers);
  same(back.weights.masks, ckpt_.weights.masks);
  EXPECT_EQ(mask_digest(back.weights), mask_digest(ckpt_.weights));
}

TEST_F(CheckpointTest, BadMagic) {
  auto bytes = slurp(path_);
  bytes[0] = 'X';
  spit(path_, bytes);
  EXPECT_THROW(load_checkpoint(path_), FormatError);
}

TEST_F(CheckpointTest, FutureVersion) {
  auto bytes = slurp(path_);
  bytes[8] = 9;
  spit(path_, bytes);
  EXPECT_THROW(load_checkpoint(path_), UnsupportedFormatError);
}

TEST_F(CheckpointTest, Truncated) {
  auto bytes = slurp(path_);
  bytes.resize(bytes.size() - 10);
  spit(path_, bytes);
  EXPECT_THROW(load_checkpoint(path_), IoError);
}

TEST_F(CheckpointTest, MissingFile) {
  fs::remove(path_);
  EXPECT_THROW(load_checkpoint(path_), IoError);
}

TEST_F(CheckpointTest, MaskDigestTracksMasks) {
  ModelWeights w = ckpt_.weights;
  const std::string before = mask_digest(w);
  EXPECT_EQ(before.size(), 64u);
  w.masks[0].data[0] = 1.0f - w.masks[0].data[0];
  EXPECT_NE(mask_digest(w), before);
}

}  // namespace
}  // namespace iqt
