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

#ifndef IQT_PATCHING_HPP_
#define IQT_PATCHING_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "iqt/volume.hpp"

namespace iqt {

struct Extent3 {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) *
           static_cast<std::size_t>(z);
  }
  bool operator==(const Extent3&) const = default;
};

// Sliding-window layout in one resolution domain.
struct GridLayout {
  Dims dims;      // unpadded volume
  Dims padded;    // zero-padded so every axis holds a whole number of steps
  Extent3 patch;
  Extent3 step;
  Extent3 counts;

  std::size_t size() const { return counts.count(); }
  // Patch origin in padded coordinates.
  std::array<int, 3> origin(std::size_t index) const;
  // Index of the patch that owns a voxel: the one whose centre is nearest
  // along each axis, ties going to the higher index.
  std::size_t owner(int x, int y, int z) const;
};

// Low-field grid plus its high-field image (z scaled by r).
struct PatchGrid {
  int r = 1;
  GridLayout lf;

  // Pads each axis to the smallest n >= max(n, patch) with (n - patch) % step == 0.
  static PatchGrid make(const Dims& lf_dims, int r, const Extent3& lf_patch,
                        const Extent3& lf_step);

  GridLayout hf() const;
  std::size_t size() const { return lf.size(); }
};

// Patch values in z-fastest order, one vector per grid position.
template <typename T>
std::vector<std::vector<T>> extract_patches(const Volume3D& vol, const GridLayout& layout);

// Reassembles a volume of layout.dims: every voxel is copied from its owning
// patch, then padding is dropped.
template <typename T>
Volume3D blend_clip(const std::vector<std::vector<T>>& patches, const GridLayout& layout,
                    const Geometry& geometry);

struct PatchPair {
  std::vector<float> lf;
  std::vector<float> hf;
  std::int32_t subject = 0;
  std::int32_t index = 0;  // grid position
};

struct PatchSet {
  int r = 1;
  Extent3 lf_patch;
  std::vector<PatchPair> pairs;

  Extent3 hf_patch() const { return {lf_patch.x, lf_patch.y, r * lf_patch.z}; }
  // Appends another set with the same r and patch size.
  void append(PatchSet&& other);
};

inline constexpr double kDefaultBackgroundThreshold = 0.8;

// Pairs at every grid position whose LF background fraction does not exceed
// bg_threshold. Background is `lf_background` when given, exact zeros
// otherwise; padding always counts as background.
PatchSet extract_pairs(const Volume3D& lf, const Volume3D& hf, int r, const Extent3& lf_patch,
                       const Extent3& lf_step, double bg_threshold = kDefaultBackgroundThreshold,
                       const VoxelMask* lf_background = nullptr, int subject = 0);

// Flat binary cache: "IQTP", version, count, patch dims, r, then per pair
// subject, index and the float32 LF and HF values.
void save_patch_cache(const PatchSet& set, const std::filesystem::path& path);
PatchSet load_patch_cache(const std::filesystem::path& path);

// Interpolating cubic B-spline along z, evaluated at t = j / r for
// j in [0, r * nz). End coefficients follow the natural condition and are
// continued linearly past the ends.
Volume3D cubic_upsample_z(const Volume3D& vol, int r);

// Nearest-neighbour z replication, used as a plumbing reference.
Volume3D replicate_z(const Volume3D& vol, int r);

}  // namespace iqt

#endif  // IQT_PATCHING_HPP_
