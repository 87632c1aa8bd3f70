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

#ifndef IQT_VOLUME_HPP_
#define IQT_VOLUME_HPP_

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace iqt {

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& d);

// Acquisition geometry in millimetres. The slice pitch along z is
// slice_thickness + slice_gap.
struct Geometry {
  double voxel_x = 1.0;
  double voxel_y = 1.0;
  double slice_thickness = 1.0;
  double slice_gap = 0.0;

  double slice_pitch() const { return slice_thickness + slice_gap; }
  double voxel_volume() const { return voxel_x * voxel_y * slice_thickness; }
  void validate() const;
  bool operator==(const Geometry&) const = default;
};

// Scalar field on a regular grid. Storage is row-major over (x, y, z), so z
// is the fastest-varying index and every z-column is contiguous.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims dims, Geometry geometry, double fill = 0.0);
  Volume3D(Dims dims, Geometry geometry, std::vector<double> data);

  const Dims& dims() const { return dims_; }
  const Geometry& geometry() const { return geometry_; }
  void set_geometry(const Geometry& g);

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(x) * static_cast<std::size_t>(dims_.ny) +
            static_cast<std::size_t>(y)) *
               static_cast<std::size_t>(dims_.nz) +
           static_cast<std::size_t>(z);
  }
  double operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }
  double& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }

  // Throws NumericError when any value is NaN or infinite.
  void check_finite(const char* stage) const;

 private:
  Dims dims_{};
  Geometry geometry_{};
  std::vector<double> data_;
};

// Probabilistic tissue maps for white matter, grey matter and everything else.
struct TissueMasks {
  Volume3D wm;
  Volume3D gm;
  Volume3D oth;

  static constexpr double kSumTolerance = 1e-4;

  // Checks matching dims, value range [0,1] and the per-voxel unit sum.
  void validate(double tolerance = kSumTolerance) const;
  const Dims& dims() const { return wm.dims(); }
};

// One byte per voxel, nonzero means "selected".
using VoxelMask = std::vector<std::uint8_t>;

// Voxels whose intensity is exactly zero. This is the background definition
// for skull-stripped images.
VoxelMask zero_background(const Volume3D& vol);

// Voxels with exactly zero intensity that are pure `oth` tissue.
VoxelMask background_region(const Volume3D& vol, const TissueMasks& masks);

std::size_t count_selected(const VoxelMask& mask);

// Copy of `vol` with every selected voxel set to zero.
Volume3D apply_background(const Volume3D& vol, const VoxelMask& background);

}  // namespace iqt

#endif  // IQT_VOLUME_HPP_
