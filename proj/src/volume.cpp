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

#include "iqt/volume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "iqt/error.hpp"

namespace iqt {

std::string to_string(const Dims& d) {
  std::ostringstream os;
  os << d.nx << "x" << d.ny << "x" << d.nz;
  return os.str();
}

void Geometry::validate() const {
  if (!(voxel_x > 0.0) || !(voxel_y > 0.0) || !(slice_thickness > 0.0) ||
      !(slice_gap >= 0.0) || !std::isfinite(slice_gap)) {
    std::ostringstream os;
    os << "invalid geometry: voxel " << voxel_x << "x" << voxel_y
       << " thickness " << slice_thickness << " gap " << slice_gap;
    throw ArgumentError(os.str());
  }
}

Volume3D::Volume3D(Dims dims, Geometry geometry, double fill)
    : dims_(dims), geometry_(geometry) {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) {
    throw ArgumentError("volume dims must be positive, got " + to_string(dims));
  }
  geometry_.validate();
  data_.assign(dims.count(), fill);
}

Volume3D::Volume3D(Dims dims, Geometry geometry, std::vector<double> data)
    : dims_(dims), geometry_(geometry), data_(std::move(data)) {
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) {
    throw ArgumentError("volume dims must be positive, got " + to_string(dims));
  }
  geometry_.validate();
  if (data_.size() != dims.count()) {
    std::ostringstream os;
    os << "volume data length " << data_.size() << " does not match dims "
       << to_string(dims);
    throw ArgumentError(os.str());
  }
}

void Volume3D::set_geometry(const Geometry& g) {
  g.validate();
  geometry_ = g;
}

void Volume3D::check_finite(const char* stage) const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(stage) + ": non-finite voxel value");
    }
  }
}

void TissueMasks::validate(double tolerance) const {
  if (!(wm.dims() == gm.dims()) || !(wm.dims() == oth.dims())) {
    throw ArgumentError("tissue masks have mismatched dims");
  }
  const auto w = wm.data();
  const auto g = gm.data();
  const auto o = oth.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (double v : {w[i], g[i], o[i]}) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ArgumentError("tissue probability outside [0,1]");
      }
    }
    const double s = w[i] + g[i] + o[i];
    if (std::abs(s - 1.0) > tolerance) {
      throw ArgumentError("tissue probabilities do not sum to one");
    }
  }
}

VoxelMask zero_background(const Volume3D& vol) {
  VoxelMask mask(vol.size());
  const auto d = vol.data();
  for (std::size_t i = 0; i < d.size(); ++i) mask[i] = d[i] == 0.0 ? 1 : 0;
  return mask;
}

VoxelMask background_region(const Volume3D& vol, const TissueMasks& masks) {
  if (!(vol.dims() == masks.dims())) {
    throw ArgumentError("background_region: masks do not match volume dims");
  }
  VoxelMask mask(vol.size());
  const auto d = vol.data();
  const auto w = masks.wm.data();
  const auto g = masks.gm.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    mask[i] = (d[i] == 0.0 && w[i] == 0.0 && g[i] == 0.0) ? 1 : 0;
  }
  return mask;
}

std::size_t count_selected(const VoxelMask& mask) {
  return static_cast<std::size_t>(
      std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

Volume3D apply_background(const Volume3D& vol, const VoxelMask& background) {
  if (background.size() != vol.size()) {
    throw ArgumentError("apply_background: mask size mismatch");
  }
  Volume3D out = vol;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (background[i]) d[i] = 0.0;
  }
  return out;
}

}  // namespace iqt
