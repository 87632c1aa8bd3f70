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

#ifndef IQT_PHANTOM_HPP_
#define IQT_PHANTOM_HPP_

#include <array>
#include <cstdint>
#include <vector>

#include "iqt/volume.hpp"
#include "json.hpp"

namespace iqt {

struct Lesion {
  std::array<double, 3> center{};  // voxel coordinates
  double radius = 3.0;             // voxels
  double intensity = 150.0;
};

struct PhantomConfig {
  Dims dims{64, 64, 64};
  Geometry geometry{};
  std::uint64_t seed = 0;
  double mean_wm = 100.0;
  double mean_gm = 70.0;
  double mean_oth = 30.0;
  // Relative amplitude of the smooth radial deformation of the brain outline.
  double deformation = 0.08;
  // Relative amplitude of the smooth multiplicative intensity modulation.
  double modulation = 0.03;
  std::vector<Lesion> lesions;

  void validate() const;
};

struct Phantom {
  Volume3D image;
  TissueMasks masks;
};

// Deformed concentric ellipsoidal shells: WM core with folded boundary, GM
// shell, CSF ventricles and sulcal layer, zero outside the brain.
Phantom generate_phantom(const PhantomConfig& cfg);

void to_json(nlohmann::json& j, const PhantomConfig& cfg);
void from_json(const nlohmann::json& j, PhantomConfig& cfg);

}  // namespace iqt

#endif  // IQT_PHANTOM_HPP_
