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

#ifndef IQT_METRICS_HPP_
#define IQT_METRICS_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "iqt/volume.hpp"

namespace iqt {

// 10 log10(peak^2 / MSE), peak = max(reference). Identical inputs give +inf.
double psnr(const Volume3D& estimate, const Volume3D& reference);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean SSIM over every window centre whose full 3-D Gaussian window fits in
// the volume. Dynamic range L = max(reference) - min(reference).
double ssim(const Volume3D& estimate, const Volume3D& reference, const SsimOptions& opts = {});

// Normalised 1-D Gaussian taps; the 3-D window is their outer product.
std::vector<double> gaussian_window(int size, double sigma);

struct LabelVolume {
  Dims dims;
  Geometry geometry;
  std::vector<std::int32_t> labels;
  std::map<std::int32_t, std::string> legend;

  // Rounds a volume's values to integer labels; negative values are rejected.
  static LabelVolume from_volume(const Volume3D& vol);
  double structure_volume_mm3(std::int32_t id) const;
};

// 2 |V - V*| / (V + V*) with volumes in mm^3. Throws DegenerateError when
// the structure is absent from both.
double rve(const LabelVolume& estimate, const LabelVolume& gold, std::int32_t structure);
double rve_from_volumes(double v, double v_gold);

}  // namespace iqt

#endif  // IQT_METRICS_HPP_
