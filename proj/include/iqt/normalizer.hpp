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

#ifndef IQT_NORMALIZER_HPP_
#define IQT_NORMALIZER_HPP_

#include <filesystem>
#include <span>
#include <vector>

#include "iqt/volume.hpp"
#include "json.hpp"

namespace iqt {

// Piecewise-linear intensity map through (source[i] -> target[i]) at the
// given histogram percentiles.
struct LandmarkTable {
  std::vector<double> percentiles;
  std::vector<double> source;
  std::vector<double> target;

  void validate() const;
  // Maps one foreground intensity. Ends extrapolate linearly; a zero-width
  // source segment sends its single point to the target midpoint.
  double map(double v) const;
};

void to_json(nlohmann::json& j, const LandmarkTable& t);
void from_json(const nlohmann::json& j, LandmarkTable& t);
LandmarkTable load_landmark_table(const std::filesystem::path& path);
void save_landmark_table(const LandmarkTable& t, const std::filesystem::path& path);

// {1, 10, 20, ..., 90, 99}
std::vector<double> default_percentiles();

inline constexpr std::size_t kMinForegroundVoxels = 100;

// Percentiles of the foreground (non-zero) intensities, linear interpolation
// between order statistics at position p/100 * (n - 1).
std::vector<double> compute_landmarks(const Volume3D& vol, std::span<const double> percentiles);

// Landmarks averaged over volumes. The returned table is a standard scale:
// source == target, so applying it directly is the identity; use normalize()
// to pair it with a volume's own landmarks.
LandmarkTable fit_normalizer(std::span<const Volume3D> volumes,
                             std::span<const double> percentiles);
LandmarkTable fit_normalizer(std::span<const Volume3D> volumes);

// Maps foreground voxels through the table; exact zeros stay zero.
Volume3D apply_normalization(const Volume3D& vol, const LandmarkTable& table);

// Table from this volume's landmarks to the standard scale's targets.
LandmarkTable table_for(const Volume3D& vol, const LandmarkTable& standard);

// apply_normalization(vol, table_for(vol, standard)).
Volume3D normalize(const Volume3D& vol, const LandmarkTable& standard);

// Matches every slice's foreground histogram to that of `reference_slice` by
// monotone CDF matching. The reference slice is copied unchanged.
Volume3D slice_intensity_correct(const Volume3D& vol, int reference_slice);

}  // namespace iqt

#endif  // IQT_NORMALIZER_HPP_
