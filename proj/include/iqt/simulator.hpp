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

#ifndef IQT_SIMULATOR_HPP_
#define IQT_SIMULATOR_HPP_

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "iqt/volume.hpp"
#include "json.hpp"

namespace iqt {

// Bivariate Gaussian over (SNR_WM, SNR_GM) of the low-field image.
struct SnrDistribution {
  std::array<double, 2> mean{};
  std::array<std::array<double, 2>, 2> covariance{};

  // Throws DistributionError on a non-symmetric or indefinite covariance.
  void validate() const;

  static SnrDistribution t1w();
  static SnrDistribution t2w();
  static SnrDistribution flair();
  // "t1w", "t2w", "flair"; anything else is an ArgumentError.
  static SnrDistribution named(const std::string& name);
  // Same mean with zero covariance.
  SnrDistribution degenerate() const;
};

void to_json(nlohmann::json& j, const SnrDistribution& p);
void from_json(const nlohmann::json& j, SnrDistribution& p);

// How the noise levels are chosen for one simulation.
struct SigmaPolicy {
  enum class Kind {
    // sigma_x = mu_Y^WM / SNR_WM so the WM mean is unchanged; sigma_y as given
    // (0 by default, i.e. the high-field noise is neglected).
    kFixWhiteMatterMean,
    // sigma_x and sigma_y taken verbatim.
    kExplicit,
  };
  Kind kind = Kind::kFixWhiteMatterMean;
  double sigma_x = 0.0;
  double sigma_y = 0.0;

  static SigmaPolicy fix_white_matter_mean(double sigma_y = 0.0) {
    return {Kind::kFixWhiteMatterMean, 0.0, sigma_y};
  }
  static SigmaPolicy explicit_levels(double sigma_x, double sigma_y) {
    return {Kind::kExplicit, sigma_x, sigma_y};
  }
};

struct ContrastSample {
  double snr_wm = 0.0;
  double snr_gm = 0.0;
  double sigma_x = 0.0;
  double sigma_y = 0.0;
  // Set when sigma_x was derived from the WM mean; makes l_wm exactly 1.
  bool wm_mean_fixed = false;
};

void to_json(nlohmann::json& j, const ContrastSample& s);
void from_json(const nlohmann::json& j, ContrastSample& s);

struct Multipliers {
  double l_wm = 1.0;
  double l_gm = 1.0;
  static constexpr double l_oth = 1.0;
};

inline constexpr double kSnrFloor = 1.0;

// Output slice geometry reporting. The blur always uses FWHM = r * thickness;
// `thickness_fraction`, when set, reports the output pitch split into
// thickness and gap with that fraction (0.75 gives a 3:1 split).
struct DownsampleOptions {
  std::optional<double> thickness_fraction;
};

// Gaussian slice-profile blur along z followed by nearest-slice sampling at
// pitch r * (thickness + gap). Kernel taps are truncated at +-4 sigma and
// renormalised over the in-range taps, so constants are preserved.
Volume3D blur_downsample_z(const Volume3D& vol, int r, const DownsampleOptions& opts = {});

// Number of output slices produced by blur_downsample_z.
int downsampled_slices(int nz, int r);

// sum(mask * vol) / sum(mask).
double tissue_mean(const Volume3D& vol, const Volume3D& mask);

// Sample standard deviation over the exact-zero background. Returns 0 for a
// noiseless background.
double estimate_background_sigma(const Volume3D& vol);
// Same over an explicit background region (for noisy volumes).
double estimate_background_sigma(const Volume3D& vol, const VoxelMask& background);

inline constexpr std::size_t kMinBackgroundVoxels = 1000;

// Draws (SNR_WM, SNR_GM) from P by Cholesky factorisation, clamps both to
// kSnrFloor and resolves the noise levels. `mu_y_wm` is only used by the
// kFixWhiteMatterMean policy.
ContrastSample sample_contrast(const SnrDistribution& p, const SigmaPolicy& policy,
                               double mu_y_wm, std::uint64_t seed);

Multipliers compute_multipliers(const ContrastSample& sample, double mu_y_wm, double mu_y_gm);

struct SimulationResult {
  Volume3D image;            // synthetic low-field volume
  TissueMasks masks;         // downsampled, renormalised masks
  ContrastSample sample;
  Multipliers multipliers;
  double mu_y_wm = 0.0;
  double mu_y_gm = 0.0;
  VoxelMask background;      // pure-oth voxels that were exactly zero before noise
};

// Full forward model: blur/downsample image and masks, measure the tissue
// means, draw a contrast, rescale WM and GM, add Gaussian noise with variance
// sigma_x^2 - sigma_y^2. A tissue whose downsampled mask is empty keeps a
// multiplier of 1.
SimulationResult simulate(const Volume3D& vol, const TissueMasks& masks, int r,
                          const SnrDistribution& p, const SigmaPolicy& policy,
                          std::uint64_t seed, const DownsampleOptions& opts = {});

}  // namespace iqt

#endif  // IQT_SIMULATOR_HPP_
