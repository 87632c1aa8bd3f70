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

#include "iqt/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "iqt/error.hpp"

namespace iqt {

void SnrDistribution::validate() const {
  if (!(mean[0] > 0.0) || !(mean[1] > 0.0)) {
    throw DistributionError("SNR distribution mean must be positive");
  }
  const auto& c = covariance;
  const double scale = std::max({std::abs(c[0][0]), std::abs(c[1][1]), 1.0});
  if (std::abs(c[0][1] - c[1][0]) > 1e-9 * scale) {
    throw DistributionError("SNR covariance is not symmetric");
  }
  const double det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
  if (c[0][0] < 0.0 || c[1][1] < 0.0 || det < -1e-12 * scale * scale) {
    throw DistributionError("SNR covariance is not positive semi-definite");
  }
}

SnrDistribution SnrDistribution::t1w() {
  return {{64.50, 54.14}, {{{78.47, 71.50}, {71.50, 73.91}}}};
}

SnrDistribution SnrDistribution::t2w() {
  return {{35.20, 48.46}, {{{84.15, 104.89}, {104.89, 138.70}}}};
}

SnrDistribution SnrDistribution::flair() {
  return {{35.99, 40.92}, {{{100.99, 74.34}, {74.34, 129.56}}}};
}

SnrDistribution SnrDistribution::named(const std::string& name) {
  if (name == "t1w") return t1w();
  if (name == "t2w") return t2w();
  if (name == "flair") return flair();
  throw ArgumentError("unknown contrast '" + name + "' (expected t1w, t2w or flair)");
}

SnrDistribution SnrDistribution::degenerate() const {
  SnrDistribution d = *this;
  d.covariance = {{{0.0, 0.0}, {0.0, 0.0}}};
  return d;
}

void to_json(nlohmann::json& j, const SnrDistribution& p) {
  j = nlohmann::json{{"mean", p.mean}, {"covariance", p.covariance}};
}

void from_json(const nlohmann::json& j, SnrDistribution& p) {
  p.mean = j.at("mean").get<std::array<double, 2>>();
  p.covariance = j.at("covariance").get<std::array<std::array<double, 2>, 2>>();
}

void to_json(nlohmann::json& j, const ContrastSample& s) {
  j = nlohmann::json{{"snr_wm", s.snr_wm},   {"snr_gm", s.snr_gm},
                     {"sigma_x", s.sigma_x}, {"sigma_y", s.sigma_y},
                     {"wm_mean_fixed", s.wm_mean_fixed}};
}

void from_json(const nlohmann::json& j, ContrastSample& s) {
  s.snr_wm = j.at("snr_wm").get<double>();
  s.snr_gm = j.at("snr_gm").get<double>();
  s.sigma_x = j.at("sigma_x").get<double>();
  s.sigma_y = j.at("sigma_y").get<double>();
  s.wm_mean_fixed = j.value("wm_mean_fixed", false);
}

int downsampled_slices(int nz, int r) { return (nz - 1) / r + 1; }

Volume3D blur_downsample_z(const Volume3D& vol, int r, const DownsampleOptions& opts) {
  const Dims in = vol.dims();
  if (r < 1) throw ArgumentError("blur_downsample_z: r must be >= 1");
  if (r > in.nz) {
    throw ArgumentError("blur_downsample_z: r = " + std::to_string(r) +
                        " exceeds slice count " + std::to_string(in.nz));
  }
  const Geometry& g = vol.geometry();
  const double pitch = g.slice_pitch();
  const double sigma = r * g.slice_thickness / std::sqrt(8.0 * std::log(2.0));
  const int half = static_cast<int>(std::floor(4.0 * sigma / pitch));
  std::vector<double> taps(2 * half + 1);
  for (int k = -half; k <= half; ++k) {
    const double z = k * pitch;
    taps[k + half] = std::exp(-z * z / (2.0 * sigma * sigma));
  }

  // With output pitch D_r = r * pitch the nearest input slice to k * D_r is k * r.
  const int nz_out = downsampled_slices(in.nz, r);
  Geometry out_geom = g;
  const double out_pitch = r * pitch;
  if (opts.thickness_fraction) {
    const double f = *opts.thickness_fraction;
    if (!(f > 0.0 && f <= 1.0)) {
      throw ArgumentError("thickness_fraction must be in (0, 1]");
    }
    out_geom.slice_thickness = f * out_pitch;
    out_geom.slice_gap = out_pitch - out_geom.slice_thickness;
  } else {
    out_geom.slice_thickness = r * g.slice_thickness;
    out_geom.slice_gap = r * g.slice_gap;
  }

  Volume3D out(Dims{in.nx, in.ny, nz_out}, out_geom, 0.0);
  const auto src = vol.data();
  auto dst = out.data();
  for (int x = 0; x < in.nx; ++x) {
    for (int y = 0; y < in.ny; ++y) {
      const double* col = src.data() + vol.index(x, y, 0);
      double* ocol = dst.data() + out.index(x, y, 0);
      for (int k = 0; k < nz_out; ++k) {
        const int c = k * r;
        const int lo = std::max(-half, -c);
        const int hi = std::min(half, in.nz - 1 - c);
        double acc = 0.0;
        double wsum = 0.0;
        for (int t = lo; t <= hi; ++t) {
          acc += taps[t + half] * col[c + t];
          wsum += taps[t + half];
        }
        ocol[k] = acc / wsum;
      }
    }
  }
  return out;
}

double tissue_mean(const Volume3D& vol, const Volume3D& mask) {
  if (!(vol.dims() == mask.dims())) {
    throw ArgumentError("tissue_mean: mask dims " + to_string(mask.dims()) +
                        " do not match volume dims " + to_string(vol.dims()));
  }
  const auto v = vol.data();
  const auto m = mask.data();
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    num += m[i] * v[i];
    den += m[i];
  }
  if (!(den > 0.0)) throw DegenerateError("tissue_mean: mask has zero total weight");
  return num / den;
}

double estimate_background_sigma(const Volume3D& vol, const VoxelMask& background) {
  if (background.size() != vol.size()) {
    throw ArgumentError("estimate_background_sigma: mask size mismatch");
  }
  const auto v = vol.data();
  std::size_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!background[i]) continue;
    ++n;
    const double delta = v[i] - mean;
    mean += delta / static_cast<double>(n);
    m2 += delta * (v[i] - mean);
  }
  if (n < kMinBackgroundVoxels) {
    throw EstimationError("estimate_background_sigma: only " + std::to_string(n) +
                          " background voxels (need " +
                          std::to_string(kMinBackgroundVoxels) + ")");
  }
  return std::sqrt(m2 / static_cast<double>(n - 1));
}

double estimate_background_sigma(const Volume3D& vol) {
  return estimate_background_sigma(vol, zero_background(vol));
}

ContrastSample sample_contrast(const SnrDistribution& p, const SigmaPolicy& policy,
                               double mu_y_wm, std::uint64_t seed) {
  p.validate();
  const auto& c = p.covariance;
  const double l00 = std::sqrt(c[0][0]);
  const double l10 = l00 > 0.0 ? c[1][0] / l00 : 0.0;
  const double l11 = std::sqrt(std::max(0.0, c[1][1] - l10 * l10));

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const double z0 = n01(rng);
  const double z1 = n01(rng);

  ContrastSample s;
  s.snr_wm = std::max(kSnrFloor, p.mean[0] + l00 * z0);
  s.snr_gm = std::max(kSnrFloor, p.mean[1] + l10 * z0 + l11 * z1);
  switch (policy.kind) {
    case SigmaPolicy::Kind::kFixWhiteMatterMean:
      if (!(mu_y_wm > 0.0)) {
        throw ArgumentError("sample_contrast: WM mean must be positive to fix sigma_x");
      }
      s.sigma_x = mu_y_wm / s.snr_wm;
      s.sigma_y = policy.sigma_y;
      s.wm_mean_fixed = true;
      break;
    case SigmaPolicy::Kind::kExplicit:
      s.sigma_x = policy.sigma_x;
      s.sigma_y = policy.sigma_y;
      break;
  }
  if (!(s.sigma_y >= 0.0) || !(s.sigma_x >= s.sigma_y)) {
    std::ostringstream os;
    os << "noise levels must satisfy sigma_x >= sigma_y >= 0 (got " << s.sigma_x << ", "
       << s.sigma_y << ")";
    throw ArgumentError(os.str());
  }
  return s;
}

Multipliers compute_multipliers(const ContrastSample& sample, double mu_y_wm,
                                double mu_y_gm) {
  if (!(mu_y_wm > 0.0) || !(mu_y_gm > 0.0)) {
    throw ArgumentError("compute_multipliers: high-field tissue means must be positive");
  }
  Multipliers m;
  m.l_wm = sample.wm_mean_fixed ? 1.0 : sample.snr_wm * sample.sigma_x / mu_y_wm;
  m.l_gm = sample.snr_gm * sample.sigma_x / mu_y_gm;
  return m;
}

namespace {

double mask_weight(const Volume3D& mask) {
  double s = 0.0;
  for (double v : mask.data()) s += v;
  return s;
}

}  // namespace

SimulationResult simulate(const Volume3D& vol, const TissueMasks& masks, int r,
                          const SnrDistribution& p, const SigmaPolicy& policy,
                          std::uint64_t seed, const DownsampleOptions& opts) {
  if (!(masks.dims() == vol.dims())) {
    throw ArgumentError("simulate: masks " + to_string(masks.dims()) +
                        " do not match image " + to_string(vol.dims()));
  }
  masks.validate();

  SimulationResult res;
  Volume3D y = blur_downsample_z(vol, r, opts);
  Volume3D wm = blur_downsample_z(masks.wm, r, opts);
  Volume3D gm = blur_downsample_z(masks.gm, r, opts);
  Volume3D oth = blur_downsample_z(masks.oth, r, opts);
  {
    auto w = wm.data();
    auto g = gm.data();
    auto o = oth.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double s = w[i] + g[i] + o[i];
      if (s > 0.0) {
        w[i] /= s;
        g[i] /= s;
        o[i] /= s;
      } else {
        w[i] = 0.0;
        g[i] = 0.0;
        o[i] = 1.0;
      }
    }
  }

  const bool has_wm = mask_weight(wm) > 0.0;
  const bool has_gm = mask_weight(gm) > 0.0;
  res.mu_y_wm = has_wm ? tissue_mean(y, wm) : 0.0;
  res.mu_y_gm = has_gm ? tissue_mean(y, gm) : 0.0;

  res.sample = sample_contrast(p, policy, res.mu_y_wm, seed);
  const double mu_x_wm = res.sample.snr_wm * res.sample.sigma_x;
  const double mu_x_gm = res.sample.snr_gm * res.sample.sigma_x;
  if (has_wm) {
    res.multipliers.l_wm = res.sample.wm_mean_fixed ? 1.0 : mu_x_wm / res.mu_y_wm;
  }
  if (has_gm) res.multipliers.l_gm = mu_x_gm / res.mu_y_gm;

  res.background.assign(y.size(), 0);
  Volume3D x = y;
  {
    auto xd = x.data();
    const auto yd = y.data();
    const auto w = wm.data();
    const auto g = gm.data();
    const auto o = oth.data();
    const double lw = res.multipliers.l_wm;
    const double lg = res.multipliers.l_gm;
    for (std::size_t i = 0; i < xd.size(); ++i) {
      xd[i] = yd[i] * (lw * w[i] + lg * g[i] + Multipliers::l_oth * o[i]);
      res.background[i] = (yd[i] == 0.0 && w[i] == 0.0 && g[i] == 0.0) ? 1 : 0;
    }
  }

  const double var = res.sample.sigma_x * res.sample.sigma_x -
                     res.sample.sigma_y * res.sample.sigma_y;
  if (var > 0.0) {
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
    std::normal_distribution<double> noise(0.0, std::sqrt(var));
    for (double& v : x.data()) v += noise(rng);
  }
  x.check_finite("simulate");

  res.image = std::move(x);
  res.masks = TissueMasks{std::move(wm), std::move(gm), std::move(oth)};
  return res;
}

}  // namespace iqt
