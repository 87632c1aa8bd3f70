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

#include "iqt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "iqt/error.hpp"

namespace iqt {
namespace {

double smoothstep(double lo, double hi, double x) {
  if (x <= lo) return 0.0;
  if (x >= hi) return 1.0;
  const double t = (x - lo) / (hi - lo);
  return t * t * (3.0 - 2.0 * t);
}

using Vec3 = std::array<double, 3>;

Vec3 random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Vec3 d{n01(rng), n01(rng), n01(rng)};
  const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  for (double& c : d) c /= len;
  return d;
}

// Sum of plane waves over the unit sphere; smooth everywhere, bounded by 1.
struct SphereField {
  std::vector<Vec3> dirs;
  std::vector<double> freq;
  std::vector<double> phase;

  SphereField(std::mt19937_64& rng, int terms, double fmin, double fmax) {
    std::uniform_real_distribution<double> uf(fmin, fmax);
    std::uniform_real_distribution<double> up(0.0, 2.0 * std::numbers::pi);
    for (int k = 0; k < terms; ++k) {
      dirs.push_back(random_direction(rng));
      freq.push_back(uf(rng));
      phase.push_back(up(rng));
    }
  }

  double operator()(const Vec3& u) const {
    double s = 0.0;
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      const double dot = u[0] * dirs[k][0] + u[1] * dirs[k][1] + u[2] * dirs[k][2];
      s += std::sin(freq[k] * dot + phase[k]);
    }
    return s / static_cast<double>(dirs.size());
  }
};

}  // namespace

void PhantomConfig::validate() const {
  if (dims.nx < 16 || dims.ny < 16 || dims.nz < 16) {
    throw ArgumentError("phantom dims must be at least 16 per axis, got " +
                        to_string(dims));
  }
  if (!(mean_wm > 0.0) || !(mean_gm > 0.0) || !(mean_oth > 0.0)) {
    throw ArgumentError("phantom tissue means must be positive");
  }
  if (!(deformation >= 0.0 && deformation < 0.5)) {
    throw ArgumentError("phantom deformation must be in [0, 0.5)");
  }
  if (!(modulation >= 0.0 && modulation < 0.5)) {
    throw ArgumentError("phantom modulation must be in [0, 0.5)");
  }
  geometry.validate();
}

Phantom generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);

  const Dims d = cfg.dims;
  const Vec3 center{0.5 * (d.nx - 1) + 0.03 * d.nx * jitter(rng),
                    0.5 * (d.ny - 1) + 0.03 * d.ny * jitter(rng),
                    0.5 * (d.nz - 1) + 0.02 * d.nz * jitter(rng)};
  const Vec3 semi{0.38 * d.nx * (1.0 + 0.04 * jitter(rng)),
                  0.40 * d.ny * (1.0 + 0.04 * jitter(rng)),
                  0.33 * d.nz * (1.0 + 0.04 * jitter(rng))};

  const SphereField outline(rng, 5, 1.5, 3.5);
  const SphereField folds(rng, 9, 7.0, 12.0);
  const double wm_radius = 0.70 + 0.04 * jitter(rng);
  const double fold_depth = 0.08;
  const double sulcal_radius = 0.94;

  // Two ventricles, mirrored in x around the centre.
  const double vent_offset = 0.18 * semi[0] * (1.0 + 0.1 * jitter(rng));
  const Vec3 vent_semi{0.10 * semi[0], 0.30 * semi[1], 0.22 * semi[2]};

  const SphereField mod_field(rng, 4, 1.0, 2.5);
  const double mean_semi = (semi[0] + semi[1] + semi[2]) / 3.0;
  const double edge = 1.0 / mean_semi;  // one voxel in normalised radius

  Volume3D image(d, cfg.geometry, 0.0);
  Volume3D wm(d, cfg.geometry, 0.0);
  Volume3D gm(d, cfg.geometry, 0.0);
  Volume3D oth(d, cfg.geometry, 1.0);

  for (int x = 0; x < d.nx; ++x) {
    for (int y = 0; y < d.ny; ++y) {
      for (int z = 0; z < d.nz; ++z) {
        const Vec3 p{(x - center[0]) / semi[0], (y - center[1]) / semi[1],
                     (z - center[2]) / semi[2]};
        const double len = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        const Vec3 u = len > 1e-12 ? Vec3{p[0] / len, p[1] / len, p[2] / len}
                                   : Vec3{1.0, 0.0, 0.0};
        const double rho = len / (1.0 + cfg.deformation * outline(u));
        const double brain = 1.0 - smoothstep(1.0 - 2.0 * edge, 1.0, rho);
        if (brain <= 0.0) continue;

        const double wm_edge = wm_radius + fold_depth * folds(u);
        const double inner = 1.0 - smoothstep(wm_edge - edge, wm_edge + edge, rho);
        const double sulcal = smoothstep(sulcal_radius - edge, sulcal_radius + edge, rho);

        double vent = 0.0;
        for (double side : {-1.0, 1.0}) {
          const double vx = (x - center[0] - side * vent_offset) / vent_semi[0];
          const double vy = (y - center[1]) / vent_semi[1];
          const double vz = (z - center[2]) / vent_semi[2];
          const double vr = std::sqrt(vx * vx + vy * vy + vz * vz);
          vent = std::max(vent, 1.0 - smoothstep(1.0 - 0.3, 1.0 + 0.3, vr));
        }

        double w = brain * inner * (1.0 - vent);
        double g = brain * (1.0 - inner) * (1.0 - sulcal);
        double c = brain - w - g;
        double les = 0.0;
        for (const Lesion& l : cfg.lesions) {
          const double dx = x - l.center[0];
          const double dy = y - l.center[1];
          const double dz = z - l.center[2];
          const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
          const double q = 1.0 - smoothstep(l.radius - 1.0, l.radius + 1.0, dist);
          if (q <= 0.0) continue;
          w *= 1.0 - q;
          g *= 1.0 - q;
          c *= 1.0 - q;
          les = les * (1.0 - q) + brain * q;
        }
        double lesion_signal = 0.0;
        if (les > 0.0) {
          // Intensity of the strongest overlapping lesion.
          double best = 0.0;
          double best_q = 0.0;
          for (const Lesion& l : cfg.lesions) {
            const double dx = x - l.center[0];
            const double dy = y - l.center[1];
            const double dz = z - l.center[2];
            const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
            const double q = 1.0 - smoothstep(l.radius - 1.0, l.radius + 1.0, dist);
            if (q > best_q) {
              best_q = q;
              best = l.intensity;
            }
          }
          lesion_signal = best * les;
        }

        const Vec3 pos{(x - center[0]) / d.nx, (y - center[1]) / d.ny,
                       (z - center[2]) / d.nz};
        const double mod = 1.0 + cfg.modulation * mod_field(pos);
        const double signal =
            cfg.mean_wm * w + cfg.mean_gm * g + cfg.mean_oth * std::max(c, 0.0) + lesion_signal;

        image(x, y, z) = signal * mod;
        wm(x, y, z) = w;
        gm(x, y, z) = g;
        oth(x, y, z) = 1.0 - w - g;
      }
    }
  }

  Phantom out{std::move(image), TissueMasks{std::move(wm), std::move(gm), std::move(oth)}};
  out.masks.validate();
  return out;
}

void to_json(nlohmann::json& j, const PhantomConfig& cfg) {
  j = nlohmann::json{
      {"dims", {cfg.dims.nx, cfg.dims.ny, cfg.dims.nz}},
      {"voxel_mm", {cfg.geometry.voxel_x, cfg.geometry.voxel_y}},
      {"slice_thickness_mm", cfg.geometry.slice_thickness},
      {"slice_gap_mm", cfg.geometry.slice_gap},
      {"seed", cfg.seed},
      {"mean_wm", cfg.mean_wm},
      {"mean_gm", cfg.mean_gm},
      {"mean_oth", cfg.mean_oth},
      {"deformation", cfg.deformation},
      {"modulation", cfg.modulation},
  };
  auto lesions = nlohmann::json::array();
  for (const Lesion& l : cfg.lesions) {
    lesions.push_back({{"center", l.center}, {"radius", l.radius}, {"intensity", l.intensity}});
  }
  j["lesions"] = lesions;
}

void from_json(const nlohmann::json& j, PhantomConfig& cfg) {
  if (j.contains("dims")) {
    const auto v = j.at("dims").get<std::vector<int>>();
    if (v.size() != 3) throw ArgumentError("phantom dims must have 3 entries");
    cfg.dims = {v[0], v[1], v[2]};
  }
  if (j.contains("voxel_mm")) {
    const auto v = j.at("voxel_mm").get<std::vector<double>>();
    if (v.size() != 2) throw ArgumentError("voxel_mm must have 2 entries");
    cfg.geometry.voxel_x = v[0];
    cfg.geometry.voxel_y = v[1];
  }
  cfg.geometry.slice_thickness = j.value("slice_thickness_mm", cfg.geometry.slice_thickness);
  cfg.geometry.slice_gap = j.value("slice_gap_mm", cfg.geometry.slice_gap);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.mean_wm = j.value("mean_wm", cfg.mean_wm);
  cfg.mean_gm = j.value("mean_gm", cfg.mean_gm);
  cfg.mean_oth = j.value("mean_oth", cfg.mean_oth);
  cfg.deformation = j.value("deformation", cfg.deformation);
  cfg.modulation = j.value("modulation", cfg.modulation);
  cfg.lesions.clear();
  if (j.contains("lesions")) {
    for (const auto& l : j.at("lesions")) {
      Lesion les;
      les.center = l.at("center").get<std::array<double, 3>>();
      les.radius = l.value("radius", les.radius);
      les.intensity = l.value("intensity", les.intensity);
      cfg.lesions.push_back(les);
    }
  }
}

}  // namespace iqt
