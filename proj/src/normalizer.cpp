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

#include "iqt/normalizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "iqt/error.hpp"

namespace iqt {
namespace {

void check_percentiles(std::span<const double> p) {
  if (p.size() < 2) throw ArgumentError("need at least two percentiles");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 100.0)) {
      throw ArgumentError("percentiles must lie in (0, 100)");
    }
    if (i > 0 && !(p[i] > p[i - 1])) {
      throw ArgumentError("percentiles must be strictly ascending");
    }
  }
}

// Linear interpolation on a sorted sample at fractional position q * (n - 1).
double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> foreground_values(const Volume3D& vol) {
  std::vector<double> v;
  v.reserve(vol.size());
  for (double x : vol.data()) {
    if (x != 0.0) v.push_back(x);
  }
  return v;
}

}  // namespace

void LandmarkTable::validate() const {
  check_percentiles(percentiles);
  if (source.size() != percentiles.size() || target.size() != percentiles.size()) {
    throw ArgumentError("landmark table lists have different lengths");
  }
  for (std::size_t i = 1; i < source.size(); ++i) {
    if (source[i] < source[i - 1] || target[i] < target[i - 1]) {
      throw ArgumentError("landmark lists must be non-decreasing");
    }
  }
}

double LandmarkTable::map(double v) const {
  const std::size_t n = source.size();
  auto segment = [&](std::size_t i, double x) {
    return target[i] + (x - source[i]) * (target[i + 1] - target[i]) /
                           (source[i + 1] - source[i]);
  };
  if (v < source.front() || v > source.back()) {
    // Extrapolate along the nearest segment of positive width.
    if (v < source.front()) {
      for (std::size_t i = 0; i + 1 < n; ++i) {
        if (source[i + 1] > source[i]) return segment(i, v);
      }
    } else {
      for (std::size_t i = n - 1; i > 0; --i) {
        if (source[i] > source[i - 1]) return segment(i - 1, v);
      }
    }
    return 0.5 * (target.front() + target.back());
  }
  const auto it = std::upper_bound(source.begin(), source.end(), v);
  const auto i = static_cast<std::size_t>(it - source.begin()) - 1;
  if (v == source[i]) {
    const auto first = static_cast<std::size_t>(
        std::lower_bound(source.begin(), source.end(), v) - source.begin());
    if (first != i) return 0.5 * (target[first] + target[i]);
    return target[i];
  }
  return segment(i, v);
}

void to_json(nlohmann::json& j, const LandmarkTable& t) {
  j = nlohmann::json{{"percentiles", t.percentiles}, {"source", t.source}, {"target", t.target}};
}

void from_json(const nlohmann::json& j, LandmarkTable& t) {
  t.percentiles = j.at("percentiles").get<std::vector<double>>();
  t.target = j.at("target").get<std::vector<double>>();
  t.source = j.contains("source") ? j.at("source").get<std::vector<double>>() : t.target;
  t.validate();
}

LandmarkTable load_landmark_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    return j.get<LandmarkTable>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_landmark_table(const LandmarkTable& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json(t).dump(2) << "\n";
}

std::vector<double> default_percentiles() {
  std::vector<double> p{1.0};
  for (int i = 10; i <= 90; i += 10) p.push_back(i);
  p.push_back(99.0);
  return p;
}

std::vector<double> compute_landmarks(const Volume3D& vol, std::span<const double> percentiles) {
  check_percentiles(percentiles);
  std::vector<double> fg = foreground_values(vol);
  if (fg.size() < kMinForegroundVoxels) {
    throw EstimationError("compute_landmarks: only " + std::to_string(fg.size()) +
                          " foreground voxels");
  }
  std::sort(fg.begin(), fg.end());
  std::vector<double> out;
  out.reserve(percentiles.size());
  for (double p : percentiles) out.push_back(quantile_sorted(fg, p / 100.0));
  return out;
}

LandmarkTable fit_normalizer(std::span<const Volume3D> volumes,
                             std::span<const double> percentiles) {
  if (volumes.empty()) throw ArgumentError("fit_normalizer: no volumes");
  LandmarkTable t;
  t.percentiles.assign(percentiles.begin(), percentiles.end());
  t.target.assign(percentiles.size(), 0.0);
  for (const Volume3D& v : volumes) {
    const auto lm = compute_landmarks(v, percentiles);
    for (std::size_t i = 0; i < lm.size(); ++i) t.target[i] += lm[i];
  }
  for (double& x : t.target) x /= static_cast<double>(volumes.size());
  t.source = t.target;
  t.validate();
  return t;
}

LandmarkTable fit_normalizer(std::span<const Volume3D> volumes) {
  const auto p = default_percentiles();
  return fit_normalizer(volumes, p);
}

Volume3D apply_normalization(const Volume3D& vol, const LandmarkTable& table) {
  table.validate();
  Volume3D out = vol;
  for (double& v : out.data()) {
    if (v != 0.0) v = table.map(v);
  }
  out.check_finite("apply_normalization");
  return out;
}

LandmarkTable table_for(const Volume3D& vol, const LandmarkTable& standard) {
  standard.validate();
  LandmarkTable t = standard;
  t.source = compute_landmarks(vol, standard.percentiles);
  return t;
}

Volume3D normalize(const Volume3D& vol, const LandmarkTable& standard) {
  return apply_normalization(vol, table_for(vol, standard));
}

Volume3D slice_intensity_correct(const Volume3D& vol, int reference_slice) {
  const Dims d = vol.dims();
  if (reference_slice < 0 || reference_slice >= d.nz) {
    throw ArgumentError("reference slice index out of range");
  }
  auto slice_values = [&](int z) {
    std::vector<double> v;
    for (int x = 0; x < d.nx; ++x)
      for (int y = 0; y < d.ny; ++y)
        if (vol(x, y, z) != 0.0) v.push_back(vol(x, y, z));
    return v;
  };
  std::vector<double> ref = slice_values(reference_slice);
  if (ref.size() < kMinForegroundVoxels) {
    throw ArgumentError("reference slice has fewer than " +
                        std::to_string(kMinForegroundVoxels) + " foreground voxels");
  }
  std::sort(ref.begin(), ref.end());

  Volume3D out = vol;
  for (int z = 0; z < d.nz; ++z) {
    if (z == reference_slice) continue;
    std::vector<std::pair<double, std::size_t>> fg;
    for (int x = 0; x < d.nx; ++x)
      for (int y = 0; y < d.ny; ++y)
        if (vol(x, y, z) != 0.0) fg.emplace_back(vol(x, y, z), vol.index(x, y, z));
    if (fg.empty()) continue;
    std::sort(fg.begin(), fg.end());
    const std::size_t n = fg.size();
    auto dst = out.data();
    // Tied values share their mean rank so the map stays a function of intensity.
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && fg[j + 1].first == fg[i].first) ++j;
      const double rank = 0.5 * static_cast<double>(i + j);
      const double q = n > 1 ? rank / static_cast<double>(n - 1) : 0.5;
      const double mapped = quantile_sorted(ref, q);
      for (std::size_t k = i; k <= j; ++k) dst[fg[k].second] = mapped;
      i = j + 1;
    }
  }
  return out;
}

}  // namespace iqt
