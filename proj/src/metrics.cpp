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

#include "iqt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "iqt/error.hpp"

namespace iqt {
namespace {

void check_same_dims(const Volume3D& a, const Volume3D& b, const char* what) {
  if (!(a.dims() == b.dims())) {
    throw ArgumentError(std::string(what) + ": dims " + to_string(a.dims()) + " and " +
                        to_string(b.dims()) + " differ");
  }
}

// Valid-mode separable filtering along one axis of an (nx, ny, nz) array.
std::vector<double> filter_axis(const std::vector<double>& in, int nx, int ny, int nz, int axis,
                                const std::vector<double>& w, int& onx, int& ony, int& onz) {
  const int k = static_cast<int>(w.size());
  onx = nx - (axis == 0 ? k - 1 : 0);
  ony = ny - (axis == 1 ? k - 1 : 0);
  onz = nz - (axis == 2 ? k - 1 : 0);
  std::vector<double> out(static_cast<std::size_t>(onx) * ony * onz, 0.0);
  const std::size_t sx = static_cast<std::size_t>(ny) * nz;
  const std::size_t sy = static_cast<std::size_t>(nz);
  const std::size_t stride = axis == 0 ? sx : (axis == 1 ? sy : 1);
  for (int x = 0; x < onx; ++x)
    for (int y = 0; y < ony; ++y)
      for (int z = 0; z < onz; ++z) {
        const double* src = &in[x * sx + y * sy + z];
        double s = 0.0;
        for (int t = 0; t < k; ++t) s += w[t] * src[t * stride];
        out[(static_cast<std::size_t>(x) * ony + y) * onz + z] = s;
      }
  return out;
}

std::vector<double> filter3(const std::vector<double>& in, const Dims& d,
                            const std::vector<double>& w) {
  int ax, ay, az, bx, by, bz, cx, cy, cz;
  auto a = filter_axis(in, d.nx, d.ny, d.nz, 0, w, ax, ay, az);
  auto b = filter_axis(a, ax, ay, az, 1, w, bx, by, bz);
  return filter_axis(b, bx, by, bz, 2, w, cx, cy, cz);
}

}  // namespace

double psnr(const Volume3D& estimate, const Volume3D& reference) {
  check_same_dims(estimate, reference, "psnr");
  const auto e = estimate.data();
  const auto r = reference.data();
  double sse = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double d = e[i] - r[i];
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = sse / static_cast<double>(e.size());
  const double peak = *std::max_element(r.begin(), r.end());
  return 10.0 * std::log10(peak * peak / mse);
}

std::vector<double> gaussian_window(int size, double sigma) {
  if (size < 1 || !(sigma > 0.0)) throw ArgumentError("bad Gaussian window");
  std::vector<double> w(size);
  const double c = 0.5 * (size - 1);
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - c;
    w[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += w[i];
  }
  for (double& v : w) v /= s;
  return w;
}

double ssim(const Volume3D& estimate, const Volume3D& reference, const SsimOptions& opts) {
  check_same_dims(estimate, reference, "ssim");
  const Dims d = reference.dims();
  if (d.nx < opts.window || d.ny < opts.window || d.nz < opts.window) {
    throw ArgumentError("ssim: volume " + to_string(d) + " smaller than the " +
                        std::to_string(opts.window) + "-voxel window");
  }
  const auto r = reference.data();
  const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) throw ArgumentError("ssim: reference has zero dynamic range");
  const double c1 = (opts.k1 * range) * (opts.k1 * range);
  const double c2 = (opts.k2 * range) * (opts.k2 * range);

  const auto w = gaussian_window(opts.window, opts.sigma);
  const auto e = estimate.data();
  std::vector<double> x(e.begin(), e.end());
  std::vector<double> y(r.begin(), r.end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter3(x, d, w);
  const auto my = filter3(y, d, w);
  const auto exx = filter3(xx, d, w);
  const auto eyy = filter3(yy, d, w);
  const auto exy = filter3(xy, d, w);
  double sum = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = exx[i] - mx[i] * mx[i];
    const double vy = eyy[i] - my[i] * my[i];
    const double cxy = exy[i] - mx[i] * my[i];
    const double num = (mx[i] * my[i] + mx[i] * my[i] + c1) * (cxy + cxy + c2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
    sum += num / den;
  }
  return sum / static_cast<double>(mx.size());
}

LabelVolume LabelVolume::from_volume(const Volume3D& vol) {
  LabelVolume lv;
  lv.dims = vol.dims();
  lv.geometry = vol.geometry();
  lv.labels.reserve(vol.size());
  for (double v : vol.data()) {
    const double rv = std::round(v);
    if (rv < 0.0) throw ArgumentError("label volumes must be non-negative");
    lv.labels.push_back(static_cast<std::int32_t>(rv));
  }
  return lv;
}

double LabelVolume::structure_volume_mm3(std::int32_t id) const {
  const auto n = std::count(labels.begin(), labels.end(), id);
  return static_cast<double>(n) * geometry.voxel_volume();
}

double rve_from_volumes(double v, double v_gold) {
  if (v < 0.0 || v_gold < 0.0) throw ArgumentError("volumes must be non-negative");
  if (v + v_gold == 0.0) throw DegenerateError("structure absent from both label volumes");
  return 2.0 * std::fabs(v - v_gold) / (v + v_gold);
}

double rve(const LabelVolume& estimate, const LabelVolume& gold, std::int32_t structure) {
  if (!(estimate.dims == gold.dims)) throw ArgumentError("rve: label volume dims differ");
  return rve_from_volumes(estimate.structure_volume_mm3(structure),
                          gold.structure_volume_mm3(structure));
}

}  // namespace iqt
