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

#include "iqt/patching.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "iqt/error.hpp"

namespace iqt {
namespace {

int padded_extent(int n, int p, int s) {
  int m = std::max(n, p);
  const int rem = (m - p) % s;
  if (rem != 0) m += s - rem;
  return m;
}

int floor_div(int a, int b) {
  const int q = a / b;
  return (a % b != 0 && ((a < 0) != (b < 0))) ? q - 1 : q;
}

int axis_owner(int c, int p, int s, int n) {
  const int i = floor_div(2 * c - p + 1 + s, 2 * s);
  return std::clamp(i, 0, n - 1);
}

void check_extent(const Extent3& e, const char* what) {
  if (e.x < 1 || e.y < 1 || e.z < 1) {
    throw ArgumentError(std::string(what) + " extents must be positive");
  }
}

template <typename V>
void write_pod(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw IoError("patch cache truncated");
  return v;
}

constexpr char kCacheMagic[4] = {'I', 'Q', 'T', 'P'};
constexpr std::uint32_t kCacheVersion = 1;

}  // namespace

std::array<int, 3> GridLayout::origin(std::size_t index) const {
  const auto cz = static_cast<std::size_t>(counts.z);
  const auto cy = static_cast<std::size_t>(counts.y);
  const auto iz = static_cast<int>(index % cz);
  const auto iy = static_cast<int>((index / cz) % cy);
  const auto ix = static_cast<int>(index / (cz * cy));
  return {ix * step.x, iy * step.y, iz * step.z};
}

std::size_t GridLayout::owner(int x, int y, int z) const {
  const auto ix = static_cast<std::size_t>(axis_owner(x, patch.x, step.x, counts.x));
  const auto iy = static_cast<std::size_t>(axis_owner(y, patch.y, step.y, counts.y));
  const auto iz = static_cast<std::size_t>(axis_owner(z, patch.z, step.z, counts.z));
  return (ix * static_cast<std::size_t>(counts.y) + iy) * static_cast<std::size_t>(counts.z) + iz;
}

PatchGrid PatchGrid::make(const Dims& lf_dims, int r, const Extent3& lf_patch,
                          const Extent3& lf_step) {
  if (r < 1) throw ArgumentError("r must be positive");
  check_extent(lf_patch, "patch");
  check_extent(lf_step, "step");
  if (lf_step.x > lf_patch.x || lf_step.y > lf_patch.y || lf_step.z > lf_patch.z) {
    throw ArgumentError("patch step must not exceed the patch size");
  }
  if (lf_dims.nx < 1 || lf_dims.ny < 1 || lf_dims.nz < 1) {
    throw ArgumentError("grid over an empty volume");
  }
  PatchGrid g;
  g.r = r;
  g.lf.dims = lf_dims;
  g.lf.patch = lf_patch;
  g.lf.step = lf_step;
  g.lf.padded = {padded_extent(lf_dims.nx, lf_patch.x, lf_step.x),
                 padded_extent(lf_dims.ny, lf_patch.y, lf_step.y),
                 padded_extent(lf_dims.nz, lf_patch.z, lf_step.z)};
  g.lf.counts = {(g.lf.padded.nx - lf_patch.x) / lf_step.x + 1,
                 (g.lf.padded.ny - lf_patch.y) / lf_step.y + 1,
                 (g.lf.padded.nz - lf_patch.z) / lf_step.z + 1};
  return g;
}

GridLayout PatchGrid::hf() const {
  GridLayout h = lf;
  h.dims.nz *= r;
  h.padded.nz *= r;
  h.patch.z *= r;
  h.step.z *= r;
  return h;
}

template <typename T>
std::vector<std::vector<T>> extract_patches(const Volume3D& vol, const GridLayout& layout) {
  if (!(vol.dims() == layout.dims)) {
    throw ArgumentError("volume dims " + to_string(vol.dims()) + " do not match grid dims " +
                        to_string(layout.dims));
  }
  const Dims d = layout.dims;
  const Extent3 p = layout.patch;
  std::vector<std::vector<T>> out(layout.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto o = layout.origin(i);
    std::vector<T>& patch = out[i];
    patch.assign(p.count(), T(0));
    for (int x = 0; x < p.x; ++x) {
      const int gx = o[0] + x;
      if (gx >= d.nx) break;
      for (int y = 0; y < p.y; ++y) {
        const int gy = o[1] + y;
        if (gy >= d.ny) break;
        const int zn = std::min(p.z, d.nz - o[2]);
        const double* src = &vol.data()[vol.index(gx, gy, o[2])];
        T* dst = &patch[(static_cast<std::size_t>(x) * p.y + y) * p.z];
        for (int z = 0; z < zn; ++z) dst[z] = static_cast<T>(src[z]);
      }
    }
  }
  return out;
}

template <typename T>
Volume3D blend_clip(const std::vector<std::vector<T>>& patches, const GridLayout& layout,
                    const Geometry& geometry) {
  if (patches.size() != layout.size()) {
    throw ArgumentError("blend_clip: expected " + std::to_string(layout.size()) +
                        " patches, got " + std::to_string(patches.size()));
  }
  for (const auto& p : patches) {
    if (p.size() != layout.patch.count()) throw ArgumentError("blend_clip: patch size mismatch");
  }
  const Dims d = layout.dims;
  const Extent3 p = layout.patch;
  std::vector<int> ox(d.nx), oy(d.ny), oz(d.nz);
  for (int x = 0; x < d.nx; ++x) ox[x] = axis_owner(x, p.x, layout.step.x, layout.counts.x);
  for (int y = 0; y < d.ny; ++y) oy[y] = axis_owner(y, p.y, layout.step.y, layout.counts.y);
  for (int z = 0; z < d.nz; ++z) oz[z] = axis_owner(z, p.z, layout.step.z, layout.counts.z);

  Volume3D out(d, geometry, 0.0);
  auto dst = out.data();
  for (int x = 0; x < d.nx; ++x) {
    const int lx = x - ox[x] * layout.step.x;
    for (int y = 0; y < d.ny; ++y) {
      const int ly = y - oy[y] * layout.step.y;
      const std::size_t row = (static_cast<std::size_t>(ox[x]) * layout.counts.y + oy[y]) *
                              static_cast<std::size_t>(layout.counts.z);
      for (int z = 0; z < d.nz; ++z) {
        const int lz = z - oz[z] * layout.step.z;
        const auto& patch = patches[row + static_cast<std::size_t>(oz[z])];
        dst[out.index(x, y, z)] =
            static_cast<double>(patch[(static_cast<std::size_t>(lx) * p.y + ly) * p.z + lz]);
      }
    }
  }
  return out;
}

template std::vector<std::vector<float>> extract_patches<float>(const Volume3D&,
                                                                const GridLayout&);
template std::vector<std::vector<double>> extract_patches<double>(const Volume3D&,
                                                                  const GridLayout&);
template Volume3D blend_clip<float>(const std::vector<std::vector<float>>&, const GridLayout&,
                                    const Geometry&);
template Volume3D blend_clip<double>(const std::vector<std::vector<double>>&, const GridLayout&,
                                     const Geometry&);

void PatchSet::append(PatchSet&& other) {
  if (other.pairs.empty()) return;
  if (pairs.empty()) {
    r = other.r;
    lf_patch = other.lf_patch;
  } else if (other.r != r || !(other.lf_patch == lf_patch)) {
    throw ArgumentError("cannot merge patch sets with different shapes");
  }
  pairs.insert(pairs.end(), std::make_move_iterator(other.pairs.begin()),
               std::make_move_iterator(other.pairs.end()));
}

PatchSet extract_pairs(const Volume3D& lf, const Volume3D& hf, int r, const Extent3& lf_patch,
                       const Extent3& lf_step, double bg_threshold,
                       const VoxelMask* lf_background, int subject) {
  const Dims ld = lf.dims();
  const Dims expected{ld.nx, ld.ny, ld.nz * r};
  if (!(hf.dims() == expected)) {
    throw ArgumentError("high-field dims " + to_string(hf.dims()) + " incompatible with " +
                        to_string(ld) + " at r=" + std::to_string(r));
  }
  if (lf_background && lf_background->size() != lf.size()) {
    throw ArgumentError("background mask size does not match the volume");
  }
  const PatchGrid grid = PatchGrid::make(ld, r, lf_patch, lf_step);
  const GridLayout hl = grid.hf();

  // Background indicator, extracted with the same grid so padding counts as 1.
  Volume3D bg(ld, lf.geometry(), 0.0);
  {
    auto b = bg.data();
    const auto v = lf.data();
    for (std::size_t i = 0; i < b.size(); ++i) {
      const bool is_bg = lf_background ? (*lf_background)[i] != 0 : v[i] == 0.0;
      b[i] = is_bg ? 1.0 : 0.0;
    }
  }
  const auto bg_patches = extract_patches<float>(bg, grid.lf);
  auto lf_patches = extract_patches<float>(lf, grid.lf);
  auto hf_patches = extract_patches<float>(hf, hl);

  PatchSet set;
  set.r = r;
  set.lf_patch = lf_patch;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    std::size_t fg = 0;
    for (float b : bg_patches[i]) fg += b == 0.0f;
    const double frac = 1.0 - static_cast<double>(fg) / static_cast<double>(lf_patch.count());
    if (frac > bg_threshold) continue;
    set.pairs.push_back({std::move(lf_patches[i]), std::move(hf_patches[i]),
                         static_cast<std::int32_t>(subject), static_cast<std::int32_t>(i)});
  }
  return set;
}

void save_patch_cache(const PatchSet& set, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCacheMagic, 4);
  write_pod(out, kCacheVersion);
  write_pod(out, static_cast<std::uint64_t>(set.pairs.size()));
  write_pod(out, static_cast<std::int32_t>(set.lf_patch.x));
  write_pod(out, static_cast<std::int32_t>(set.lf_patch.y));
  write_pod(out, static_cast<std::int32_t>(set.lf_patch.z));
  write_pod(out, static_cast<std::int32_t>(set.r));
  for (const PatchPair& p : set.pairs) {
    write_pod(out, p.subject);
    write_pod(out, p.index);
    out.write(reinterpret_cast<const char*>(p.lf.data()),
              static_cast<std::streamsize>(p.lf.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(p.hf.data()),
              static_cast<std::streamsize>(p.hf.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

PatchSet load_patch_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCacheMagic, 4) != 0) {
    throw FormatError(path.string() + " is not a patch cache");
  }
  if (read_pod<std::uint32_t>(in) != kCacheVersion) {
    throw UnsupportedFormatError("unsupported patch cache version");
  }
  const auto n = read_pod<std::uint64_t>(in);
  PatchSet set;
  set.lf_patch.x = read_pod<std::int32_t>(in);
  set.lf_patch.y = read_pod<std::int32_t>(in);
  set.lf_patch.z = read_pod<std::int32_t>(in);
  set.r = read_pod<std::int32_t>(in);
  check_extent(set.lf_patch, "cached patch");
  const std::size_t nl = set.lf_patch.count();
  const std::size_t nh = set.hf_patch().count();
  set.pairs.resize(n);
  for (PatchPair& p : set.pairs) {
    p.subject = read_pod<std::int32_t>(in);
    p.index = read_pod<std::int32_t>(in);
    p.lf.resize(nl);
    p.hf.resize(nh);
    in.read(reinterpret_cast<char*>(p.lf.data()), static_cast<std::streamsize>(nl * sizeof(float)));
    in.read(reinterpret_cast<char*>(p.hf.data()), static_cast<std::streamsize>(nh * sizeof(float)));
    if (!in) throw IoError("patch cache truncated");
  }
  return set;
}

Volume3D cubic_upsample_z(const Volume3D& vol, int r) {
  const Dims d = vol.dims();
  if (r < 1) throw ArgumentError("r must be positive");
  if (d.nz < 4) throw ArgumentError("cubic_upsample_z needs at least 4 slices");
  const int n = d.nz;
  const int m = r * n;

  // Basis weights per output slice; the same for every column.
  struct Tap {
    int k0;
    double w[4];
  };
  std::vector<Tap> taps(m);
  for (int j = 0; j < m; ++j) {
    const double t = static_cast<double>(j) / r;
    const int k = static_cast<int>(t);
    const double u = t - k;
    const double v = 1.0 - u;
    taps[j].k0 = k - 1;
    taps[j].w[0] = v * v * v / 6.0;
    taps[j].w[1] = (4.0 - 6.0 * u * u + 3.0 * u * u * u) / 6.0;
    taps[j].w[2] = (4.0 - 6.0 * v * v + 3.0 * v * v * v) / 6.0;
    taps[j].w[3] = u * u * u / 6.0;
  }

  // Thomas elimination factors for c[i-1] + 4 c[i] + c[i+1] = 6 f[i], i in [1, n-2].
  std::vector<double> cp(n, 0.0);
  for (int i = 1; i <= n - 2; ++i) {
    const double denom = 4.0 - (i > 1 ? cp[i - 1] : 0.0);
    cp[i] = 1.0 / denom;
  }

  Geometry g = vol.geometry();
  g.slice_thickness /= r;
  g.slice_gap /= r;
  Volume3D out({d.nx, d.ny, m}, g, 0.0);
  std::vector<double> c(n + 3);  // c[-1 .. n+1] stored at offset 1
  std::vector<double> rhs(n);
  auto dst = out.data();
  const auto src = vol.data();
  for (int x = 0; x < d.nx; ++x) {
    for (int y = 0; y < d.ny; ++y) {
      const double* f = &src[vol.index(x, y, 0)];
      double* cc = c.data() + 1;
      cc[0] = f[0];
      cc[n - 1] = f[n - 1];
      for (int i = 1; i <= n - 2; ++i) {
        double b = 6.0 * f[i];
        if (i == 1) b -= cc[0];
        if (i == n - 2) b -= cc[n - 1];
        rhs[i] = (b - (i > 1 ? rhs[i - 1] : 0.0)) * cp[i];
      }
      for (int i = n - 2; i >= 1; --i) {
        cc[i] = rhs[i] - (i < n - 2 ? cp[i] * cc[i + 1] : 0.0);
      }
      cc[-1] = 2.0 * cc[0] - cc[1];
      cc[n] = 2.0 * cc[n - 1] - cc[n - 2];
      cc[n + 1] = 2.0 * cc[n] - cc[n - 1];
      double* o = &dst[out.index(x, y, 0)];
      for (int j = 0; j < m; ++j) {
        const Tap& t = taps[j];
        o[j] = t.w[0] * cc[t.k0] + t.w[1] * cc[t.k0 + 1] + t.w[2] * cc[t.k0 + 2] +
               t.w[3] * cc[t.k0 + 3];
      }
    }
  }
  return out;
}

Volume3D replicate_z(const Volume3D& vol, int r) {
  if (r < 1) throw ArgumentError("r must be positive");
  const Dims d = vol.dims();
  Geometry g = vol.geometry();
  g.slice_thickness /= r;
  g.slice_gap /= r;
  Volume3D out({d.nx, d.ny, d.nz * r}, g, 0.0);
  for (int x = 0; x < d.nx; ++x)
    for (int y = 0; y < d.ny; ++y)
      for (int z = 0; z < d.nz * r; ++z) out(x, y, z) = vol(x, y, z / r);
  return out;
}

}  // namespace iqt
