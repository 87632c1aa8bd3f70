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

#include "iqt/nifti.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

#include "iqt/error.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "NIfTI IO assumes a little-endian host");

namespace iqt {
namespace {

template <typename T>
T load(const std::uint8_t* base, std::size_t offset) {
  T v;
  std::memcpy(&v, base + offset, sizeof(T));
  return v;
}

template <typename T>
void store(std::uint8_t* base, std::size_t offset, T v) {
  std::memcpy(base + offset, &v, sizeof(T));
}

// Byte offsets inside the 348-byte header.
constexpr std::size_t kOffSizeofHdr = 0;
constexpr std::size_t kOffDim = 40;
constexpr std::size_t kOffDatatype = 70;
constexpr std::size_t kOffBitpix = 72;
constexpr std::size_t kOffPixdim = 76;
constexpr std::size_t kOffVoxOffset = 108;
constexpr std::size_t kOffSclSlope = 112;
constexpr std::size_t kOffSclInter = 116;
constexpr std::size_t kOffXyztUnits = 123;
constexpr std::size_t kOffDescrip = 148;
constexpr std::size_t kOffQformCode = 252;
constexpr std::size_t kOffSformCode = 254;
constexpr std::size_t kOffSrowX = 280;
constexpr std::size_t kOffSrowY = 296;
constexpr std::size_t kOffSrowZ = 312;
constexpr std::size_t kOffMagic = 344;

}  // namespace

NiftiImage read_nifti(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < nifti::kHeaderSize) {
    throw IoError(path.string() + ": truncated header");
  }
  const std::uint8_t* h = bytes.data();

  nifti::Header hdr;
  std::memcpy(hdr.raw.data(), h, nifti::kHeaderSize);
  std::memcpy(hdr.magic.data(), h + kOffMagic, 4);
  if (std::memcmp(hdr.magic.data(), "n+1\0", 4) != 0) {
    throw FormatError(path.string() + ": not a single-file NIfTI-1 image (bad magic)");
  }
  if (load<std::int32_t>(h, kOffSizeofHdr) != 348) {
    throw FormatError(path.string() + ": sizeof_hdr is not 348");
  }
  for (int i = 0; i < 8; ++i) {
    hdr.dim[i] = load<std::int16_t>(h, kOffDim + 2 * i);
    hdr.pixdim[i] = load<float>(h, kOffPixdim + 4 * i);
  }
  hdr.datatype = load<std::int16_t>(h, kOffDatatype);
  hdr.bitpix = load<std::int16_t>(h, kOffBitpix);
  hdr.vox_offset = load<float>(h, kOffVoxOffset);
  hdr.scl_slope = load<float>(h, kOffSclSlope);
  hdr.scl_inter = load<float>(h, kOffSclInter);
  hdr.descrip.assign(reinterpret_cast<const char*>(h + kOffDescrip),
                     strnlen(reinterpret_cast<const char*>(h + kOffDescrip), 80));

  if (hdr.dim[0] < 3 || hdr.dim[0] > 7) {
    throw FormatError(path.string() + ": fewer than 3 dimensions");
  }
  for (int i = 4; i <= hdr.dim[0]; ++i) {
    if (hdr.dim[i] > 1) {
      throw UnsupportedFormatError(path.string() + ": only 3-D images are supported");
    }
  }
  const Dims dims{hdr.dim[1], hdr.dim[2], hdr.dim[3]};
  if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) {
    throw FormatError(path.string() + ": non-positive dimension");
  }

  std::size_t elem = 0;
  if (hdr.datatype == nifti::kFloat32) {
    elem = 4;
  } else if (hdr.datatype == nifti::kInt16) {
    elem = 2;
  } else {
    throw UnsupportedFormatError(path.string() + ": unsupported datatype code " +
                                 std::to_string(hdr.datatype));
  }

  const auto offset = static_cast<std::size_t>(hdr.vox_offset);
  if (hdr.vox_offset < static_cast<float>(nifti::kHeaderSize)) {
    throw FormatError(path.string() + ": vox_offset inside header");
  }
  const std::size_t n = dims.count();
  if (bytes.size() < offset + n * elem) {
    throw IoError(path.string() + ": truncated data section");
  }

  const bool scaled = hdr.scl_slope != 0.0f &&
                      !(hdr.scl_slope == 1.0f && hdr.scl_inter == 0.0f);
  Geometry geom;
  geom.voxel_x = hdr.pixdim[1] > 0 ? hdr.pixdim[1] : 1.0;
  geom.voxel_y = hdr.pixdim[2] > 0 ? hdr.pixdim[2] : 1.0;
  geom.slice_thickness = hdr.pixdim[3] > 0 ? hdr.pixdim[3] : 1.0;
  geom.slice_gap = 0.0;

  // File order is x fastest; ours is z fastest.
  std::vector<double> data(n);
  const std::uint8_t* body = h + offset;
  std::size_t file_index = 0;
  for (int z = 0; z < dims.nz; ++z) {
    for (int y = 0; y < dims.ny; ++y) {
      for (int x = 0; x < dims.nx; ++x, ++file_index) {
        double v = elem == 4 ? static_cast<double>(load<float>(body, 4 * file_index))
                             : static_cast<double>(load<std::int16_t>(body, 2 * file_index));
        if (scaled) v = v * hdr.scl_slope + hdr.scl_inter;
        data[(static_cast<std::size_t>(x) * dims.ny + y) * dims.nz + z] = v;
      }
    }
  }
  NiftiImage img{Volume3D(dims, geom, std::move(data)), hdr};
  img.volume.check_finite("read_nifti");
  return img;
}

void write_nifti(const Volume3D& vol, const std::filesystem::path& path) {
  const Dims d = vol.dims();
  if (d.nx > 32767 || d.ny > 32767 || d.nz > 32767) {
    throw ArgumentError("write_nifti: dimension exceeds int16 range");
  }
  std::vector<std::uint8_t> bytes(nifti::kVoxOffset + 4 * d.count(), 0);
  std::uint8_t* h = bytes.data();
  store<std::int32_t>(h, kOffSizeofHdr, 348);
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(d.nx),
                               static_cast<std::int16_t>(d.ny),
                               static_cast<std::int16_t>(d.nz), 1, 1, 1, 1};
  const Geometry& g = vol.geometry();
  const float pixdim[8] = {1.0f,
                           static_cast<float>(g.voxel_x),
                           static_cast<float>(g.voxel_y),
                           static_cast<float>(g.slice_pitch()),
                           1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) {
    store<std::int16_t>(h, kOffDim + 2 * i, dim[i]);
    store<float>(h, kOffPixdim + 4 * i, pixdim[i]);
  }
  store<std::int16_t>(h, kOffDatatype, nifti::kFloat32);
  store<std::int16_t>(h, kOffBitpix, 32);
  store<float>(h, kOffVoxOffset, static_cast<float>(nifti::kVoxOffset));
  store<float>(h, kOffSclSlope, 0.0f);
  store<float>(h, kOffSclInter, 0.0f);
  h[kOffXyztUnits] = 2;  // millimetres
  const char descrip[] = "iqt";
  std::memcpy(h + kOffDescrip, descrip, sizeof(descrip) - 1);
  // Identity-scaled sform so viewers place voxels sensibly.
  store<std::int16_t>(h, kOffQformCode, 0);
  store<std::int16_t>(h, kOffSformCode, 2);
  store<float>(h, kOffSrowX, pixdim[1]);
  store<float>(h, kOffSrowY + 4, pixdim[2]);
  store<float>(h, kOffSrowZ + 8, pixdim[3]);
  std::memcpy(h + kOffMagic, "n+1\0", 4);

  std::uint8_t* body = h + nifti::kVoxOffset;
  std::size_t file_index = 0;
  for (int z = 0; z < d.nz; ++z) {
    for (int y = 0; y < d.ny; ++y) {
      for (int x = 0; x < d.nx; ++x, ++file_index) {
        store<float>(body, 4 * file_index, static_cast<float>(vol(x, y, z)));
      }
    }
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::filesystem::path sidecar_path(const std::filesystem::path& nii) {
  auto p = nii;
  p.replace_extension(".geom.json");
  return p;
}

void write_geometry_sidecar(const Geometry& g, const std::filesystem::path& nii) {
  nlohmann::json j;
  j["slice_thickness_mm"] = g.slice_thickness;
  j["slice_gap_mm"] = g.slice_gap;
  std::ofstream out(sidecar_path(nii));
  if (!out) throw IoError("cannot write " + sidecar_path(nii).string());
  out << j.dump(2) << "\n";
}

std::optional<Geometry> read_geometry_sidecar(const std::filesystem::path& nii) {
  const auto p = sidecar_path(nii);
  if (!std::filesystem::exists(p)) return std::nullopt;
  std::ifstream in(p);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  Geometry g;
  g.slice_thickness = j.at("slice_thickness_mm").get<double>();
  g.slice_gap = j.value("slice_gap_mm", 0.0);
  return g;
}

Volume3D load_volume(const std::filesystem::path& path) {
  NiftiImage img = read_nifti(path);
  if (auto side = read_geometry_sidecar(path)) {
    Geometry g = img.volume.geometry();
    g.slice_thickness = side->slice_thickness;
    g.slice_gap = side->slice_gap;
    img.volume.set_geometry(g);
  }
  return std::move(img.volume);
}

void save_volume(const Volume3D& vol, const std::filesystem::path& path) {
  write_nifti(vol, path);
  write_geometry_sidecar(vol.geometry(), path);
}

}  // namespace iqt
