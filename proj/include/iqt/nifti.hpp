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

#ifndef IQT_NIFTI_HPP_
#define IQT_NIFTI_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "iqt/volume.hpp"

namespace iqt {

// Subset of the NIfTI-1 single-file format: little-endian, uncompressed,
// magic "n+1", datatype float32 (16) or int16 (4).
namespace nifti {

inline constexpr std::int16_t kInt16 = 4;
inline constexpr std::int16_t kFloat32 = 16;
inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kVoxOffset = 352;

struct Header {
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 0.0f;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  std::string descrip;
  std::array<char, 4> magic{};
  std::array<std::uint8_t, kHeaderSize> raw{};
};

}  // namespace nifti

struct NiftiImage {
  Volume3D volume;
  nifti::Header header;
};

// Reads the image; geometry comes from pixdim[1..3] with slice_gap = 0.
NiftiImage read_nifti(const std::filesystem::path& path);

// Writes float32 data with vox_offset 352. pixdim[3] holds the slice pitch.
void write_nifti(const Volume3D& vol, const std::filesystem::path& path);

// "<dir>/<stem>.geom.json" for "<dir>/<stem>.nii".
std::filesystem::path sidecar_path(const std::filesystem::path& nii);

void write_geometry_sidecar(const Geometry& g, const std::filesystem::path& nii);
std::optional<Geometry> read_geometry_sidecar(const std::filesystem::path& nii);

// read_nifti plus sidecar: thickness and gap from the sidecar when present.
Volume3D load_volume(const std::filesystem::path& path);

// write_nifti plus a geometry sidecar.
void save_volume(const Volume3D& vol, const std::filesystem::path& path);

}  // namespace iqt

#endif  // IQT_NIFTI_HPP_
