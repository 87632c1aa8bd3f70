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

#include "iqt/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "iqt/digest.hpp"
#include "iqt/error.hpp"

namespace iqt {
namespace {

constexpr char kMagic[8] = {'I', 'Q', 'T', 'C', 'K', 'P', 'T', '\0'};

enum : std::uint8_t { kParam = 0, kBuffer = 1, kMask = 2 };

template <typename V>
void put(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw IoError("checkpoint truncated");
  return v;
}

void put_tensor(std::ofstream& out, std::uint8_t kind, const NamedTensor& t) {
  put(out, kind);
  put(out, static_cast<std::uint32_t>(t.name.size()));
  out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
  for (int d : t.shape) put(out, static_cast<std::int32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header{{"spec", ckpt.spec}, {"metadata", ckpt.metadata}};
  if (ckpt.norm) header["norm"] = *ckpt.norm;
  const std::string js = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(js.size()));
  out.write(js.data(), static_cast<std::streamsize>(js.size()));
  const auto& w = ckpt.weights;
  put(out, static_cast<std::uint32_t>(w.params.size() + w.buffers.size() + w.masks.size()));
  for (const auto& t : w.params) put_tensor(out, kParam, t);
  for (const auto& t : w.buffers) put_tensor(out, kBuffer, t);
  for (const auto& t : w.masks) put_tensor(out, kMask, t);
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + " is not a model checkpoint");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw UnsupportedFormatError("checkpoint version " + std::to_string(version) + " not supported");
  }
  const auto len = get<std::uint64_t>(in);
  std::string js(len, '\0');
  in.read(js.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint truncated");
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(js);
    ckpt.spec = header.at("spec").get<ModelSpec>();
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
    if (header.contains("norm")) ckpt.norm = header.at("norm").get<LandmarkTable>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = get<std::uint8_t>(in);
    const auto nlen = get<std::uint32_t>(in);
    NamedTensor t;
    t.name.resize(nlen);
    in.read(t.name.data(), nlen);
    for (int& d : t.shape) d = get<std::int32_t>(in);
    t.data.resize(ad::element_count(t.shape));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw IoError("checkpoint truncated");
    switch (kind) {
      case kParam: ckpt.weights.params.push_back(std::move(t)); break;
      case kBuffer: ckpt.weights.buffers.push_back(std::move(t)); break;
      case kMask: ckpt.weights.masks.push_back(std::move(t)); break;
      default: throw FormatError("unknown tensor kind in checkpoint");
    }
  }
  ckpt.spec.validate();
  return ckpt;
}

std::string mask_digest(const ModelWeights& weights) {
  std::string bytes;
  for (const NamedTensor& t : weights.masks) {
    bytes += t.name;
    bytes.push_back('\0');
    bytes.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  return sha256_hex({reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()});
}

}  // namespace iqt
