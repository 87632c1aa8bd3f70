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

#ifndef IQT_CHECKPOINT_HPP_
#define IQT_CHECKPOINT_HPP_

#include <filesystem>
#include <optional>
#include <string>

#include "iqt/network.hpp"
#include "iqt/normalizer.hpp"
#include "json.hpp"

namespace iqt {

// Layout: "IQTCKPT\0", u32 version, u64 JSON length, JSON header (spec,
// optional landmark table, metadata), u32 tensor count, then per tensor
// u8 kind, u32 name length, name, 5 x i32 shape, float32 data.
struct Checkpoint {
  ModelSpec spec;
  ModelWeights weights;
  std::optional<LandmarkTable> norm;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 over all mask names and values.
std::string mask_digest(const ModelWeights& weights);

}  // namespace iqt

#endif  // IQT_CHECKPOINT_HPP_
