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

#ifndef IQT_NETWORK_HPP_
#define IQT_NETWORK_HPP_

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "iqt/autodiff.hpp"
#include "iqt/normalizer.hpp"
#include "iqt/patching.hpp"
#include "iqt/volume.hpp"
#include "json.hpp"

namespace iqt {

struct MasksemblesSpec {
  int masks = 0;       // 0 disables the layers
  double scale = 1.0;  // each mask keeps round(channels / scale) channels

  bool enabled() const { return masks > 0; }
};

// ANISO U-Net description. Level i runs a residual block with
// base_filters * 2^i filters; the first log2(r) pools are (2,2,1), the rest
// (2,2,2). Skip paths whose z extent is below the decoder's pass through a
// bottleneck block that upsamples z by the missing factor.
struct ModelSpec {
  int r = 4;
  int levels = 5;
  int convs_per_level = 2;
  int base_filters = 16;
  int bottleneck_depth = 2;
  Extent3 lf_patch{32, 32, 8};
  Extent3 lf_step{16, 16, 4};
  MasksemblesSpec masksembles;
  // Inputs are divided by this before the network, outputs multiplied.
  double intensity_scale = 1.0;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;

  // Throws SpecError when the patch cannot pass through all levels.
  void validate() const;
  Extent3 hf_patch() const { return {lf_patch.x, lf_patch.y, r * lf_patch.z}; }

  // 5 levels, 2 convs, 16 filters, 32x32x(32/r) patches with step 16x16x(16/r).
  static ModelSpec standard(int r);
};

void to_json(nlohmann::json& j, const ModelSpec& s);
void from_json(const nlohmann::json& j, ModelSpec& s);

struct NamedTensor {
  std::string name;
  ad::Shape shape{};
  std::vector<float> data;
};

struct ModelWeights {
  std::vector<NamedTensor> params;   // trainable, in construction order
  std::vector<NamedTensor> buffers;  // batch-norm running mean and variance
  std::vector<NamedTensor> masks;    // fixed binary channel masks (m, C)

  const NamedTensor& find(const std::string& name) const;
  NamedTensor& find(const std::string& name);
  std::size_t parameter_count() const;
};

enum class InitKind { kGlorot, kZeros, kOnes };

struct ParamInfo {
  std::string name;
  ad::Shape shape{};
  InitKind init = InitKind::kGlorot;
};

struct Architecture {
  std::vector<ParamInfo> params;
  std::vector<ParamInfo> buffers;
  std::vector<std::pair<std::string, int>> masks;  // name, channels
  ad::Shape output{};                              // for a batch of one
};

// Walks the network once on shapes only.
Architecture describe(const ModelSpec& spec);

// Binary (m, C) masks: mask i keeps channels (i*k + j) mod C, j < k,
// k = round(C / scale). Throws SpecError when k * m < C.
std::vector<float> make_masks(int m, int channels, double scale);

// Glorot-normal kernels, zero biases and shifts, unit scales, running mean
// 0 and variance 1.
ModelWeights initialize_weights(const ModelSpec& spec, std::uint64_t seed);

// A network instantiated on a tape.
template <typename T>
struct NetGraph {
  ad::Graph<T> graph;
  int input = -1;
  int output = -1;
  std::vector<std::pair<std::string, int>> params;       // leaf per parameter
  std::vector<std::pair<std::string, int>> batch_norms;  // node per batch norm
};

// `input` is already intensity-scaled. Training mode uses batch statistics
// and leaves the parameters requiring gradients.
template <typename T>
NetGraph<T> build_graph(const ModelSpec& spec, const ModelWeights& weights, ad::Tensor<T> input,
                        bool training);

// Inference on raw intensities (N, 1, lf_patch) -> (N, 1, hf_patch).
ad::Tensor<float> forward(const ModelWeights& weights, const ModelSpec& spec,
                          const ad::Tensor<float>& batch);

struct Uncertainty {
  std::vector<double> mean;
  std::vector<double> variance;
};

// Feeds m copies of one LF patch, copy i through mask i; returns the voxel
// mean and the population variance of the m outputs.
Uncertainty predict_with_uncertainty(const ModelWeights& weights, const ModelSpec& spec,
                                     const std::vector<float>& lf_patch);

// Maps a list of LF patches to HF patches.
using PatchPredictor =
    std::function<std::vector<std::vector<float>>(const std::vector<std::vector<float>>&)>;

// Grid -> predict -> clip-blend -> crop. Patches with no nonzero voxel are
// not sent to the predictor and come back as zeros.
Volume3D enhance_with(const Volume3D& lf, int r, const Extent3& lf_patch, const Extent3& lf_step,
                      const PatchPredictor& predict);

struct EnhanceOptions {
  int batch = 8;
  int threads = 1;
};

// normalize (when a table is given) -> enhance_with(forward).
Volume3D enhance_volume(const ModelWeights& weights, const ModelSpec& spec, const Volume3D& lf,
                        const LandmarkTable* table, const EnhanceOptions& opts = {});

struct EnhancedWithUncertainty {
  Volume3D mean;
  Volume3D variance;
};

EnhancedWithUncertainty enhance_with_uncertainty(const ModelWeights& weights,
                                                 const ModelSpec& spec, const Volume3D& lf,
                                                 const LandmarkTable* table);

}  // namespace iqt

#endif  // IQT_NETWORK_HPP_
