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

#ifndef IQT_TRAINING_HPP_
#define IQT_TRAINING_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "iqt/autodiff.hpp"
#include "iqt/network.hpp"
#include "iqt/patching.hpp"
#include "json.hpp"

namespace iqt {

// Normal(0, 2 / (fan_in + fan_out)) entries for a kernel shaped
// (out, in, kx, ky, kz): fan_in = in * k, fan_out = out * k with k the
// receptive field size. A transpose kernel (in, out, ...) has the same sum.
std::vector<float> glorot_init(const ad::Shape& shape, std::uint64_t seed);
double glorot_std(const ad::Shape& shape);

struct TrainConfig {
  double learning_rate = 1e-3;
  double decay = 1e-6;  // lr_t = lr / (1 + decay * (t - 1)), t counted from 1
  int batch_size = 32;
  int epochs = 100;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Called with the subject id of every pair in each training batch.
  std::function<void(std::span<const std::int32_t>)> batch_observer;
  // Called after every epoch.
  std::function<void(int epoch, double train_mse, double val_mse)> epoch_observer;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long step = 0;
};

double adam_learning_rate(const TrainConfig& config, long step);

// One Adam update over parallel lists of parameters and gradients. Throws
// NumericError naming the first parameter with a non-finite gradient; nothing
// is modified in that case.
void adam_step(std::vector<NamedTensor>& params, const std::vector<std::vector<float>>& grads,
               AdamState& state, const TrainConfig& config);

struct EpochRecord {
  int epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ModelSpec spec;  // with the resolved intensity scale
  ModelWeights weights;  // best validation epoch
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  std::vector<std::int32_t> train_subjects;
  std::vector<std::int32_t> val_subjects;
};

// Mean intensity of the nonzero HF voxels of the given pairs.
double auto_intensity_scale(const PatchSet& set, std::span<const std::size_t> pairs);

// Splits subjects into (train, val) with a seeded shuffle.
std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>> split_subjects(
    const PatchSet& set, double val_fraction, std::uint64_t seed);

// Mean squared error of the network over the listed pairs in scaled units.
// Inference mode, evaluated in chunks of `batch`.
double evaluate_mse(const ModelWeights& weights, const ModelSpec& spec, const PatchSet& set,
                    std::span<const std::size_t> pairs, int batch);

// Stacks the listed pairs into scaled (N, 1, ...) input and target tensors.
std::pair<ad::Tensor<float>, ad::Tensor<float>> make_batch(const ModelSpec& spec,
                                                           const PatchSet& set,
                                                           std::span<const std::size_t> pairs);

// Minimises the mean squared error over mini-batches. A spec with
// intensity_scale <= 0 gets one from the training pairs. Starts from
// `initial` when given, else from initialize_weights(spec, config.seed).
TrainResult train(const ModelSpec& spec, const PatchSet& set, const TrainConfig& config,
                  const ModelWeights* initial = nullptr);

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace iqt

#endif  // IQT_TRAINING_HPP_
