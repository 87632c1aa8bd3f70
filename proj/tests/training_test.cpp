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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "iqt/error.hpp"
#include "iqt/phantom.hpp"
#include "iqt/simulator.hpp"
#include "iqt/training.hpp"

namespace iqt {
namespace {

ModelSpec toy_spec() {
  ModelSpec s;
  s.r = 4;
  s.levels = 3;
  s.base_filters = 4;
  s.lf_patch = {16, 16, 4};
  s.lf_step = {8, 8, 2};
  s.intensity_scale = 0.0;
  return s;
}

// Three phantom subjects at 32^3, 27 pairs each.
const PatchSet& toy_set() {
  static const PatchSet set = [] {
    PatchSet all;
    for (int i = 0; i < 3; ++i) {
      PhantomConfig cfg;
      cfg.dims = {32, 32, 32};
      cfg.seed = 40 + i;
      const Phantom ph = generate_phantom(cfg);
      const SimulationResult sim =
          simulate(ph.image, ph.masks, 4, SnrDistribution::t1w(),
                   SigmaPolicy::fix_white_matter_mean(), 60 + i);
      const Volume3D lf = apply_background(sim.image, sim.background);
      PatchSet s = extract_pairs(lf, ph.image, 4, {16, 16, 4}, {8, 8, 2}, 1.0, nullptr, i);
      if (i == 0) {
        all = std::move(s);
      } else {
        all.append(std::move(s));
      }
    }
    return all;
  }();
  return set;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.decay = 0.0;
  c.batch_size = 8;
  c.epochs = 2;
  c.val_fraction = 1.0 / 3.0;
  c.seed = 3;
  return c;
}

TEST(Glorot, StdFormula) {
  EXPECT_DOUBLE_EQ(glorot_std({8, 4, 3, 3, 3}), std::sqrt(2.0 / 324.0));
  // Transpose kernels (in, out, ...) give the same fans.
  EXPECT_DOUBLE_EQ(glorot_std({4, 8, 1, 1, 4}), glorot_std({8, 4, 1, 1, 4}));
}

TEST(Glorot, SampleMoments) {
  const ad::Shape shape{100, 100, 10, 1, 1};
  const auto w = glorot_init(shape, 7);
  ASSERT_EQ(w.size(), 100000u);
  double mean = 0.0;
  for (float v : w) mean += v;
  mean /= static_cast<double>(w.size());
  double var = 0.0;
  for (float v : w) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(w.size() - 1));
  EXPECT_NEAR(sd, glorot_std(shape), 0.03 * glorot_std(shape));
  EXPECT_EQ(glorot_init(shape, 7), w);
  EXPECT_NE(glorot_init(shape, 8), w);
}

TEST(Adam, ZeroGradientIsFixedPoint) {
  std::vector<NamedTensor> p{{"w", {1, 1, 1, 1, 3}, {1.0f, -2.0f, 3.0f}}};
  AdamState st;
  const TrainConfig c = quick_config();
  for (int i = 0; i < 5; ++i) adam_step(p, {{0.0f, 0.0f, 0.0f}}, st, c);
  EXPECT_EQ(p[0].data, (std::vector<float>{1.0f, -2.0f, 3.0f}));
}

TEST(Adam, FirstStepIsLearningRate) {
  std::vector<NamedTensor> p{{"w", {1, 1, 1, 1, 1}, {0.5f}}};
  AdamState st;
  TrainConfig c = quick_config();
  c.learning_rate = 0.01;
  c.decay = 1e-6;
  adam_step(p, {{1.0f}}, st, c);
  EXPECT_NEAR(p[0].data[0], 0.5 - 0.01, 1e-6);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, LearningRateSchedule) {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.decay = 1e-2;
  EXPECT_DOUBLE_EQ(adam_learning_rate(c, 1), 1e-3);
  EXPECT_DOUBLE_EQ(adam_learning_rate(c, 101), 1e-3 / 2.0);
}

TEST(Adam, DescendsOnSquare) {
  std::vector<NamedTensor> p{{"w", {1, 1, 1, 1, 1}, {1.0f}}};
  AdamState st;
  TrainConfig c;
  c.learning_rate = 0.015;
  c.decay = 0.0;
  double prev = 1.0;
  for (int t = 0; t < 100; ++t) {
    adam_step(p, {{2.0f * p[0].data[0]}}, st, c);
    const double now = std::abs(p[0].data[0]);
    EXPECT_LE(now, prev) << "step " << t;
    prev = now;
  }
  EXPECT_LT(prev, 0.1);
}

TEST(Adam, NonFiniteGradientRejected) {
  std::vector<NamedTensor> p{{"a", {1, 1, 1, 1, 1}, {1.0f}}, {"b", {1, 1, 1, 1, 1}, {2.0f}}};
  AdamState st;
  try {
    adam_step(p, {{1.0f}, {std::nanf("")}}, st, quick_config());
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(p[0].data[0], 1.0f);
  EXPECT_EQ(p[1].data[0], 2.0f);
  EXPECT_EQ(st.step, 0);
}

TEST(Config, Validation) {
  TrainConfig c = quick_config();
  c.val_fraction = 1.0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = quick_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ArgumentError);
  c = quick_config();
  c.learning_rate = -1.0;
  EXPECT_THROW(c.validate(), ArgumentError);
}

TEST(Data, SplitIsDisjointAndComplete) {
  const auto [tr, va] = split_subjects(toy_set(), 1.0 / 3.0, 9);
  EXPECT_EQ(tr.size(), 2u);
  EXPECT_EQ(va.size(), 1u);
  std::set<std::int32_t> all(tr.begin(), tr.end());
  all.insert(va.begin(), va.end());
  EXPECT_EQ(all, (std::set<std::int32_t>{0, 1, 2}));
}

TEST(Data, AutoIntensityScale) {
  const PatchSet& set = toy_set();
  std::vector<std::size_t> idx{0, 5, 30};
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i : idx)
    for (float v : set.pairs[i].hf)
      if (v != 0.0f) {
        sum += v;
        ++n;
      }
  EXPECT_NEAR(auto_intensity_scale(set, idx), sum / static_cast<double>(n), 1e-9 * sum / n);
}

TEST(Data, EvaluateMseMatchesDirectSum) {
  ModelSpec s = toy_spec();
  s.intensity_scale = 50.0;
  const ModelWeights w = initialize_weights(s, 4);
  const PatchSet& set = toy_set();
  std::vector<std::size_t> idx{1, 2, 3, 40, 41};
  auto [x, y] = make_batch(s, set, idx);
  // forward() takes raw intensities.
  ad::Tensor<float> raw(x.shape);
  const std::size_t per = s.lf_patch.count();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy(set.pairs[idx[k]].lf.begin(), set.pairs[idx[k]].lf.end(), raw.data.begin() + k * per);
  }
  const auto out = forward(w, s, raw);
  double sse = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = out.data[i] / 50.0 - y.data[i];
    sse += d * d;
  }
  const double want = sse / static_cast<double>(out.size());
  EXPECT_NEAR(evaluate_mse(w, s, set, idx, 2), want, 1e-6);
}

TEST(Train, DeterministicAndBestEpoch) {
  TrainConfig c = quick_config();
  c.epochs = 3;
  const TrainResult a = train(toy_spec(), toy_set(), c);
  const TrainResult b = train(toy_spec(), toy_set(), c);
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.history[i].train_mse, b.history[i].train_mse);
    EXPECT_EQ(a.history[i].val_mse, b.history[i].val_mse);
  }
  int best = 1;
  for (const EpochRecord& r : a.history) {
    if (r.val_mse < a.history[best - 1].val_mse) best = r.epoch;
  }
  EXPECT_EQ(a.best_epoch, best);
  EXPECT_GT(a.spec.intensity_scale, 0.0);
  EXPECT_DOUBLE_EQ(evaluate_mse(a.weights, a.spec, toy_set(), std::vector<std::size_t>{0}, 1),
                   evaluate_mse(b.weights, b.spec, toy_set(), std::vector<std::size_t>{0}, 1));
}

TEST(Train, ZeroLearningRateFreezesModel) {
  TrainConfig c = quick_config();
  c.learning_rate = 0.0;
  ModelSpec s = toy_spec();
  s.intensity_scale = 40.0;
  const ModelWeights init = initialize_weights(s, 5);
  const TrainResult res = train(s, toy_set(), c, &init);
  for (std::size_t i = 0; i < init.params.size(); ++i) {
    EXPECT_EQ(res.weights.params[i].data, init.params[i].data) << init.params[i].name;
  }
  for (std::size_t i = 0; i < init.buffers.size(); ++i) {
    EXPECT_EQ(res.weights.buffers[i].data, init.buffers[i].data);
  }
  EXPECT_EQ(res.history[0].val_mse, res.history[1].val_mse);
}

TEST(Train, ValidationSubjectsNeverBatched) {
  TrainConfig c = quick_config();
  std::set<std::int32_t> seen;
  c.batch_observer = [&](std::span<const std::int32_t> ids) { seen.insert(ids.begin(), ids.end()); };
  const TrainResult res = train(toy_spec(), toy_set(), c);
  ASSERT_FALSE(seen.empty());
  for (std::int32_t v : res.val_subjects) EXPECT_EQ(seen.count(v), 0u);
  for (std::int32_t t : res.train_subjects) EXPECT_EQ(seen.count(t), 1u);
}

TEST(Train, MasksStayFixed) {
  ModelSpec s = toy_spec();
  s.masksembles = {2, 2.0};
  TrainConfig c = quick_config();
  c.epochs = 1;
  const ModelWeights init = initialize_weights(s, c.seed);
  const TrainResult res = train(s, toy_set(), c);
  ASSERT_EQ(res.weights.masks.size(), init.masks.size());
  for (std::size_t i = 0; i < init.masks.size(); ++i) {
    EXPECT_EQ(res.weights.masks[i].data, init.masks[i].data);
  }
  c.batch_size = 7;
  EXPECT_THROW(train(s, toy_set(), c), ArgumentError);
}

TEST(History, CsvLayout) {
  const auto path = std::filesystem::temp_directory_path() / "iqt_history_test.csv";
  write_history_csv({{1, 0.5, 0.25, 1e-3}, {2, 0.125, 0.0625, 1e-3}}, path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  EXPECT_EQ(ss.str(), "epoch,train_mse,val_mse,lr\n1,0.5,0.25,0.001\n2,0.125,0.0625,0.001\n");
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace iqt
