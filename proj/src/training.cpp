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

#include "iqt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include "iqt/error.hpp"

namespace iqt {

double glorot_std(const ad::Shape& shape) {
  const double rf = static_cast<double>(shape[2]) * shape[3] * shape[4];
  const double fan_in = shape[1] * rf;
  const double fan_out = shape[0] * rf;
  if (!(fan_in + fan_out > 0.0)) throw ArgumentError("glorot_init on an empty shape");
  return std::sqrt(2.0 / (fan_in + fan_out));
}

std::vector<float> glorot_init(const ad::Shape& shape, std::uint64_t seed) {
  const double sd = glorot_std(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<float> out(ad::element_count(shape));
  for (float& v : out) v = static_cast<float>(dist(rng));
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw ArgumentError("learning rate must be non-negative");
  if (!(decay >= 0.0)) throw ArgumentError("decay must be non-negative");
  if (batch_size < 1) throw ArgumentError("batch size must be positive");
  if (epochs < 1) throw ArgumentError("epochs must be positive");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ArgumentError("validation fraction must lie in (0, 1)");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"decay", c.decay},
                     {"batch_size", c.batch_size},       {"epochs", c.epochs},
                     {"val_fraction", c.val_fraction},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.decay = j.value("decay", c.decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.val_fraction = j.value("val_fraction", c.val_fraction);
  c.seed = j.value("seed", c.seed);
}

double adam_learning_rate(const TrainConfig& config, long step) {
  return config.learning_rate / (1.0 + config.decay * static_cast<double>(step - 1));
}

void adam_step(std::vector<NamedTensor>& params, const std::vector<std::vector<float>>& grads,
               AdamState& state, const TrainConfig& config) {
  if (grads.size() != params.size()) throw ArgumentError("adam_step: gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].data.size()) {
      throw ArgumentError("adam_step: gradient shape mismatch for " + params[i].name);
    }
    for (float g : grads[i]) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + params[i].name);
    }
  }
  if (state.m.empty()) {
    for (const NamedTensor& p : params) {
      state.m.emplace_back(p.data.size(), 0.0);
      state.v.emplace_back(p.data.size(), 0.0);
    }
  }
  const long t = ++state.step;
  const double lr = adam_learning_rate(config, t);
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<float>& w = params[i].data;
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = grads[i][k];
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
      const double mh = m[k] / c1;
      const double vh = v[k] / c2;
      w[k] = static_cast<float>(w[k] - lr * mh / (std::sqrt(vh) + config.adam_eps));
    }
  }
}

double auto_intensity_scale(const PatchSet& set, std::span<const std::size_t> pairs) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i : pairs) {
    for (float v : set.pairs.at(i).hf) {
      if (v != 0.0f) {
        s += v;
        ++n;
      }
    }
  }
  if (n == 0 || !(s > 0.0)) throw EstimationError("no positive high-field voxels to set the intensity scale");
  return s / static_cast<double>(n);
}

std::pair<std::vector<std::int32_t>, std::vector<std::int32_t>> split_subjects(
    const PatchSet& set, double val_fraction, std::uint64_t seed) {
  std::set<std::int32_t> unique;
  for (const PatchPair& p : set.pairs) unique.insert(p.subject);
  std::vector<std::int32_t> subjects(unique.begin(), unique.end());
  if (subjects.size() < 2) {
    throw ArgumentError("a train/validation split needs at least two subjects, got " +
                        std::to_string(subjects.size()));
  }
  const auto total = static_cast<long>(subjects.size());
  const long n_val = std::clamp(std::lround(val_fraction * static_cast<double>(total)), 1L, total - 1);
  std::mt19937_64 rng(seed ^ 0x5DEECE66Dull);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  std::vector<std::int32_t> val(subjects.begin(), subjects.begin() + n_val);
  std::vector<std::int32_t> tr(subjects.begin() + n_val, subjects.end());
  std::sort(val.begin(), val.end());
  std::sort(tr.begin(), tr.end());
  return {tr, val};
}

std::pair<ad::Tensor<float>, ad::Tensor<float>> make_batch(const ModelSpec& spec,
                                                           const PatchSet& set,
                                                           std::span<const std::size_t> pairs) {
  const Extent3 lp = spec.lf_patch;
  const Extent3 hp = spec.hf_patch();
  if (!(set.lf_patch == lp) || set.r != spec.r) {
    throw ArgumentError("patch set shape does not match the model");
  }
  const int n = static_cast<int>(pairs.size());
  ad::Tensor<float> x({n, 1, lp.x, lp.y, lp.z});
  ad::Tensor<float> y({n, 1, hp.x, hp.y, hp.z});
  const float inv = static_cast<float>(1.0 / spec.intensity_scale);
  for (int k = 0; k < n; ++k) {
    const PatchPair& p = set.pairs.at(pairs[k]);
    float* xd = x.data.data() + k * lp.count();
    float* yd = y.data.data() + k * hp.count();
    for (std::size_t i = 0; i < p.lf.size(); ++i) xd[i] = p.lf[i] * inv;
    for (std::size_t i = 0; i < p.hf.size(); ++i) yd[i] = p.hf[i] * inv;
  }
  return {std::move(x), std::move(y)};
}

double evaluate_mse(const ModelWeights& weights, const ModelSpec& spec, const PatchSet& set,
                    std::span<const std::size_t> pairs, int batch) {
  if (pairs.empty()) throw ArgumentError("evaluate_mse over no pairs");
  const int m = spec.masksembles.enabled() ? spec.masksembles.masks : 1;
  batch = std::max(m, batch - batch % m);
  double sse = 0.0;
  std::size_t count = 0;
  for (std::size_t lo = 0; lo < pairs.size(); lo += batch) {
    const std::size_t hi = std::min(pairs.size(), lo + batch);
    std::vector<std::size_t> chunk(pairs.begin() + lo, pairs.begin() + hi);
    const std::size_t real = chunk.size();
    // Pad with the last pair so every mask group is full; padded outputs are ignored.
    while (chunk.size() % m != 0) chunk.push_back(chunk.back());
    auto [x, y] = make_batch(spec, set, chunk);
    NetGraph<float> net = build_graph<float>(spec, weights, std::move(x), false);
    const ad::Tensor<float>& out = net.graph.value(net.output);
    const std::size_t per = spec.hf_patch().count();
    for (std::size_t i = 0; i < real * per; ++i) {
      const double d = static_cast<double>(out.data[i]) - y.data[i];
      sse += d * d;
    }
    count += real * per;
  }
  return sse / static_cast<double>(count);
}

TrainResult train(const ModelSpec& spec_in, const PatchSet& set, const TrainConfig& config,
                  const ModelWeights* initial) {
  config.validate();
  spec_in.validate();
  if (set.pairs.empty()) throw ArgumentError("training set is empty");
  const int m = spec_in.masksembles.enabled() ? spec_in.masksembles.masks : 1;
  if (config.batch_size % m != 0) {
    throw ArgumentError("batch size " + std::to_string(config.batch_size) +
                        " is not divisible by the mask count " + std::to_string(m));
  }

  TrainResult res;
  std::tie(res.train_subjects, res.val_subjects) = split_subjects(set, config.val_fraction, config.seed);
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  for (std::size_t i = 0; i < set.pairs.size(); ++i) {
    const auto s = set.pairs[i].subject;
    if (std::binary_search(res.val_subjects.begin(), res.val_subjects.end(), s)) {
      val_idx.push_back(i);
    } else {
      train_idx.push_back(i);
    }
  }
  if (train_idx.empty() || val_idx.empty()) throw ArgumentError("empty train or validation split");

  res.spec = spec_in;
  if (!(res.spec.intensity_scale > 0.0)) res.spec.intensity_scale = auto_intensity_scale(set, train_idx);
  const ModelSpec& spec = res.spec;

  ModelWeights weights = initial ? *initial : initialize_weights(spec, config.seed);
  const bool frozen = config.learning_rate == 0.0;
  AdamState adam;
  std::mt19937_64 rng(config.seed ^ 0xA5A5A5A5DEADBEEFull);

  int batch = std::min<int>(config.batch_size, static_cast<int>(train_idx.size()));
  batch -= batch % m;
  if (batch < 1) throw ArgumentError("fewer training pairs than masks");
  const bool drop_partial = m > 1;

  double best = std::numeric_limits<double>::infinity();
  ModelWeights best_weights = weights;
  std::vector<std::int32_t> batch_subjects;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double sum = 0.0;
    std::size_t seen = 0;
    double lr = adam_learning_rate(config, adam.step + 1);
    for (std::size_t lo = 0; lo < train_idx.size(); lo += batch) {
      const std::size_t hi = std::min(train_idx.size(), lo + batch);
      if (drop_partial && hi - lo < static_cast<std::size_t>(batch)) break;
      const std::span<const std::size_t> chunk(train_idx.data() + lo, hi - lo);
      if (config.batch_observer) {
        batch_subjects.clear();
        for (std::size_t i : chunk) batch_subjects.push_back(set.pairs[i].subject);
        config.batch_observer(batch_subjects);
      }
      auto [x, y] = make_batch(spec, set, chunk);
      NetGraph<float> net = build_graph<float>(spec, weights, std::move(x), true);
      const int target = net.graph.leaf(std::move(y), false);
      const int loss = net.graph.mse(net.output, target);
      const double lv = net.graph.value(loss).data[0];
      if (!std::isfinite(lv)) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
      sum += lv * static_cast<double>(chunk.size());
      seen += chunk.size();
      if (frozen) continue;

      net.graph.backward(loss);
      std::vector<std::vector<float>> grads(weights.params.size());
      for (std::size_t i = 0; i < weights.params.size(); ++i) {
        const auto& [name, id] = net.params[i];
        if (name != weights.params[i].name) throw ArgumentError("parameter order mismatch at " + name);
        const ad::Tensor<float>& g = net.graph.grad(id);
        grads[i] = g.data;
      }
      adam_step(weights.params, grads, adam, config);
      lr = adam_learning_rate(config, adam.step);

      const float mom = static_cast<float>(spec.bn_momentum);
      for (const auto& [name, id] : net.batch_norms) {
        auto upd = [&](const std::string& buf, std::span<const float> batch_stat) {
          for (NamedTensor& t : weights.buffers) {
            if (t.name != buf) continue;
            for (std::size_t c = 0; c < t.data.size(); ++c) {
              t.data[c] = mom * t.data[c] + (1.0f - mom) * batch_stat[c];
            }
            return;
          }
        };
        upd(name + ".mean", net.graph.batch_mean(id));
        upd(name + ".var", net.graph.batch_var(id));
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = seen > 0 ? sum / static_cast<double>(seen) : 0.0;
    rec.val_mse = evaluate_mse(weights, spec, set, val_idx, config.batch_size);
    rec.lr = lr;
    res.history.push_back(rec);
    if (config.epoch_observer) config.epoch_observer(epoch, rec.train_mse, rec.val_mse);
    if (rec.val_mse < best) {
      best = rec.val_mse;
      best_weights = weights;
      res.best_epoch = epoch;
    }
  }
  res.weights = std::move(best_weights);
  return res;
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_mse,val_mse,lr\n";
  char buf[160];
  for (const EpochRecord& r : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g\n", r.epoch, r.train_mse, r.val_mse, r.lr);
    out << buf;
  }
}

}  // namespace iqt
