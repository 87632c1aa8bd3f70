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

#include "iqt/network.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "iqt/error.hpp"
#include "iqt/training.hpp"

namespace iqt {
namespace {

int log2_exact(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return (1 << k) == v ? k : -1;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Shape-only walk: records every parameter, buffer and mask.
struct ShapeBuilder {
  using X = ad::Shape;
  const ModelSpec& spec;
  Architecture arch;

  X conv(const X& x, int cout, int k, const std::string& name, bool bias) {
    arch.params.push_back({name + ".w", {cout, x[1], k, k, k}, InitKind::kGlorot});
    if (bias) arch.params.push_back({name + ".b", {cout, 1, 1, 1, 1}, InitKind::kZeros});
    return {x[0], cout, x[2], x[3], x[4]};
  }
  X conv_t(const X& x, int cout, std::array<int, 3> s, const std::string& name) {
    arch.params.push_back({name + ".w", {x[1], cout, s[0], s[1], s[2]}, InitKind::kGlorot});
    arch.params.push_back({name + ".b", {cout, 1, 1, 1, 1}, InitKind::kZeros});
    return {x[0], cout, x[2] * s[0], x[3] * s[1], x[4] * s[2]};
  }
  X bn(const X& x, const std::string& name) {
    const int c = x[1];
    arch.params.push_back({name + ".gamma", {c, 1, 1, 1, 1}, InitKind::kOnes});
    arch.params.push_back({name + ".beta", {c, 1, 1, 1, 1}, InitKind::kZeros});
    arch.buffers.push_back({name + ".mean", {c, 1, 1, 1, 1}, InitKind::kZeros});
    arch.buffers.push_back({name + ".var", {c, 1, 1, 1, 1}, InitKind::kOnes});
    return x;
  }
  X relu(const X& x) { return x; }
  X pool(const X& x, std::array<int, 3> w) {
    if (x[2] % w[0] || x[3] % w[1] || x[4] % w[2] || x[2] < w[0] || x[3] < w[1] ||
        x[4] < w[2]) {
      throw SpecError("patch " + ad::to_string(x) + " too small for " +
                      std::to_string(spec.levels) + " levels");
    }
    return {x[0], x[1], x[2] / w[0], x[3] / w[1], x[4] / w[2]};
  }
  X concat(const X& a, const X& b) {
    if (a[2] != b[2] || a[3] != b[3] || a[4] != b[4]) {
      throw SpecError("skip shape " + ad::to_string(a) + " does not match decoder shape " +
                      ad::to_string(b));
    }
    return {a[0], a[1] + b[1], a[2], a[3], a[4]};
  }
  X add(const X& a, const X& b) {
    if (a != b) throw SpecError("residual shapes differ: " + ad::to_string(a) + " vs " + ad::to_string(b));
    return a;
  }
  X mask(const X& x, const std::string& name) {
    arch.masks.emplace_back(name, x[1]);
    return x;
  }
  int z(const X& x) const { return x[4]; }
};

template <typename T>
struct GraphBuilder {
  using X = int;
  const ModelSpec& spec;
  const ModelWeights& weights;
  bool training;
  NetGraph<T>& net;

  static ad::Tensor<T> to_tensor(const NamedTensor& t) {
    return ad::Tensor<T>(t.shape, std::vector<T>(t.data.begin(), t.data.end()));
  }
  int param(const std::string& name) {
    const int id = net.graph.leaf(to_tensor(weights.find(name)), training);
    net.params.emplace_back(name, id);
    return id;
  }
  int buffer(const std::string& name) {
    for (const NamedTensor& t : weights.buffers) {
      if (t.name == name) return net.graph.leaf(to_tensor(t), false);
    }
    throw ArgumentError("model weights lack buffer " + name);
  }

  X conv(X x, int cout, int k, const std::string& name, bool bias) {
    (void)cout;
    const int w = param(name + ".w");
    const int b = bias ? param(name + ".b") : -1;
    return k == 3 ? net.graph.conv3(x, w, b) : net.graph.conv1(x, w, b);
  }
  X conv_t(X x, int cout, std::array<int, 3> s, const std::string& name) {
    (void)cout;
    const int w = param(name + ".w");
    const int b = param(name + ".b");
    return net.graph.conv_transpose(x, w, s, b);
  }
  X bn(X x, const std::string& name) {
    const int gamma = param(name + ".gamma");
    const int beta = param(name + ".beta");
    if (training) {
      const int id = net.graph.batch_norm(x, gamma, beta, spec.bn_eps);
      net.batch_norms.emplace_back(name, id);
      return id;
    }
    const int mean = buffer(name + ".mean");
    const int var = buffer(name + ".var");
    return net.graph.batch_norm_inference(x, gamma, beta, mean, var, spec.bn_eps);
  }
  X relu(X x) { return net.graph.relu(x); }
  X pool(X x, std::array<int, 3> w) { return net.graph.max_pool(x, w); }
  X concat(X a, X b) { return net.graph.concat({a, b}); }
  X add(X a, X b) { return net.graph.add(a, b); }
  X mask(X x, const std::string& name) {
    for (const NamedTensor& t : weights.masks) {
      if (t.name == name) return net.graph.channel_mask(x, net.graph.leaf(to_tensor(t), false));
    }
    throw ArgumentError("model weights lack mask " + name);
  }
  int z(X x) const { return net.graph.value(x).shape[4]; }
};

template <typename B>
typename B::X residual_block(B& b, const ModelSpec& s, typename B::X x, int f,
                             const std::string& name) {
  auto h = x;
  for (int i = 0; i < s.convs_per_level; ++i) {
    const std::string n = name + ".conv" + std::to_string(i);
    h = b.conv(h, f, 3, n, false);
    if (s.masksembles.enabled()) h = b.mask(h, name + ".mask" + std::to_string(i));
    if (i + 1 < s.convs_per_level) h = b.relu(b.bn(h, n + ".bn"));
  }
  auto sc = b.conv(x, f, 1, name + ".skip", false);
  return b.relu(b.bn(b.add(h, sc), name + ".bn"));
}

template <typename B>
typename B::X bottleneck_block(B& b, const ModelSpec& s, typename B::X x, int f, int u,
                               const std::string& name) {
  auto t = b.conv_t(x, f, {1, 1, u}, name + ".up");
  auto p = b.relu(b.bn(b.conv(t, f, 1, name + ".in", false), name + ".in.bn"));
  const int half = std::max(1, f / 2);
  for (int i = 0; i < s.bottleneck_depth; ++i) {
    const std::string n = name + ".mid" + std::to_string(i);
    p = b.relu(b.bn(b.conv(p, half, 3, n, false), n + ".bn"));
  }
  p = b.relu(b.bn(b.conv(p, f, 1, name + ".out", false), name + ".out.bn"));
  return b.add(t, p);
}

template <typename B>
typename B::X aniso_unet(B& b, const ModelSpec& s, typename B::X input) {
  const int a = log2_exact(s.r);
  const int hf_z = s.r * s.lf_patch.z;
  std::vector<typename B::X> enc;
  auto h = input;
  for (int i = 0; i < s.levels; ++i) {
    if (i > 0) {
      const std::array<int, 3> w = (i - 1 < a) ? std::array<int, 3>{2, 2, 1}
                                               : std::array<int, 3>{2, 2, 2};
      h = b.pool(h, w);
    }
    h = residual_block(b, s, h, s.base_filters << i, "enc" + std::to_string(i));
    enc.push_back(h);
  }
  auto d = enc.back();
  for (int i = s.levels - 2; i >= 0; --i) {
    const int f = s.base_filters << i;
    const int target_z = hf_z >> i;
    const int fz = target_z / b.z(d);
    auto up = b.conv_t(d, f, {2, 2, fz}, "dec" + std::to_string(i) + ".up");
    auto skip = enc[i];
    const int u = target_z / b.z(skip);
    if (u > 1) skip = bottleneck_block(b, s, skip, f, u, "skip" + std::to_string(i));
    d = residual_block(b, s, b.concat(skip, up), f, "dec" + std::to_string(i));
  }
  return b.conv(d, 1, 1, "head", true);
}

std::size_t find_index(const std::vector<NamedTensor>& list, const std::string& name) {
  for (std::size_t i = 0; i < list.size(); ++i) {
    if (list[i].name == name) return i;
  }
  return list.size();
}

}  // namespace

void ModelSpec::validate() const {
  const int a = log2_exact(r);
  if (a < 1 || a > 3) throw SpecError("r must be 2, 4 or 8, got " + std::to_string(r));
  if (levels < 2) throw SpecError("need at least 2 levels");
  if (convs_per_level < 1) throw SpecError("need at least one convolution per level");
  if (base_filters < 1) throw SpecError("base_filters must be positive");
  if (bottleneck_depth < 0) throw SpecError("bottleneck_depth must be non-negative");
  if (lf_patch.x < 1 || lf_patch.y < 1 || lf_patch.z < 1) throw SpecError("empty patch");
  if (lf_step.x < 1 || lf_step.y < 1 || lf_step.z < 1 || lf_step.x > lf_patch.x ||
      lf_step.y > lf_patch.y || lf_step.z > lf_patch.z) {
    throw SpecError("patch step must lie in [1, patch]");
  }
  const int xy_div = 1 << (levels - 1);
  const int z_div = 1 << std::max(0, levels - 1 - a);
  const int hf_z = r * lf_patch.z;
  if (lf_patch.x % xy_div || lf_patch.y % xy_div || lf_patch.z % z_div ||
      hf_z % xy_div) {
    throw SpecError("patch (" + std::to_string(lf_patch.x) + ", " + std::to_string(lf_patch.y) +
                    ", " + std::to_string(lf_patch.z) + ") too small for " +
                    std::to_string(levels) + " levels at r=" + std::to_string(r));
  }
  if (masksembles.masks < 0) throw SpecError("mask count must be non-negative");
  if (masksembles.enabled() && !(masksembles.scale >= 1.0)) {
    throw SpecError("masksembles scale must be at least 1");
  }
  if (!std::isfinite(intensity_scale)) throw SpecError("intensity_scale must be finite");
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw SpecError("bn_momentum must be in [0, 1)");
  if (!(bn_eps > 0.0)) throw SpecError("bn_eps must be positive");
}

ModelSpec ModelSpec::standard(int r) {
  ModelSpec s;
  s.r = r;
  const int pz = r > 0 ? 32 / r : 0;
  s.lf_patch = {32, 32, pz};
  s.lf_step = {16, 16, std::max(1, 16 / std::max(1, r))};
  return s;
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{
      {"r", s.r},
      {"levels", s.levels},
      {"convs_per_level", s.convs_per_level},
      {"base_filters", s.base_filters},
      {"bottleneck_depth", s.bottleneck_depth},
      {"lf_patch", {s.lf_patch.x, s.lf_patch.y, s.lf_patch.z}},
      {"lf_step", {s.lf_step.x, s.lf_step.y, s.lf_step.z}},
      {"masks", s.masksembles.masks},
      {"mask_scale", s.masksembles.scale},
      {"intensity_scale", s.intensity_scale},
      {"bn_momentum", s.bn_momentum},
      {"bn_eps", s.bn_eps},
  };
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  s.r = j.value("r", s.r);
  s.levels = j.value("levels", s.levels);
  s.convs_per_level = j.value("convs_per_level", s.convs_per_level);
  s.base_filters = j.value("base_filters", s.base_filters);
  s.bottleneck_depth = j.value("bottleneck_depth", s.bottleneck_depth);
  auto extent = [&](const char* key, Extent3& e) {
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<int>>();
    if (v.size() != 3) throw ArgumentError(std::string(key) + " must have 3 entries");
    e = {v[0], v[1], v[2]};
  };
  extent("lf_patch", s.lf_patch);
  extent("lf_step", s.lf_step);
  s.masksembles.masks = j.value("masks", s.masksembles.masks);
  s.masksembles.scale = j.value("mask_scale", s.masksembles.scale);
  s.intensity_scale = j.value("intensity_scale", s.intensity_scale);
  s.bn_momentum = j.value("bn_momentum", s.bn_momentum);
  s.bn_eps = j.value("bn_eps", s.bn_eps);
}

const NamedTensor& ModelWeights::find(const std::string& name) const {
  const std::size_t i = find_index(params, name);
  if (i == params.size()) throw ArgumentError("model weights lack parameter " + name);
  return params[i];
}

NamedTensor& ModelWeights::find(const std::string& name) {
  const std::size_t i = find_index(params, name);
  if (i == params.size()) throw ArgumentError("model weights lack parameter " + name);
  return params[i];
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const NamedTensor& t : params) n += t.data.size();
  return n;
}

Architecture describe(const ModelSpec& spec) {
  spec.validate();
  ShapeBuilder b{spec, {}};
  const ad::Shape in{1, 1, spec.lf_patch.x, spec.lf_patch.y, spec.lf_patch.z};
  b.arch.output = aniso_unet(b, spec, in);
  const Extent3 hf = spec.hf_patch();
  if (b.arch.output != ad::Shape{1, 1, hf.x, hf.y, hf.z}) {
    throw SpecError("network output " + ad::to_string(b.arch.output) +
                    " does not match the high-field patch");
  }
  if (spec.masksembles.enabled()) {
    for (const auto& [name, c] : b.arch.masks) make_masks(spec.masksembles.masks, c, spec.masksembles.scale);
  }
  return b.arch;
}

std::vector<float> make_masks(int m, int channels, double scale) {
  if (m < 1 || channels < 1) throw SpecError("mask count and channels must be positive");
  if (!(scale >= 1.0)) throw SpecError("masksembles scale must be at least 1");
  const int k = std::clamp(static_cast<int>(std::lround(channels / scale)), 1, channels);
  if (static_cast<long>(k) * m < channels) {
    throw SpecError("masksembles: " + std::to_string(m) + " masks of " + std::to_string(k) +
                    " channels leave some of " + std::to_string(channels) + " channels unused");
  }
  std::vector<float> out(static_cast<std::size_t>(m) * channels, 0.0f);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * channels + (i * k + j) % channels] = 1.0f;
  }
  return out;
}

ModelWeights initialize_weights(const ModelSpec& spec, std::uint64_t seed) {
  const Architecture arch = describe(spec);
  ModelWeights w;
  std::uint64_t counter = 0;
  for (const ParamInfo& p : arch.params) {
    NamedTensor t{p.name, p.shape, {}};
    const std::size_t n = ad::element_count(p.shape);
    switch (p.init) {
      case InitKind::kGlorot:
        t.data = glorot_init(p.shape, splitmix64(seed ^ splitmix64(++counter)));
        break;
      case InitKind::kZeros:
        t.data.assign(n, 0.0f);
        break;
      case InitKind::kOnes:
        t.data.assign(n, 1.0f);
        break;
    }
    w.params.push_back(std::move(t));
  }
  for (const ParamInfo& p : arch.buffers) {
    w.buffers.push_back({p.name, p.shape,
                         std::vector<float>(ad::element_count(p.shape),
                                            p.init == InitKind::kOnes ? 1.0f : 0.0f)});
  }
  if (spec.masksembles.enabled()) {
    for (const auto& [name, c] : arch.masks) {
      w.masks.push_back({name, {spec.masksembles.masks, c, 1, 1, 1},
                         make_masks(spec.masksembles.masks, c, spec.masksembles.scale)});
    }
  }
  return w;
}

template <typename T>
NetGraph<T> build_graph(const ModelSpec& spec, const ModelWeights& weights, ad::Tensor<T> input,
                        bool training) {
  spec.validate();
  const Extent3 p = spec.lf_patch;
  if (input.shape[1] != 1 || input.shape[2] != p.x || input.shape[3] != p.y ||
      input.shape[4] != p.z || input.shape[0] < 1) {
    throw ShapeError("network input " + ad::to_string(input.shape) + " does not match (N, 1, " +
                     std::to_string(p.x) + ", " + std::to_string(p.y) + ", " +
                     std::to_string(p.z) + ")");
  }
  if (spec.masksembles.enabled() && input.shape[0] % spec.masksembles.masks != 0) {
    throw ShapeError("batch of " + std::to_string(input.shape[0]) + " not divisible by " +
                     std::to_string(spec.masksembles.masks) + " masks");
  }
  NetGraph<T> net;
  net.input = net.graph.leaf(std::move(input), false);
  GraphBuilder<T> b{spec, weights, training, net};
  net.output = aniso_unet(b, spec, net.input);
  return net;
}

template NetGraph<float> build_graph<float>(const ModelSpec&, const ModelWeights&,
                                            ad::Tensor<float>, bool);
template NetGraph<double> build_graph<double>(const ModelSpec&, const ModelWeights&,
                                              ad::Tensor<double>, bool);

ad::Tensor<float> forward(const ModelWeights& weights, const ModelSpec& spec,
                          const ad::Tensor<float>& batch) {
  if (!(spec.intensity_scale > 0.0)) throw ArgumentError("model has no intensity scale");
  ad::Tensor<float> in = batch;
  const float inv = static_cast<float>(1.0 / spec.intensity_scale);
  for (float& v : in.data) v *= inv;
  NetGraph<float> net = build_graph<float>(spec, weights, std::move(in), false);
  ad::Tensor<float> out = net.graph.value(net.output);
  const float scale = static_cast<float>(spec.intensity_scale);
  for (float& v : out.data) v *= scale;
  return out;
}

Uncertainty predict_with_uncertainty(const ModelWeights& weights, const ModelSpec& spec,
                                     const std::vector<float>& lf_patch) {
  if (!spec.masksembles.enabled()) {
    throw CapabilityError("predict_with_uncertainty needs a model with masksembles");
  }
  const int m = spec.masksembles.masks;
  const Extent3 p = spec.lf_patch;
  if (lf_patch.size() != p.count()) throw ShapeError("patch size does not match the model");
  ad::Tensor<float> batch({m, 1, p.x, p.y, p.z});
  for (int i = 0; i < m; ++i) std::copy(lf_patch.begin(), lf_patch.end(), batch.data.begin() + i * p.count());
  const ad::Tensor<float> out = forward(weights, spec, batch);
  const std::size_t n = spec.hf_patch().count();
  Uncertainty u;
  u.mean.assign(n, 0.0);
  u.variance.assign(n, 0.0);
  const double mm = static_cast<double>(m) * m;
  for (std::size_t v = 0; v < n; ++v) {
    double s = 0.0;
    for (int i = 0; i < m; ++i) s += out.data[i * n + v];
    u.mean[v] = s / m;
    // Pairwise form: exact zero for identical outputs.
    double q = 0.0;
    for (int i = 0; i < m; ++i) {
      const double oi = out.data[i * n + v];
      for (int j = i + 1; j < m; ++j) {
        const double d = oi - static_cast<double>(out.data[j * n + v]);
        q += d * d;
      }
    }
    u.variance[v] = q / mm;
  }
  return u;
}

Volume3D enhance_with(const Volume3D& lf, int r, const Extent3& lf_patch, const Extent3& lf_step,
                      const PatchPredictor& predict) {
  const PatchGrid grid = PatchGrid::make(lf.dims(), r, lf_patch, lf_step);
  auto patches = extract_patches<float>(lf, grid.lf);
  std::vector<std::size_t> live;
  std::vector<std::vector<float>> inputs;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (std::any_of(patches[i].begin(), patches[i].end(), [](float v) { return v != 0.0f; })) {
      live.push_back(i);
      inputs.push_back(std::move(patches[i]));
    }
  }
  const GridLayout hl = grid.hf();
  std::vector<std::vector<float>> hf(grid.size(), std::vector<float>(hl.patch.count(), 0.0f));
  if (!inputs.empty()) {
    auto pred = predict(inputs);
    if (pred.size() != inputs.size()) throw ShapeError("predictor returned the wrong patch count");
    for (std::size_t k = 0; k < live.size(); ++k) {
      if (pred[k].size() != hl.patch.count()) throw ShapeError("predictor returned a wrong-sized patch");
      hf[live[k]] = std::move(pred[k]);
    }
  }
  Geometry g = lf.geometry();
  g.slice_thickness /= r;
  g.slice_gap /= r;
  return blend_clip<float>(hf, hl, g);
}

Volume3D enhance_volume(const ModelWeights& weights, const ModelSpec& spec, const Volume3D& lf,
                        const LandmarkTable* table, const EnhanceOptions& opts) {
  spec.validate();
  const Volume3D input = table ? normalize(lf, *table) : lf;
  const int batch = std::max(1, opts.batch);
  const Extent3 p = spec.lf_patch;
  auto predictor = [&](const std::vector<std::vector<float>>& in) {
    std::vector<std::vector<float>> out(in.size());
    const std::size_t nb = (in.size() + batch - 1) / batch;
    auto run = [&](std::size_t first, std::size_t stride) {
      for (std::size_t b = first; b < nb; b += stride) {
        const std::size_t lo = b * batch;
        const std::size_t hi = std::min(in.size(), lo + batch);
        ad::Tensor<float> t({static_cast<int>(hi - lo), 1, p.x, p.y, p.z});
        for (std::size_t i = lo; i < hi; ++i) std::copy(in[i].begin(), in[i].end(), t.data.begin() + (i - lo) * p.count());
        const ad::Tensor<float> o = forward(weights, spec, t);
        const std::size_t n = spec.hf_patch().count();
        for (std::size_t i = lo; i < hi; ++i) {
          out[i].assign(o.data.begin() + (i - lo) * n, o.data.begin() + (i - lo + 1) * n);
        }
      }
    };
    const int threads = std::max(1, opts.threads);
    if (threads == 1) {
      run(0, 1);
    } else {
      std::vector<std::thread> pool;
      for (int t = 0; t < threads; ++t) pool.emplace_back(run, static_cast<std::size_t>(t), static_cast<std::size_t>(threads));
      for (auto& th : pool) th.join();
    }
    return out;
  };
  return enhance_with(input, spec.r, spec.lf_patch, spec.lf_step, predictor);
}

EnhancedWithUncertainty enhance_with_uncertainty(const ModelWeights& weights,
                                                 const ModelSpec& spec, const Volume3D& lf,
                                                 const LandmarkTable* table) {
  if (!spec.masksembles.enabled()) {
    throw CapabilityError("uncertainty maps need a model with masksembles");
  }
  const Volume3D input = table ? normalize(lf, *table) : lf;
  std::vector<std::vector<float>> variances;
  auto mean_predictor = [&](const std::vector<std::vector<float>>& in) {
    std::vector<std::vector<float>> out;
    for (const auto& patch : in) {
      const Uncertainty u = predict_with_uncertainty(weights, spec, patch);
      out.emplace_back(u.mean.begin(), u.mean.end());
      variances.emplace_back(u.variance.begin(), u.variance.end());
    }
    return out;
  };
  EnhancedWithUncertainty res;
  res.mean = enhance_with(input, spec.r, spec.lf_patch, spec.lf_step, mean_predictor);
  std::size_t next = 0;
  auto var_predictor = [&](const std::vector<std::vector<float>>& in) {
    std::vector<std::vector<float>> out;
    for (std::size_t i = 0; i < in.size(); ++i) out.push_back(std::move(variances.at(next++)));
    return out;
  };
  res.variance = enhance_with(input, spec.r, spec.lf_patch, spec.lf_step, var_predictor);
  return res;
}

}  // namespace iqt
