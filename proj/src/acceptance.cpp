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

#include "iqt/acceptance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "iqt/cli.hpp"
#include "iqt/digest.hpp"
#include "iqt/error.hpp"
#include "iqt/metrics.hpp"
#include "iqt/network.hpp"
#include "iqt/normalizer.hpp"
#include "iqt/patching.hpp"
#include "iqt/phantom.hpp"
#include "iqt/simulator.hpp"
#include "iqt/training.hpp"

namespace iqt {
namespace {

namespace fs = std::filesystem;

std::string strf(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  char buf[512];
  std::vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  return buf;
}

struct Verdict {
  bool ok = true;
  std::vector<std::string> notes;

  void check(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      notes.push_back(what);
    }
  }
  CriterionResult finish(int id, const std::string& summary) const {
    std::string detail = summary;
    for (std::size_t i = 0; i < notes.size() && i < 4; ++i) detail += "; " + notes[i];
    if (notes.size() > 4) detail += strf("; +%zu more", notes.size() - 4);
    return {id, criterion_name(id), ok, detail};
  }
};

Volume3D random_volume(const Dims& d, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Volume3D v(d, Geometry{});
  for (double& x : v.data()) x = u(rng);
  return v;
}

bool bit_equal(const Volume3D& a, const Volume3D& b) {
  if (!(a.dims() == b.dims()) || !(a.geometry() == b.geometry())) return false;
  return std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

void progress(const AcceptanceOptions& o, const std::string& msg) {
  if (o.verbose) std::cerr << "  " << msg << "\n";
}

// Mean over voxels whose tissue fraction is at least one half.
double thresholded_mean(const Volume3D& vol, const Volume3D& mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < vol.size(); ++i) {
    if (mask.data()[i] >= 0.5) {
      sum += vol.data()[i];
      ++n;
    }
  }
  if (n == 0) throw DegenerateError("empty thresholded mask");
  return sum / static_cast<double>(n);
}

CriterionResult simulator_fidelity(const AcceptanceOptions& o) {
  const SnrDistribution dist = SnrDistribution::t1w().degenerate();
  PhantomConfig pc;
  pc.dims = {64, 64, 64};
  double worst_snr = 0.0;
  double worst_var = 0.0;
  Verdict v;
  for (int i = 0; i < 20; ++i) {
    pc.seed = 100 + static_cast<std::uint64_t>(i);
    const Phantom ph = generate_phantom(pc);
    const SimulationResult res = simulate(ph.image, ph.masks, 4, dist,
                                          SigmaPolicy::fix_white_matter_mean(), 500 + i);
    const double sb = estimate_background_sigma(res.image, res.background);
    const double snr_wm = thresholded_mean(res.image, res.masks.wm) / sb;
    const double snr_gm = thresholded_mean(res.image, res.masks.gm) / sb;
    const double e_wm = std::fabs(snr_wm - res.sample.snr_wm) / res.sample.snr_wm;
    const double e_gm = std::fabs(snr_gm - res.sample.snr_gm) / res.sample.snr_gm;
    const double var = res.sample.sigma_x * res.sample.sigma_x -
                       res.sample.sigma_y * res.sample.sigma_y;
    const double e_var = std::fabs(sb * sb - var) / var;
    worst_snr = std::max({worst_snr, e_wm, e_gm});
    worst_var = std::max(worst_var, e_var);
    v.check(e_wm <= 0.05, strf("sim %d WM SNR %.3f vs %.3f", i, snr_wm, res.sample.snr_wm));
    v.check(e_gm <= 0.05, strf("sim %d GM SNR %.3f vs %.3f", i, snr_gm, res.sample.snr_gm));
    v.check(e_var <= 0.10, strf("sim %d background variance %.4f vs %.4f", i, sb * sb, var));
  }
  progress(o, "simulator fidelity done");
  return v.finish(1, strf("20 simulations, worst SNR error %.2f%%, worst variance error %.2f%%",
                          100.0 * worst_snr, 100.0 * worst_var));
}

CriterionResult simulator_identity(const AcceptanceOptions&) {
  Verdict v;
  for (int s = 0; s < 5; ++s) {
    const Dims d{12 + s, 10, 20 + 3 * s};
    Volume3D vol = random_volume(d, 40 + s, 0.0, 200.0);
    const Volume3D zeros(d, Geometry{});
    const TissueMasks masks{zeros, zeros, Volume3D(d, Geometry{}, 1.0)};
    const SimulationResult res = simulate(vol, masks, 1, SnrDistribution::t1w(),
                                          SigmaPolicy::explicit_levels(3.0, 3.0), 9 + s);
    const Volume3D ref = blur_downsample_z(vol, 1);
    v.check(bit_equal(res.image, ref), strf("seed %d differs", s));
  }
  return v.finish(2, "5 volumes compared bitwise");
}

CriterionResult distribution_sampling(const AcceptanceOptions&) {
  Verdict v;
  constexpr int kDraws = 100000;
  std::string summary;
  for (const char* name : {"t1w", "t2w", "flair"}) {
    const SnrDistribution p = SnrDistribution::named(name);
    double m[2] = {0.0, 0.0};
    std::vector<std::array<double, 2>> xs(kDraws);
    for (int i = 0; i < kDraws; ++i) {
      const ContrastSample s = sample_contrast(p, SigmaPolicy::explicit_levels(1.0, 0.0), 0.0,
                                               static_cast<std::uint64_t>(i));
      xs[i] = {s.snr_wm, s.snr_gm};
      m[0] += s.snr_wm;
      m[1] += s.snr_gm;
    }
    m[0] /= kDraws;
    m[1] /= kDraws;
    double c[2][2] = {{0, 0}, {0, 0}};
    for (const auto& x : xs) {
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) c[a][b] += (x[a] - m[a]) * (x[b] - m[b]);
    }
    double diff = 0.0;
    double norm = 0.0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) {
        c[a][b] /= kDraws - 1;
        diff += (c[a][b] - p.covariance[a][b]) * (c[a][b] - p.covariance[a][b]);
        norm += p.covariance[a][b] * p.covariance[a][b];
      }
    const double cov_err = std::sqrt(diff / norm);
    double mean_err = 0.0;
    for (int a = 0; a < 2; ++a) mean_err = std::max(mean_err, std::fabs(m[a] - p.mean[a]) / p.mean[a]);
    v.check(mean_err <= 0.01, strf("%s mean error %.3f%%", name, 100.0 * mean_err));
    v.check(cov_err <= 0.05, strf("%s covariance error %.3f%%", name, 100.0 * cov_err));
    summary += strf("%s%s mean %.3f%% cov %.3f%%", summary.empty() ? "" : ", ", name,
                    100.0 * mean_err, 100.0 * cov_err);
  }
  return v.finish(3, summary);
}

std::size_t grid_count(int n, int p, int s) {
  if (n <= p) return 1;
  return static_cast<std::size_t>((n - p + s - 1) / s + 1);
}

CriterionResult patch_round_trip(const AcceptanceOptions&) {
  Verdict v;
  int runs = 0;
  for (int r : {2, 4, 8}) {
    const Extent3 patch{32, 32, 32 / r};
    const Extent3 step{16, 16, 16 / r};
    std::mt19937_64 rng(1234 + r);
    std::uniform_int_distribution<int> dxy(20, 72);
    std::uniform_int_distribution<int> dz(3, 80 / r);
    for (int s = 0; s < 5; ++s) {
      const Dims lf_dims{dxy(rng), dxy(rng), dz(rng)};
      const PatchGrid grid = PatchGrid::make(lf_dims, r, patch, step);
      const Dims hf_dims{lf_dims.nx, lf_dims.ny, r * lf_dims.nz};
      const Volume3D lf = random_volume(lf_dims, rng());
      const Volume3D hf = random_volume(hf_dims, rng());
      const auto lp = extract_patches<double>(lf, grid.lf);
      const auto hp = extract_patches<double>(hf, grid.hf());
      v.check(bit_equal(blend_clip(lp, grid.lf, lf.geometry()), lf),
              "LF round trip " + to_string(lf_dims));
      v.check(bit_equal(blend_clip(hp, grid.hf(), hf.geometry()), hf),
              "HF round trip " + to_string(hf_dims));
      const std::size_t expect = grid_count(lf_dims.nx, patch.x, step.x) *
                                 grid_count(lf_dims.ny, patch.y, step.y) *
                                 grid_count(lf_dims.nz, patch.z, step.z);
      v.check(grid.size() == expect && hp.size() == expect,
              strf("count %zu vs %zu at r=%d", grid.size(), expect, r));
      ++runs;
    }
  }
  const PatchGrid cube = PatchGrid::make({64, 64, 64}, 1, {32, 32, 32}, {16, 16, 16});
  v.check(cube.size() == 27, strf("64^3 step 16 gives %zu patches", cube.size()));
  return v.finish(4, strf("%d volumes bit-exact, 64^3 grid holds %zu patches", runs, cube.size()));
}

ad::Tensor<double> random_tensor(const ad::Shape& s, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ad::Tensor<double> t(s, 0.0);
  for (double& x : t.data) x = n(rng);
  return t;
}

constexpr double kFdStep = 1e-4;

// Builds op(inputs), adds an MSE loss against a random target and checks
// every differentiable leaf.
double check_op(ad::OpKind kind, std::uint64_t seed) {
  using ad::Graph;
  using ad::OpKind;
  std::mt19937_64 rng(seed);
  Graph<double> g;
  std::vector<int> leaves;
  auto leaf = [&](const ad::Shape& s, double scale = 1.0) {
    const int id = g.leaf(random_tensor(s, rng, scale), true);
    leaves.push_back(id);
    return id;
  };
  int out = -1;
  switch (kind) {
    case OpKind::kConv3: {
      const int x = leaf({2, 3, 5, 4, 3});
      out = g.conv3(x, leaf({2, 3, 3, 3, 3}, 0.3), leaf({2, 1, 1, 1, 1}));
      break;
    }
    case OpKind::kConv1: {
      const int x = leaf({2, 3, 4, 3, 2});
      out = g.conv1(x, leaf({4, 3, 1, 1, 1}), leaf({4, 1, 1, 1, 1}));
      break;
    }
    case OpKind::kConvTranspose: {
      const int x = leaf({2, 3, 2, 3, 2});
      out = g.conv_transpose(x, leaf({3, 2, 2, 2, 4}), {2, 2, 4}, leaf({2, 1, 1, 1, 1}));
      break;
    }
    case OpKind::kMaxPool:
      out = g.max_pool(leaf({2, 2, 4, 4, 4}), {2, 2, 2});
      break;
    case OpKind::kRelu:
      out = g.relu(leaf({2, 2, 3, 3, 3}));
      break;
    case OpKind::kBatchNorm: {
      const int x = leaf({3, 2, 3, 2, 2}, 2.0);
      out = g.batch_norm(x, leaf({2, 1, 1, 1, 1}), leaf({2, 1, 1, 1, 1}), 1e-5);
      const int mean = g.leaf(random_tensor({2, 1, 1, 1, 1}, rng), false);
      ad::Tensor<double> var({2, 1, 1, 1, 1}, std::vector<double>{0.7, 1.9});
      const int vid = g.leaf(std::move(var), false);
      const int inf = g.batch_norm_inference(out, leaf({2, 1, 1, 1, 1}), leaf({2, 1, 1, 1, 1}),
                                             mean, vid, 1e-5);
      out = inf;
      break;
    }
    case OpKind::kConcat:
      out = g.concat({leaf({2, 2, 3, 2, 2}), leaf({2, 3, 3, 2, 2}), leaf({2, 1, 3, 2, 2})});
      break;
    case OpKind::kAdd:
      out = g.add(leaf({2, 2, 3, 2, 2}), leaf({2, 2, 3, 2, 2}));
      break;
    case OpKind::kChannelMask: {
      const int x = leaf({4, 3, 2, 2, 2});
      ad::Tensor<double> m({2, 3, 1, 1, 1}, std::vector<double>{1, 0, 1, 0, 1, 1});
      out = g.channel_mask(x, g.leaf(std::move(m), false));
      break;
    }
    case OpKind::kMse: {
      const int a = leaf({2, 2, 3, 2, 2});
      const int b = leaf({2, 2, 3, 2, 2});
      out = g.mse(a, b);
      break;
    }
    default:
      throw ArgumentError("no gradient check for this op");
  }
  int loss = out;
  if (kind != OpKind::kMse) {
    const int target = g.leaf(random_tensor(g.value(out).shape, rng), false);
    loss = g.mse(out, target);
  }
  double worst = 0.0;
  for (int id : leaves) worst = std::max(worst, ad::gradient_check(g, loss, id, kFdStep));
  return worst;
}

CriterionResult gradient_correctness(const AcceptanceOptions& o) {
  using ad::OpKind;
  Verdict v;
  constexpr int kSeeds = 5;
  double worst_op = 0.0;
  for (OpKind k : {OpKind::kConv3, OpKind::kConv1, OpKind::kConvTranspose, OpKind::kMaxPool,
                   OpKind::kRelu, OpKind::kBatchNorm, OpKind::kConcat, OpKind::kAdd,
                   OpKind::kMse, OpKind::kChannelMask}) {
    for (int s = 0; s < kSeeds; ++s) {
      const double e = check_op(k, 77 + 13 * s + static_cast<int>(k));
      worst_op = std::max(worst_op, e);
      v.check(e <= 1e-5, strf("%s seed %d rel error %.2e", ad::op_name(k), s, e));
    }
  }
  progress(o, "per-op checks done");

  ModelSpec spec;
  spec.r = 4;
  spec.levels = 3;
  spec.base_filters = 4;
  spec.lf_patch = {8, 8, 2};
  spec.lf_step = {4, 4, 1};
  spec.masksembles = {2, 2.0};
  double worst_model = 0.0;
  for (int s = 0; s < kSeeds; ++s) {
    const ModelWeights w = initialize_weights(spec, 300 + s);
    std::mt19937_64 rng(900 + s);
    NetGraph<double> net = build_graph<double>(
        spec, w, random_tensor({2, 1, 8, 8, 2}, rng), true);
    const int target = net.graph.leaf(random_tensor(net.graph.value(net.output).shape, rng), false);
    const int loss = net.graph.mse(net.output, target);
    for (const auto& [name, id] : net.params) {
      const std::size_t n = net.graph.value(id).size();
      std::vector<std::size_t> picks;
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (int k = 0; k < 3; ++k) picks.push_back(pick(rng));
      const double e = ad::gradient_check(net.graph, loss, id, kFdStep, picks);
      worst_model = std::max(worst_model, e);
      v.check(e <= 1e-4, strf("model seed %d %s rel error %.2e", s, name.c_str(), e));
    }
  }
  progress(o, "model checks done");
  return v.finish(5, strf("10 op kinds x %d seeds worst %.2e, toy model x %d seeds worst %.2e",
                          kSeeds, worst_op, kSeeds, worst_model));
}

ModelSpec toy_spec(int r) {
  ModelSpec s;
  s.r = r;
  s.levels = 3;
  s.base_filters = 4;
  s.lf_patch = {16, 16, std::max(2, 16 / r)};
  s.lf_step = {8, 8, std::max(1, 8 / r)};
  return s;
}

CriterionResult shape_contract(const AcceptanceOptions& o) {
  Verdict v;
  for (int r : {2, 4, 8}) {
    const ModelSpec spec = ModelSpec::standard(r);
    const ad::Shape want{1, 1, 32, 32, 32};
    const Architecture arch = describe(spec);
    v.check(arch.output == want, strf("r=%d described output %s", r, ad::to_string(arch.output).c_str()));
    const ModelWeights w = initialize_weights(spec, r);
    std::mt19937_64 rng(r);
    ad::Tensor<float> in({1, 1, 32, 32, 32 / r}, 0.0f);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (float& x : in.data) x = u(rng);
    const ad::Tensor<float> out = forward(w, spec, in);
    v.check(out.shape == want, strf("r=%d forward output %s", r, ad::to_string(out.shape).c_str()));

    const ModelSpec toy = toy_spec(r);
    const Volume3D lf = random_volume({27, 21, 7}, 50 + r, 1.0, 2.0);
    const Volume3D hf = enhance_volume(initialize_weights(toy, 1), toy, lf, nullptr);
    v.check(hf.dims() == Dims{27, 21, 7 * r}, strf("r=%d enhanced dims %s", r, to_string(hf.dims()).c_str()));
    progress(o, strf("shape contract r=%d", r));
  }
  return v.finish(6, "32x32x(32/r) maps to 32x32x32 for r in {2,4,8}; enhancement emits r x slices");
}

struct Subject {
  Volume3D hf;
  Volume3D lf;
  VoxelMask background;
};

Subject make_subject(std::uint64_t seed, int r) {
  PhantomConfig pc;
  pc.dims = {64, 64, 64};
  pc.seed = seed;
  Phantom ph = generate_phantom(pc);
  const SimulationResult res = simulate(ph.image, ph.masks, r, SnrDistribution::t1w().degenerate(),
                                        SigmaPolicy::fix_white_matter_mean(), 17);
  return {std::move(ph.image), apply_background(res.image, res.background), res.background};
}

CriterionResult learning_beats_baseline(const AcceptanceOptions& o) {
  constexpr int r = 4;
  ModelSpec spec;
  spec.r = r;
  spec.levels = 3;
  spec.base_filters = 4;
  spec.lf_patch = {16, 16, 4};
  spec.lf_step = {8, 8, 2};
  spec.intensity_scale = 0.0;

  PatchSet set;
  set.r = r;
  set.lf_patch = spec.lf_patch;
  constexpr int kSubjects = 3;
  for (int s = 0; s < kSubjects; ++s) {
    const Subject sub = make_subject(11 + s, r);
    set.append(extract_pairs(sub.lf, sub.hf, r, spec.lf_patch, spec.lf_step,
                             kDefaultBackgroundThreshold, &sub.background, s));
  }
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.decay = 0.0;
  cfg.batch_size = 8;
  cfg.epochs = 30;
  cfg.val_fraction = 1.0 / kSubjects;
  cfg.seed = 5;
  if (o.verbose) {
    cfg.epoch_observer = [](int e, double t, double val) {
      std::cerr << strf("  epoch %d train %.5f val %.5f\n", e, t, val);
    };
  }
  const TrainResult tr = train(spec, set, cfg);
  std::size_t n_train = 0;
  for (const PatchPair& p : set.pairs) {
    if (std::find(tr.train_subjects.begin(), tr.train_subjects.end(), p.subject) !=
        tr.train_subjects.end()) {
      ++n_train;
    }
  }
  const double first_val = tr.history.front().val_mse;
  const double best_val = tr.history.at(tr.best_epoch - 1).val_mse;

  const Subject test = make_subject(99, r);
  const Volume3D est = enhance_volume(tr.weights, tr.spec, test.lf, nullptr);
  const Volume3D cubic = cubic_upsample_z(test.lf, r);
  const double p_net = psnr(est, test.hf);
  const double p_cub = psnr(cubic, test.hf);
  const double s_net = ssim(est, test.hf);
  const double s_cub = ssim(cubic, test.hf);

  Verdict v;
  v.check(n_train >= 200, strf("only %zu training patches", n_train));
  v.check(p_net >= p_cub + 1.0, "PSNR margin below 1 dB");
  v.check(s_net > s_cub, "SSIM not above cubic");
  v.check(best_val <= 0.5 * first_val, "validation MSE did not halve");
  return v.finish(7, strf("%zu train patches; PSNR %.2f vs cubic %.2f dB; SSIM %.4f vs %.4f; "
                          "val MSE %.5f (epoch %d) vs %.5f (epoch 1)",
                          n_train, p_net, p_cub, s_net, s_cub, best_val, tr.best_epoch, first_val));
}

Volume3D foreground_volume(std::uint64_t seed, double shift) {
  // 10001 nonzero voxels so every default percentile lands on an order statistic.
  const Dims d{30, 30, 30};
  Volume3D v(d, Geometry{});
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gam(4.0, 10.0);
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  for (std::size_t k = 0; k < 10001; ++k) v.data()[idx[k]] = 100.0 + shift + gam(rng);
  return v;
}

CriterionResult normalisation(const AcceptanceOptions&) {
  Verdict v;
  std::vector<Volume3D> train;
  for (int i = 0; i < 4; ++i) train.push_back(foreground_volume(10 + i, 5.0 * i));
  const LandmarkTable standard = fit_normalizer(train);
  const auto pct = default_percentiles();
  int exact = 0;
  double worst_idem = 0.0;
  long violations = 0;
  for (int t = 0; t < 3; ++t) {
    const Volume3D vol = foreground_volume(50 + t, 17.0 * t - 8.0);
    const Volume3D out = normalize(vol, standard);
    const auto lm = compute_landmarks(out, pct);
    bool all = true;
    for (std::size_t i = 0; i < lm.size(); ++i) all = all && lm[i] == standard.target[i];
    exact += all ? 1 : 0;
    v.check(all, strf("test volume %d landmarks differ from targets", t));

    const Volume3D again = normalize(out, standard);
    for (std::size_t i = 0; i < out.size(); ++i) {
      worst_idem = std::max(worst_idem, std::fabs(again.data()[i] - out.data()[i]));
    }

    const LandmarkTable table = table_for(vol, standard);
    std::mt19937_64 rng(70 + t);
    std::uniform_real_distribution<double> u(table.source.front() - 50.0,
                                             table.source.back() + 50.0);
    for (int k = 0; k < 10000; ++k) {
      double a = u(rng);
      double b = u(rng);
      if (a > b) std::swap(a, b);
      if (table.map(a) > table.map(b)) ++violations;
    }
  }
  v.check(worst_idem <= 1e-6, strf("idempotence error %.3e", worst_idem));
  v.check(violations == 0, strf("%ld monotonicity violations", violations));
  return v.finish(8, strf("%d/3 volumes hit targets exactly; idempotence error %.2e; %ld of 30000 "
                          "probe pairs out of order",
                          exact, worst_idem, violations));
}

CriterionResult uncertainty_degeneracy(const AcceptanceOptions&) {
  Verdict v;
  ModelSpec spec;
  spec.r = 2;
  spec.levels = 2;
  spec.base_filters = 4;
  spec.lf_patch = {8, 8, 4};
  spec.lf_step = {4, 4, 2};
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<float> u(0.5f, 1.5f);
  std::vector<float> patch(spec.lf_patch.count());
  for (float& x : patch) x = u(rng);

  spec.masksembles = {3, 1.0};
  {
    const ModelWeights w = initialize_weights(spec, 21);
    const Uncertainty unc = predict_with_uncertainty(w, spec, patch);
    const bool zeros = std::all_of(unc.variance.begin(), unc.variance.end(),
                                   [](double x) { return x == 0.0; });
    v.check(zeros, "identical masks gave nonzero variance");
  }

  spec.masksembles = {2, 2.0};
  ModelWeights w = initialize_weights(spec, 22);
  for (NamedTensor& t : w.buffers) {
    for (std::size_t c = 0; c < t.data.size(); ++c) {
      t.data[c] = t.name.ends_with(".var") ? 0.5f + 0.25f * static_cast<float>(c % 3)
                                           : 0.1f * static_cast<float>(c % 5);
    }
  }
  for (NamedTensor& t : w.params) {
    if (t.name.ends_with(".b") || t.name.ends_with(".beta")) {
      for (std::size_t c = 0; c < t.data.size(); ++c) t.data[c] = 0.05f * static_cast<float>(c + 1);
    }
  }
  const Uncertainty unc = predict_with_uncertainty(w, spec, patch);
  ad::Tensor<float> batch({2, 1, 8, 8, 4}, 0.0f);
  std::copy(patch.begin(), patch.end(), batch.data.begin());
  std::copy(patch.begin(), patch.end(), batch.data.begin() + static_cast<long>(patch.size()));
  const ad::Tensor<float> out = forward(w, spec, batch);
  const std::size_t n = out.size() / 2;
  std::size_t mismatches = 0;
  std::size_t divergent = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = out.data[i];
    const double b = out.data[n + i];
    const double d = a - b;
    if (d != 0.0) ++divergent;
    if (unc.mean[i] != (a + b) / 2.0 || unc.variance[i] != d * d / 4.0) ++mismatches;
  }
  v.check(divergent > 0, "masked subnetworks agree everywhere");
  v.check(mismatches == 0, strf("%zu voxels differ from the two-sample forms", mismatches));
  return v.finish(9, strf("identical masks give zero variance; m=2 matches closed forms at %zu "
                          "voxels (%zu divergent)",
                          n - mismatches, divergent));
}

double naive_ssim(const Volume3D& a, const Volume3D& b) {
  const auto g = gaussian_window(11, 1.5);
  const Dims d = b.dims();
  const auto [lo, hi] = std::minmax_element(b.data().begin(), b.data().end());
  const double L = *hi - *lo;
  const double c1 = (0.01 * L) * (0.01 * L);
  const double c2 = (0.03 * L) * (0.03 * L);
  double sum = 0.0;
  long count = 0;
  for (int x = 0; x + 11 <= d.nx; ++x)
    for (int y = 0; y + 11 <= d.ny; ++y)
      for (int z = 0; z + 11 <= d.nz; ++z) {
        double ma = 0, mb = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j)
            for (int k = 0; k < 11; ++k) {
              const double w = g[i] * g[j] * g[k];
              ma += w * a(x + i, y + j, z + k);
              mb += w * b(x + i, y + j, z + k);
            }
        double va = 0, vb = 0, cab = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j)
            for (int k = 0; k < 11; ++k) {
              const double w = g[i] * g[j] * g[k];
              const double da = a(x + i, y + j, z + k) - ma;
              const double db = b(x + i, y + j, z + k) - mb;
              va += w * da * da;
              vb += w * db * db;
              cab += w * da * db;
            }
        sum += ((2 * ma * mb + c1) * (2 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return sum / static_cast<double>(count);
}

CriterionResult metrics_oracles(const AcceptanceOptions&) {
  Verdict v;
  const Dims d{16, 16, 16};
  double worst_psnr = 0.0;
  double worst_ssim = 0.0;
  for (int s = 0; s < 3; ++s) {
    const Volume3D ref = random_volume(d, 600 + s, 0.0, 10.0);
    Volume3D est = ref;
    std::mt19937_64 rng(700 + s);
    std::normal_distribution<double> n(0.0, 0.5 + s);
    for (double& x : est.data()) x += n(rng);

    long double sse = 0.0L;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const long double e = static_cast<long double>(est.data()[i]) - ref.data()[i];
      sse += e * e;
    }
    const double mse = static_cast<double>(sse / ref.size());
    const double peak = *std::max_element(ref.data().begin(), ref.data().end());
    const double oracle = 10.0 * std::log10(peak * peak / mse);
    worst_psnr = std::max(worst_psnr, std::fabs(psnr(est, ref) - oracle));
    worst_ssim = std::max(worst_ssim, std::fabs(ssim(est, ref) - naive_ssim(est, ref)));
  }
  v.check(worst_psnr <= 1e-9, strf("PSNR oracle gap %.3e dB", worst_psnr));
  v.check(worst_ssim <= 1e-6, strf("SSIM oracle gap %.3e", worst_ssim));

  const Volume3D ref = random_volume(d, 5, 0.0, 1.0);
  Volume3D peak1 = ref;
  peak1.data()[0] = 1.0;
  Volume3D off = peak1;
  for (double& x : off.data()) x += 0.1;
  v.check(std::fabs(psnr(off, peak1) - 20.0) < 1e-9, "offset 0.1 at peak 1 is not 20 dB");
  v.check(std::isinf(psnr(ref, ref)), "identical PSNR is finite");
  v.check(ssim(ref, ref) == 1.0, "self SSIM is not 1");

  Geometry g;
  g.slice_thickness = 2.0;
  LabelVolume a{{10, 10, 10}, g, std::vector<std::int32_t>(1000, 0), {}};
  LabelVolume b = a;
  for (int i = 0; i < 75; ++i) a.labels[i] = 1;
  for (int i = 0; i < 50; ++i) b.labels[i] = 1;
  v.check(rve(a, a, 1) == 0.0, "RVE at equality is not 0");
  v.check(std::fabs(rve(a, b, 1) - 0.4) < 1e-15, strf("RVE 150 vs 100 mm3 gives %.6f", rve(a, b, 1)));
  LabelVolume empty = a;
  std::fill(empty.labels.begin(), empty.labels.end(), 0);
  v.check(rve(empty, b, 1) == 2.0, "RVE with an absent estimate is not 2");
  bool degenerate = false;
  try {
    rve(empty, empty, 1);
  } catch (const DegenerateError&) {
    degenerate = true;
  }
  v.check(degenerate, "absent structure did not raise");
  return v.finish(10, strf("PSNR gap %.2e dB, SSIM gap %.2e; closed forms and RVE bounds hold",
                           worst_psnr, worst_ssim));
}

// Digest of every file under dir. Manifests are compared without timings.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (e.path().string().ends_with("manifest.json")) {
      std::ifstream in(e.path());
      nlohmann::json j = nlohmann::json::parse(in);
      j.erase("timings");
      const std::string s = j.dump();
      out[rel] = sha256_hex({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
    } else {
      out[rel] = sha256_file(e.path());
    }
  }
  return out;
}

CriterionResult determinism(const AcceptanceOptions& o) {
  Verdict v;
  const fs::path base = (o.workdir.empty() ? fs::temp_directory_path() / "iqt-acceptance" : o.workdir) / "determinism";
  const std::string d = base.string();
  const std::vector<std::vector<std::string>> script = {
      {"phantom", "--n", "2", "--seed", "7", "--dims", "32,32,32", "--out", d + "/ph"},
      {"simulate", "--in", d + "/ph/phantom_000.nii", "--masks",
       d + "/ph/phantom_000_wm.nii," + d + "/ph/phantom_000_gm.nii," + d + "/ph/phantom_000_oth.nii",
       "--r", "4", "--contrast", "t1w", "--seed", "3", "--out", d + "/lf.nii"},
      {"fit-norm", "--in", d + "/lf.nii", "--save-norm", d + "/norm.json"},
      {"train", "--phantoms", "2", "--dims", "32,32,32", "--r", "4", "--levels", "2", "--filters",
       "2", "--patch", "16,16,4", "--step", "8,8,2", "--epochs", "1", "--batch", "4", "--seed",
       "1", "--out", d + "/model.ckpt"},
      {"enhance", "--model", d + "/model.ckpt", "--in", d + "/lf.nii", "--out", d + "/hf.nii"},
      {"evaluate", "--est", d + "/hf.nii", "--ref", d + "/ph/phantom_000.nii", "--out",
       d + "/eval.json"},
      {"selftest", "--only", "2,4,10", "--report", d + "/selftest.txt", "--workdir",
       d + "/selftest"},
  };
  std::map<std::string, std::string> first;
  std::size_t files = 0;
  // The subcommands report on stdout; keep that out of the acceptance report.
  std::ostringstream sink;
  std::streambuf* saved = std::cout.rdbuf(sink.rdbuf());
  struct Restore {
    std::streambuf* buf;
    ~Restore() { std::cout.rdbuf(buf); }
  } restore{saved};
  for (int run = 0; run < 2; ++run) {
    fs::remove_all(base);
    fs::create_directories(base);
    for (const auto& cmd : script) {
      const int code = cli::run(cmd);
      v.check(code == 0, strf("run %d: %s exited %d", run + 1, cmd[0].c_str(), code));
    }
    auto snap = snapshot(base);
    if (run == 0) {
      first = std::move(snap);
      files = first.size();
      progress(o, strf("determinism first pass wrote %zu files", files));
    } else {
      for (const auto& [name, digest] : first) {
        const auto it = snap.find(name);
        v.check(it != snap.end() && it->second == digest, name + " differs between runs");
      }
      v.check(snap.size() == first.size(), "file sets differ between runs");
    }
  }
  fs::remove_all(base);
  return v.finish(11, strf("7 subcommands run twice, %zu output files compared", files));
}

}  // namespace

const char* criterion_name(int id) {
  static const char* const kNames[] = {
      "simulator contrast fidelity", "simulator identity",   "distribution sampling",
      "patch round trip",            "gradient correctness", "shape contract",
      "learning beats baseline",     "normalisation",        "uncertainty degeneracy",
      "metrics oracles",             "determinism",
  };
  if (id < 1 || id > kCriterionCount) throw ArgumentError("no criterion " + std::to_string(id));
  return kNames[id - 1];
}

CriterionResult run_criterion(int id, const AcceptanceOptions& opts) {
  using Fn = CriterionResult (*)(const AcceptanceOptions&);
  static const Fn kFns[] = {simulator_fidelity,     simulator_identity,      distribution_sampling,
                            patch_round_trip,       gradient_correctness,    shape_contract,
                            learning_beats_baseline, normalisation,          uncertainty_degeneracy,
                            metrics_oracles,        determinism};
  const char* name = criterion_name(id);
  try {
    return kFns[id - 1](opts);
  } catch (const std::exception& e) {
    return {id, name, false, std::string("threw: ") + e.what()};
  }
}

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts) {
  std::vector<CriterionResult> out;
  for (int id = 1; id <= kCriterionCount; ++id) {
    if (!opts.only.empty() && std::find(opts.only.begin(), opts.only.end(), id) == opts.only.end()) {
      continue;
    }
    if (opts.verbose) std::cerr << "criterion " << id << ": " << criterion_name(id) << "\n";
    out.push_back(run_criterion(id, opts));
  }
  return out;
}

std::string format_report(const std::vector<CriterionResult>& results) {
  std::ostringstream os;
  for (const CriterionResult& r : results) {
    os << (r.passed ? "PASS" : "FAIL") << " [" << r.id << "] " << r.name << ": " << r.detail << "\n";
  }
  return os.str();
}

nlohmann::json report_json(const std::vector<CriterionResult>& results) {
  nlohmann::json j = nlohmann::json::array();
  for (const CriterionResult& r : results) {
    j.push_back({{"id", r.id}, {"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
  }
  return j;
}

}  // namespace iqt
