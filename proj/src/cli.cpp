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

#include "iqt/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "iqt/acceptance.hpp"
#include "iqt/checkpoint.hpp"
#include "iqt/digest.hpp"
#include "iqt/error.hpp"
#include "iqt/metrics.hpp"
#include "iqt/network.hpp"
#include "iqt/nifti.hpp"
#include "iqt/normalizer.hpp"
#include "iqt/patching.hpp"
#include "iqt/phantom.hpp"
#include "iqt/simulator.hpp"
#include "iqt/training.hpp"
#include "json.hpp"

namespace iqt::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

// Bookkeeping for one invocation: the current stage, timings and the files
// read and written.
class Run {
 public:
  Run(std::string command, const std::vector<std::string>& args)
      : command_(std::move(command)), args_(args) {}

  void stage(const std::string& name) {
    close_stage();
    stage_ = name;
    started_ = Clock::now();
  }
  const std::string& current_stage() const { return stage_; }

  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }

  json params = json::object();
  json seeds = json::object();

  void write_manifest(const fs::path& path) {
    close_stage();
    json m;
    m["command"] = command_;
    m["argv"] = args_;
    m["parameters"] = params;
    m["seeds"] = seeds;
    m["inputs"] = digests(inputs_);
    m["outputs"] = digests(outputs_);
    m["timings"] = timings_;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << m.dump(2) << "\n";
  }

 private:
  void close_stage() {
    if (stage_.empty()) return;
    const double s = std::chrono::duration<double>(Clock::now() - started_).count();
    timings_[stage_] = timings_.value(stage_, 0.0) + s;
  }

  static json digests(const std::vector<fs::path>& paths) {
    json arr = json::array();
    for (const fs::path& p : paths) {
      arr.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
      const fs::path side = sidecar_path(p);
      if (p.extension() == ".nii" && fs::exists(side)) {
        arr.push_back({{"path", side.string()}, {"sha256", sha256_file(side)}});
      }
    }
    return arr;
  }

  std::string command_;
  std::vector<std::string> args_;
  std::string stage_;
  Clock::time_point started_;
  json timings_ = json::object();
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
};

fs::path manifest_for(const fs::path& out, const std::string& command) {
  if (fs::is_directory(out)) return out / (command + ".manifest.json");
  return out.parent_path() / (out.stem().string() + ".manifest.json");
}

fs::path with_suffix(const fs::path& out, const std::string& suffix) {
  return out.parent_path() / (out.stem().string() + suffix);
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) {
      throw ArgumentError(std::string("bad value '") + item + "' in " + what);
    }
    out.push_back(v);
  }
  return out;
}

template <typename T>
std::array<T, 3> parse_triple(const std::string& text, const char* what) {
  const auto v = parse_list<T>(text, what);
  if (v.size() != 3) throw ArgumentError(std::string(what) + " needs three comma-separated values");
  return {v[0], v[1], v[2]};
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
  int n = 1;
  std::uint64_t seed = 0;
  std::string dims;
  std::string config;
  fs::path out;
};

int cmd_phantom(const PhantomArgs& a, Run& run) {
  run.stage("configuring");
  PhantomConfig cfg;
  if (!a.config.empty()) {
    run.input(a.config);
    from_json(read_json(a.config), cfg);
  }
  if (!a.dims.empty()) {
    const auto d = parse_triple<int>(a.dims, "--dims");
    cfg.dims = {d[0], d[1], d[2]};
  }
  if (a.n < 1) throw ArgumentError("--n must be positive");
  cfg.validate();
  run.params["n"] = a.n;
  run.params["phantom"] = cfg;
  run.seeds["base"] = a.seed;

  run.stage("generating phantoms");
  fs::create_directories(a.out);
  for (int i = 0; i < a.n; ++i) {
    cfg.seed = a.seed + static_cast<std::uint64_t>(i);
    const Phantom ph = generate_phantom(cfg);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "phantom_%03d", i);
    const std::pair<const char*, const Volume3D*> parts[] = {
        {"", &ph.image}, {"_wm", &ph.masks.wm}, {"_gm", &ph.masks.gm}, {"_oth", &ph.masks.oth}};
    for (const auto& [suffix, vol] : parts) {
      const fs::path p = a.out / (std::string(stem) + suffix + ".nii");
      save_volume(*vol, p);
      run.output(p);
    }
  }
  run.write_manifest(manifest_for(a.out, "phantom"));
  return kExitOk;
}

// ---------------------------------------------------------------- simulate

SnrDistribution resolve_contrast(const std::string& contrast, Run& run) {
  if (contrast == "t1w" || contrast == "t2w" || contrast == "flair") {
    return SnrDistribution::named(contrast);
  }
  if (!fs::exists(contrast)) {
    throw ArgumentError("--contrast must be t1w, t2w, flair or a JSON file (got '" + contrast + "')");
  }
  run.input(contrast);
  SnrDistribution p = read_json(contrast).get<SnrDistribution>();
  p.validate();
  return p;
}

struct SimulateArgs {
  fs::path in;
  std::vector<std::string> masks;
  int r = 4;
  std::string contrast = "t1w";
  std::uint64_t seed = 0;
  fs::path out;
  double sigma_y = 0.0;
  std::optional<double> sigma_x;
  std::optional<double> thickness_fraction;
  std::optional<double> slice_thickness;
  std::optional<double> slice_gap;
  bool keep_background = false;
};

Volume3D load_with_geometry(const fs::path& p, const std::optional<double>& thickness,
                            const std::optional<double>& gap, Run& run) {
  run.input(p);
  Volume3D v = load_volume(p);
  if (thickness || gap) {
    Geometry g = v.geometry();
    if (thickness) g.slice_thickness = *thickness;
    if (gap) g.slice_gap = *gap;
    v.set_geometry(g);
  }
  return v;
}

int cmd_simulate(const SimulateArgs& a, Run& run) {
  run.stage("configuring");
  if (a.masks.size() != 3) throw ArgumentError("--masks needs wm,gm,oth");
  const SnrDistribution dist = resolve_contrast(a.contrast, run);
  const SigmaPolicy policy = a.sigma_x ? SigmaPolicy::explicit_levels(*a.sigma_x, a.sigma_y)
                                       : SigmaPolicy::fix_white_matter_mean(a.sigma_y);
  DownsampleOptions opts;
  opts.thickness_fraction = a.thickness_fraction;
  run.params = {{"r", a.r}, {"contrast", a.contrast}, {"distribution", dist},
                {"sigma_y", a.sigma_y}, {"keep_background", a.keep_background}};
  if (a.sigma_x) run.params["sigma_x"] = *a.sigma_x;
  if (a.thickness_fraction) run.params["thickness_fraction"] = *a.thickness_fraction;
  run.seeds["simulation"] = a.seed;

  run.stage("loading inputs");
  const Volume3D y = load_with_geometry(a.in, a.slice_thickness, a.slice_gap, run);
  TissueMasks masks{load_with_geometry(a.masks[0], a.slice_thickness, a.slice_gap, run),
                    load_with_geometry(a.masks[1], a.slice_thickness, a.slice_gap, run),
                    load_with_geometry(a.masks[2], a.slice_thickness, a.slice_gap, run)};

  run.stage("simulating");
  const SimulationResult res = simulate(y, masks, a.r, dist, policy, a.seed, opts);
  const Volume3D x = a.keep_background ? res.image : apply_background(res.image, res.background);

  run.stage("writing outputs");
  if (!a.out.parent_path().empty()) fs::create_directories(a.out.parent_path());
  save_volume(x, a.out);
  run.output(a.out);
  const fs::path record = with_suffix(a.out, ".contrast.json");
  write_json({{"sample", res.sample},
              {"multipliers", {{"l_wm", res.multipliers.l_wm},
                               {"l_gm", res.multipliers.l_gm},
                               {"l_oth", Multipliers::l_oth}}},
              {"mu_y_wm", res.mu_y_wm},
              {"mu_y_gm", res.mu_y_gm},
              {"dims", {x.dims().nx, x.dims().ny, x.dims().nz}}},
             record);
  run.output(record);
  run.write_manifest(manifest_for(a.out, "simulate"));
  return kExitOk;
}

// ---------------------------------------------------------------- fit-norm

struct FitNormArgs {
  std::vector<std::string> in;
  fs::path save;
  std::string percentiles;
};

int cmd_fit_norm(const FitNormArgs& a, Run& run) {
  run.stage("configuring");
  const std::vector<double> pct =
      a.percentiles.empty() ? default_percentiles() : parse_list<double>(a.percentiles, "--percentiles");
  run.params["percentiles"] = pct;

  run.stage("loading inputs");
  std::vector<Volume3D> vols;
  for (const std::string& p : a.in) {
    run.input(p);
    vols.push_back(load_volume(p));
  }
  run.stage("fitting landmarks");
  const LandmarkTable table = fit_normalizer(vols, pct);
  run.stage("writing outputs");
  if (!a.save.parent_path().empty()) fs::create_directories(a.save.parent_path());
  save_landmark_table(table, a.save);
  run.output(a.save);
  run.write_manifest(manifest_for(a.save, "fit-norm"));
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::optional<int> phantoms;
  std::optional<fs::path> data;
  std::string contrast = "t1w";
  std::optional<int> r;
  std::optional<fs::path> config;
  fs::path out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<double> lr;
  std::optional<double> decay;
  std::optional<int> batch;
  std::optional<double> val_fraction;
  std::optional<int> levels;
  std::optional<int> filters;
  std::optional<int> convs;
  std::optional<std::string> patch;
  std::optional<std::string> step;
  std::optional<int> masks;
  std::optional<double> mask_scale;
  std::string dims = "64,64,64";
  double bg_threshold = kDefaultBackgroundThreshold;
  bool normalize = false;
  std::optional<fs::path> save_norm;
  std::optional<fs::path> load_norm;
  std::optional<fs::path> history;
};

struct Subject {
  Volume3D hf;
  TissueMasks masks;
};

std::vector<Subject> collect_subjects(const TrainArgs& a, std::uint64_t seed, Run& run) {
  std::vector<Subject> out;
  if (a.phantoms) {
    if (*a.phantoms < 2) throw ArgumentError("--phantoms needs at least 2 subjects");
    PhantomConfig cfg;
    const auto d = parse_triple<int>(a.dims, "--dims");
    cfg.dims = {d[0], d[1], d[2]};
    cfg.validate();
    run.params["phantom"] = cfg;
    for (int i = 0; i < *a.phantoms; ++i) {
      cfg.seed = seed + static_cast<std::uint64_t>(i);
      Phantom ph = generate_phantom(cfg);
      out.push_back({std::move(ph.image), std::move(ph.masks)});
    }
    return out;
  }
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(*a.data)) {
    const std::string stem = e.path().stem().string();
    if (e.path().extension() != ".nii") continue;
    if (stem.ends_with("_wm") || stem.ends_with("_gm") || stem.ends_with("_oth")) continue;
    images.push_back(e.path());
  }
  std::sort(images.begin(), images.end());
  if (images.size() < 2) throw ArgumentError("--data needs at least 2 volumes with tissue masks");
  for (const fs::path& p : images) {
    auto sibling = [&](const char* tag) {
      const fs::path m = p.parent_path() / (p.stem().string() + tag + ".nii");
      run.input(m);
      return load_volume(m);
    };
    run.input(p);
    Volume3D hf = load_volume(p);
    TissueMasks masks{sibling("_wm"), sibling("_gm"), sibling("_oth")};
    out.push_back({std::move(hf), std::move(masks)});
  }
  return out;
}

int cmd_train(const TrainArgs& a, Run& run) {
  run.stage("configuring");
  if (a.phantoms.has_value() == a.data.has_value()) {
    throw ArgumentError("give exactly one of --phantoms and --data");
  }
  ModelSpec spec = ModelSpec::standard(a.r.value_or(4));
  TrainConfig cfg;
  if (a.config) {
    run.input(*a.config);
    const json j = read_json(*a.config);
    if (j.contains("model")) from_json(j.at("model"), spec);
    if (j.contains("train")) from_json(j.at("train"), cfg);
    if (!a.r && j.contains("model") && j.at("model").contains("r") &&
        !j.at("model").contains("lf_patch")) {
      const ModelSpec std_r = ModelSpec::standard(spec.r);
      spec.lf_patch = std_r.lf_patch;
      spec.lf_step = std_r.lf_step;
    }
  }
  if (a.r) spec.r = *a.r;
  if (a.levels) spec.levels = *a.levels;
  if (a.filters) spec.base_filters = *a.filters;
  if (a.convs) spec.convs_per_level = *a.convs;
  if (a.patch) {
    const auto p = parse_triple<int>(*a.patch, "--patch");
    spec.lf_patch = {p[0], p[1], p[2]};
  }
  if (a.step) {
    const auto s = parse_triple<int>(*a.step, "--step");
    spec.lf_step = {s[0], s[1], s[2]};
  }
  if (a.masks) spec.masksembles.masks = *a.masks;
  if (a.mask_scale) spec.masksembles.scale = *a.mask_scale;
  spec.intensity_scale = 0.0;
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.decay) cfg.decay = *a.decay;
  if (a.batch) cfg.batch_size = *a.batch;
  if (a.val_fraction) cfg.val_fraction = *a.val_fraction;
  spec.validate();
  cfg.validate();
  const SnrDistribution dist = resolve_contrast(a.contrast, run);
  run.params["model"] = spec;
  run.params["train"] = cfg;
  run.params["contrast"] = a.contrast;
  run.params["bg_threshold"] = a.bg_threshold;
  run.params["normalize"] = a.normalize || a.load_norm.has_value();
  run.seeds["train"] = cfg.seed;

  run.stage("building training set");
  std::vector<Subject> subjects = collect_subjects(a, cfg.seed, run);
  std::vector<Volume3D> lfs;
  std::vector<VoxelMask> backgrounds;
  json samples = json::array();
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const std::uint64_t sim_seed = cfg.seed + 1000003ull * (i + 1);
    const SimulationResult res = simulate(subjects[i].hf, subjects[i].masks, spec.r, dist,
                                          SigmaPolicy::fix_white_matter_mean(), sim_seed);
    lfs.push_back(apply_background(res.image, res.background));
    backgrounds.push_back(res.background);
    samples.push_back(res.sample);
  }
  std::optional<LandmarkTable> norm;
  if (a.load_norm) {
    run.input(*a.load_norm);
    norm = load_landmark_table(*a.load_norm);
  } else if (a.normalize) {
    norm = fit_normalizer(lfs);
  }
  PatchSet set;
  set.r = spec.r;
  set.lf_patch = spec.lf_patch;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const Volume3D lf = norm ? iqt::normalize(lfs[i], *norm) : lfs[i];
    set.append(extract_pairs(lf, subjects[i].hf, spec.r, spec.lf_patch, spec.lf_step,
                             a.bg_threshold, &backgrounds[i], static_cast<int>(i)));
  }
  run.params["pairs"] = set.pairs.size();

  run.stage("training");
  const TrainResult tr = train(spec, set, cfg);

  run.stage("writing outputs");
  if (!a.out.parent_path().empty()) fs::create_directories(a.out.parent_path());
  Checkpoint ckpt;
  ckpt.spec = tr.spec;
  ckpt.weights = tr.weights;
  ckpt.norm = norm;
  ckpt.metadata = {{"command", "train"},
                   {"contrast", a.contrast},
                   {"train", cfg},
                   {"best_epoch", tr.best_epoch},
                   {"train_subjects", tr.train_subjects},
                   {"val_subjects", tr.val_subjects},
                   {"contrast_samples", samples}};
  save_checkpoint(ckpt, a.out);
  run.output(a.out);
  const fs::path history = a.history.value_or(with_suffix(a.out, ".history.csv"));
  write_history_csv(tr.history, history);
  run.output(history);
  if (a.save_norm && norm) {
    save_landmark_table(*norm, *a.save_norm);
    run.output(*a.save_norm);
  }
  run.write_manifest(manifest_for(a.out, "train"));
  return kExitOk;
}

// ---------------------------------------------------------------- enhance

struct EnhanceArgs {
  fs::path model;
  fs::path in;
  std::optional<fs::path> norm;
  fs::path out;
  std::optional<fs::path> uncertainty;
  int batch = 8;
  int threads = 1;
};

int cmd_enhance(const EnhanceArgs& a, Run& run) {
  run.stage("loading model");
  if (a.batch < 1) throw ArgumentError("--batch must be positive");
  if (a.threads < 1) throw ArgumentError("--threads must be positive");
  run.input(a.model);
  const Checkpoint ckpt = load_checkpoint(a.model);
  std::optional<LandmarkTable> table = ckpt.norm;
  if (a.norm) {
    run.input(*a.norm);
    table = load_landmark_table(*a.norm);
  }
  run.params = {{"batch", a.batch}, {"threads", a.threads}, {"normalized", table.has_value()},
                {"uncertainty", a.uncertainty.has_value()}, {"model", ckpt.spec}};

  run.stage("loading input");
  run.input(a.in);
  const Volume3D lf = load_volume(a.in);

  run.stage("enhancing");
  const LandmarkTable* tp = table ? &*table : nullptr;
  if (!a.out.parent_path().empty()) fs::create_directories(a.out.parent_path());
  if (a.uncertainty) {
    const EnhancedWithUncertainty e = enhance_with_uncertainty(ckpt.weights, ckpt.spec, lf, tp);
    run.stage("writing outputs");
    save_volume(e.mean, a.out);
    save_volume(e.variance, *a.uncertainty);
    run.output(a.out);
    run.output(*a.uncertainty);
  } else {
    const Volume3D hf = enhance_volume(ckpt.weights, ckpt.spec, lf, tp, {a.batch, a.threads});
    run.stage("writing outputs");
    save_volume(hf, a.out);
    run.output(a.out);
  }
  run.write_manifest(manifest_for(a.out, "enhance"));
  return kExitOk;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
  fs::path est;
  fs::path ref;
  std::optional<fs::path> labels_est;
  std::optional<fs::path> labels_gold;
  std::string structures;
  std::optional<fs::path> out;
};

int cmd_evaluate(const EvaluateArgs& a, Run& run) {
  run.stage("configuring");
  if (a.labels_est.has_value() != a.labels_gold.has_value()) {
    throw ArgumentError("--labels-est and --labels-gold go together");
  }
  std::vector<int> ids;
  if (!a.structures.empty()) ids = parse_list<int>(a.structures, "--structures");

  run.stage("loading inputs");
  run.input(a.est);
  run.input(a.ref);
  const Volume3D est = load_volume(a.est);
  const Volume3D ref = load_volume(a.ref);

  run.stage("computing metrics");
  json report;
  const double p = psnr(est, ref);
  report["psnr_db"] = std::isinf(p) ? json("inf") : json(p);
  report["ssim"] = ssim(est, ref);
  if (a.labels_est) {
    run.input(*a.labels_est);
    run.input(*a.labels_gold);
    const LabelVolume le = LabelVolume::from_volume(load_volume(*a.labels_est));
    const LabelVolume lg = LabelVolume::from_volume(load_volume(*a.labels_gold));
    if (ids.empty()) {
      std::vector<std::int32_t> all(lg.labels.begin(), lg.labels.end());
      std::sort(all.begin(), all.end());
      all.erase(std::unique(all.begin(), all.end()), all.end());
      for (std::int32_t id : all) {
        if (id > 0) ids.push_back(id);
      }
    }
    json rves = json::object();
    for (int id : ids) {
      try {
        rves[std::to_string(id)] = rve(le, lg, id);
      } catch (const DegenerateError&) {
        rves[std::to_string(id)] = nullptr;
      }
    }
    report["rve"] = rves;
  }
  std::cout << report.dump(2) << "\n";
  if (a.out) {
    run.stage("writing outputs");
    if (!a.out->parent_path().empty()) fs::create_directories(a.out->parent_path());
    write_json(report, *a.out);
    run.output(*a.out);
    run.write_manifest(manifest_for(*a.out, "evaluate"));
  }
  return kExitOk;
}

// ---------------------------------------------------------------- selftest

struct SelftestArgs {
  std::string only;
  std::optional<fs::path> report;
  std::optional<fs::path> json_report;
  std::optional<fs::path> workdir;
  bool verbose = false;
};

int cmd_selftest(const SelftestArgs& a, Run& run) {
  run.stage("configuring");
  AcceptanceOptions opts;
  if (!a.only.empty()) {
    opts.only = parse_list<int>(a.only, "--only");
    for (int id : opts.only) criterion_name(id);
  }
  opts.workdir = a.workdir.value_or(fs::temp_directory_path() / "iqt-selftest");
  opts.verbose = a.verbose;
  run.params["only"] = opts.only;

  run.stage("running criteria");
  const auto results = run_acceptance(opts);
  const std::string text = format_report(results);
  std::cout << text << std::flush;

  run.stage("writing outputs");
  if (a.report) {
    if (!a.report->parent_path().empty()) fs::create_directories(a.report->parent_path());
    std::ofstream(*a.report) << text;
    run.output(*a.report);
  }
  if (a.json_report) {
    write_json(report_json(results), *a.json_report);
    run.output(*a.json_report);
  }
  if (a.report) run.write_manifest(manifest_for(*a.report, "selftest"));
  const bool ok = std::all_of(results.begin(), results.end(),
                              [](const CriterionResult& r) { return r.passed; });
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Stochastic image quality transfer for low-field MRI", "iqt"};
  app.require_subcommand(1);
  int threads = 1;

  PhantomArgs ph;
  auto* s_ph = app.add_subcommand("phantom", "Generate synthetic brain phantoms with tissue masks");
  s_ph->add_option("--n", ph.n, "Number of phantoms");
  s_ph->add_option("--seed", ph.seed, "Base seed; phantom i uses seed + i");
  s_ph->add_option("--dims", ph.dims, "Volume size x,y,z");
  s_ph->add_option("--config", ph.config, "Phantom configuration JSON")->check(CLI::ExistingFile);
  s_ph->add_option("--out", ph.out, "Output directory")->required();

  SimulateArgs sim;
  auto* s_sim = app.add_subcommand("simulate", "Degrade a high-field volume into a low-field one");
  s_sim->add_option("--in", sim.in, "High-field volume")->required()->check(CLI::ExistingFile);
  s_sim->add_option("--masks", sim.masks, "wm,gm,oth tissue masks")
      ->required()
      ->delimiter(',')
      ->check(CLI::ExistingFile);
  s_sim->add_option("--r", sim.r, "Slice down-sampling factor");
  s_sim->add_option("--contrast", sim.contrast, "t1w, t2w, flair or a distribution JSON");
  s_sim->add_option("--seed", sim.seed, "Simulation seed");
  s_sim->add_option("--out", sim.out, "Low-field output volume")->required();
  s_sim->add_option("--sigma-y", sim.sigma_y, "High-field noise level");
  s_sim->add_option("--sigma-x", sim.sigma_x, "Low-field noise level (default: keep the WM mean)");
  s_sim->add_option("--thickness-fraction", sim.thickness_fraction,
                    "Report the output pitch as this fraction of thickness");
  s_sim->add_option("--slice-thickness", sim.slice_thickness, "Override input slice thickness (mm)");
  s_sim->add_option("--slice-gap", sim.slice_gap, "Override input slice gap (mm)");
  s_sim->add_flag("--keep-background", sim.keep_background, "Keep noise outside the head");

  FitNormArgs fn;
  auto* s_fn = app.add_subcommand("fit-norm", "Fit a landmark table over volumes");
  s_fn->add_option("--in", fn.in, "Input volumes")->required()->delimiter(',')->check(CLI::ExistingFile);
  s_fn->add_option("--save-norm", fn.save, "Output table JSON")->required();
  s_fn->add_option("--percentiles", fn.percentiles, "Comma-separated percentiles");

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train", "Train an anisotropic U-Net on simulated pairs");
  auto* o_ph = s_tr->add_option("--phantoms", tr.phantoms, "Train on this many generated phantoms");
  auto* o_data = s_tr->add_option("--data", tr.data, "Directory of phantom-style volumes and masks")
                     ->check(CLI::ExistingDirectory);
  o_ph->excludes(o_data);
  s_tr->add_option("--contrast", tr.contrast, "t1w, t2w, flair or a distribution JSON");
  s_tr->add_option("--r", tr.r, "Slice down-sampling factor");
  s_tr->add_option("--config", tr.config, "JSON with optional model and train sections")
      ->check(CLI::ExistingFile);
  s_tr->add_option("--out", tr.out, "Checkpoint path")->required();
  s_tr->add_option("--seed", tr.seed, "Seed for data, initialisation and shuffling");
  s_tr->add_option("--epochs", tr.epochs, "Epochs");
  s_tr->add_option("--lr", tr.lr, "Adam learning rate");
  s_tr->add_option("--decay", tr.decay, "Learning-rate decay");
  s_tr->add_option("--batch", tr.batch, "Mini-batch size");
  s_tr->add_option("--val-fraction", tr.val_fraction, "Fraction of subjects held out");
  s_tr->add_option("--levels", tr.levels, "U-Net levels");
  s_tr->add_option("--filters", tr.filters, "Filters at the first level");
  s_tr->add_option("--convs", tr.convs, "Convolutions per residual block");
  s_tr->add_option("--patch", tr.patch, "Low-field patch x,y,z");
  s_tr->add_option("--step", tr.step, "Low-field patch step x,y,z");
  s_tr->add_option("--masks", tr.masks, "Masksembles mask count (0 disables)");
  s_tr->add_option("--mask-scale", tr.mask_scale, "Masksembles scale");
  s_tr->add_option("--dims", tr.dims, "Phantom size x,y,z");
  s_tr->add_option("--bg-threshold", tr.bg_threshold, "Maximum background fraction per patch");
  s_tr->add_flag("--normalize", tr.normalize, "Fit and apply a landmark table to the inputs");
  s_tr->add_option("--save-norm", tr.save_norm, "Write the landmark table here");
  s_tr->add_option("--load-norm", tr.load_norm, "Use this landmark table")->check(CLI::ExistingFile);
  s_tr->add_option("--history", tr.history, "Training history CSV");

  EnhanceArgs en;
  auto* s_en = app.add_subcommand("enhance", "Enhance a low-field volume with a trained model");
  s_en->add_option("--model", en.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  s_en->add_option("--in", en.in, "Low-field volume")->required()->check(CLI::ExistingFile);
  s_en->add_option("--norm,--load-norm", en.norm, "Landmark table (overrides the checkpoint's)")
      ->check(CLI::ExistingFile);
  s_en->add_option("--out", en.out, "Enhanced volume")->required();
  s_en->add_option("--uncertainty", en.uncertainty, "Write the variance map here");
  s_en->add_option("--batch", en.batch, "Patches per forward pass");

  EvaluateArgs ev;
  auto* s_ev = app.add_subcommand("evaluate", "Compare an estimate against a reference");
  s_ev->add_option("--est", ev.est, "Estimated volume")->required()->check(CLI::ExistingFile);
  s_ev->add_option("--ref", ev.ref, "Reference volume")->required()->check(CLI::ExistingFile);
  s_ev->add_option("--labels-est", ev.labels_est, "Labels of the estimate")->check(CLI::ExistingFile);
  s_ev->add_option("--labels-gold", ev.labels_gold, "Gold-standard labels")->check(CLI::ExistingFile);
  s_ev->add_option("--structures", ev.structures, "Comma-separated structure ids");
  s_ev->add_option("--out", ev.out, "Report JSON");

  SelftestArgs st;
  auto* s_st = app.add_subcommand("selftest", "Run the acceptance suite");
  s_st->add_option("--only", st.only, "Comma-separated criterion ids");
  s_st->add_option("--report", st.report, "Write the text report here");
  s_st->add_option("--json", st.json_report, "Write a JSON report here");
  s_st->add_option("--workdir", st.workdir, "Scratch directory");
  s_st->add_flag("--verbose", st.verbose, "Progress on stderr");

  for (CLI::App* sub : app.get_subcommands({})) {
    sub->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  }

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "iqt: " << e.what() << "\n" << "Run with --help for usage.\n";
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  en.threads = threads;
  Run run(name, args);
  run.params["threads"] = threads;
  try {
    if (name == "phantom") return cmd_phantom(ph, run);
    if (name == "simulate") return cmd_simulate(sim, run);
    if (name == "fit-norm") return cmd_fit_norm(fn, run);
    if (name == "train") return cmd_train(tr, run);
    if (name == "enhance") return cmd_enhance(en, run);
    if (name == "evaluate") return cmd_evaluate(ev, run);
    return cmd_selftest(st, run);
  } catch (const ArgumentError& e) {
    std::cerr << "iqt " << name << ": " << e.what() << "\n" << sub->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "iqt " << name << ": " << run.current_stage() << " failed: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace iqt::cli
