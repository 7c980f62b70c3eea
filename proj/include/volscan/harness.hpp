// Copyright 2026 The volscan Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Experiment orchestration: configuration, cached dataset generation and
// registration, per-seed train/detect/evaluate runs, and the ablation suites.
//
// Directory layout under an output root:
//   datasets/<dataset-hash>/                 generated phantoms + manifest.jsonl
//   datasets/<dataset-hash>/roi-<reg-hash>/  registered ROIs, ROI-space masks
//   runs/<config-hash>/config.json
//   runs/<config-hash>/seed-<s>/             checkpoint, masks, report, row
//   runs/<config-hash>/results.csv

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "volscan/data_model.hpp"
#include "volscan/detector.hpp"
#include "volscan/error.hpp"
#include "volscan/metrics.hpp"
#include "volscan/phantom.hpp"
#include "volscan/random.hpp"
#include "volscan/registration.hpp"
#include "volscan/training.hpp"

namespace volscan {

struct DatasetConfig {
  PhantomConfig phantom;
  LesionSpec lesion;
  int n_train = 200;
  int n_test = 30;
  std::uint64_t seed = 2024;
  int template_count = 8;
  std::vector<double> scales = default_scales();
};

struct ExperimentConfig {
  std::string id = "default";
  DatasetConfig data;
  ModelConfig model;  // model.channels is the slice count c, model.beta is beta
  DetectOptions detect;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

inline void validate(const DatasetConfig& d) {
  validate(d.phantom);
  validate(d.lesion);
  if (d.n_train < 1 || d.n_test < 1) throw ValidationError("dataset needs at least one train and one test volume");
  if (d.template_count < 1) throw ValidationError("template_count must be >= 1");
  if (d.scales.empty()) throw ValidationError("registration scales must not be empty");
}

inline void validate(const ExperimentConfig& c) {
  validate(c.data);
  validate(c.model);
  if (c.seeds.empty()) throw ValidationError("at least one seed is required");
  if (!(c.detect.overlap >= 0.0 && c.detect.overlap < 1.0)) throw ValidationError("detect.overlap must be in [0, 1)");
  if (!(c.detect.percentile > 0.0 && c.detect.percentile <= 100.0)) throw ValidationError("detect.percentile must be in (0, 100]");
}

// ---------------------------------------------------------------------------
// JSON schema.

inline nlohmann::ordered_json to_json(const PhantomConfig& p) {
  return {{"width", p.width},
          {"height", p.height},
          {"min_slices", p.min_slices},
          {"max_slices", p.max_slices},
          {"anatomy_noise", p.anatomy_noise},
          {"sex_effect", p.sex_effect},
          {"age_effect", p.age_effect},
          {"weight_effect", p.weight_effect},
          {"spacing_mm", p.spacing_mm},
          {"thickness_mm", p.thickness_mm}};
}

inline nlohmann::ordered_json to_json(const LesionSpec& l) {
  return {{"peak_intensity", l.peak_intensity}, {"slice_extent", l.slice_extent}, {"sigma_px", l.sigma_px},
          {"count", l.count},                   {"row_min_frac", l.row_min_frac}, {"row_max_frac", l.row_max_frac}};
}

inline nlohmann::ordered_json to_json(const DatasetConfig& d) {
  return {{"phantom", to_json(d.phantom)}, {"lesion", to_json(d.lesion)}, {"n_train", d.n_train},
          {"n_test", d.n_test},           {"seed", d.seed},             {"template_count", d.template_count},
          {"scales", d.scales}};
}

inline std::string_view to_string(ThresholdScope s) { return s == ThresholdScope::pooled ? "pooled" : "per_volume"; }

inline nlohmann::ordered_json to_json(const DetectOptions& o) {
  return {{"overlap", o.overlap},
          {"batch_size", o.batch_size},
          {"median_kernel", {o.kernel.slices, o.kernel.rows, o.kernel.cols}},
          {"percentile", o.percentile},
          {"threshold_scope", std::string(to_string(o.scope))}};
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  return {{"id", c.id},
          {"data", to_json(c.data)},
          {"model", to_json(c.model)},
          {"detect", to_json(c.detect)},
          {"seeds", c.seeds}};
}

inline PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"width", "height", "min_slices", "max_slices", "anatomy_noise", "sex_effect", "age_effect",
                          "weight_effect", "spacing_mm", "thickness_mm"},
                         "data.phantom");
  PhantomConfig p;
  detail::read_field(j, "width", p.width, "data.phantom");
  detail::read_field(j, "height", p.height, "data.phantom");
  detail::read_field(j, "min_slices", p.min_slices, "data.phantom");
  detail::read_field(j, "max_slices", p.max_slices, "data.phantom");
  detail::read_field(j, "anatomy_noise", p.anatomy_noise, "data.phantom");
  detail::read_field(j, "sex_effect", p.sex_effect, "data.phantom");
  detail::read_field(j, "age_effect", p.age_effect, "data.phantom");
  detail::read_field(j, "weight_effect", p.weight_effect, "data.phantom");
  detail::read_field(j, "spacing_mm", p.spacing_mm, "data.phantom");
  detail::read_field(j, "thickness_mm", p.thickness_mm, "data.phantom");
  return p;
}

inline LesionSpec lesion_spec_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"peak_intensity", "slice_extent", "sigma_px", "count", "row_min_frac", "row_max_frac"},
                         "data.lesion");
  LesionSpec l;
  detail::read_field(j, "peak_intensity", l.peak_intensity, "data.lesion");
  detail::read_field(j, "slice_extent", l.slice_extent, "data.lesion");
  detail::read_field(j, "sigma_px", l.sigma_px, "data.lesion");
  detail::read_field(j, "count", l.count, "data.lesion");
  detail::read_field(j, "row_min_frac", l.row_min_frac, "data.lesion");
  detail::read_field(j, "row_max_frac", l.row_max_frac, "data.lesion");
  return l;
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"phantom", "lesion", "n_train", "n_test", "seed", "template_count", "scales"}, "data");
  DatasetConfig d;
  if (j.contains("phantom")) d.phantom = phantom_config_from_json(j.at("phantom"));
  if (j.contains("lesion")) d.lesion = lesion_spec_from_json(j.at("lesion"));
  detail::read_field(j, "n_train", d.n_train, "data");
  detail::read_field(j, "n_test", d.n_test, "data");
  detail::read_field(j, "seed", d.seed, "data");
  detail::read_field(j, "template_count", d.template_count, "data");
  detail::read_field(j, "scales", d.scales, "data");
  return d;
}

inline DetectOptions detect_options_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"overlap", "batch_size", "median_kernel", "percentile", "threshold_scope"}, "detect");
  DetectOptions o;
  detail::read_field(j, "overlap", o.overlap, "detect");
  detail::read_field(j, "batch_size", o.batch_size, "detect");
  detail::read_field(j, "percentile", o.percentile, "detect");
  if (auto it = j.find("median_kernel"); it != j.end()) {
    std::array<int, 3> k{};
    detail::read_field(j, "median_kernel", k, "detect");
    o.kernel = {k[0], k[1], k[2]};
  }
  if (auto it = j.find("threshold_scope"); it != j.end()) {
    const std::string s = it->is_string() ? it->get<std::string>() : "";
    if (s == "pooled") o.scope = ThresholdScope::pooled;
    else if (s == "per_volume") o.scope = ThresholdScope::per_volume;
    else throw ValidationError("detect: threshold_scope must be \"pooled\" or \"per_volume\"");
  }
  return o;
}

/// Missing fields keep defaults; unknown fields are errors.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"id", "data", "model", "detect", "seeds"}, "config");
  ExperimentConfig c;
  detail::read_field(j, "id", c.id, "config");
  if (j.contains("data")) c.data = dataset_config_from_json(j.at("data"));
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("detect")) c.detect = detect_options_from_json(j.at("detect"));
  detail::read_field(j, "seeds", c.seeds, "config");
  validate(c);
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  const std::string text = detail::read_file(path);
  try {
    return experiment_config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw PersistenceError(std::string("config is not valid JSON: ") + e.what(), path.string());
  }
}

// ---------------------------------------------------------------------------
// Hashing. Canonical form: JSON with sorted keys and shortest round-trip
// numbers; labels (id), the seed list and the per-run model seed are not
// part of the semantic configuration.

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string canonical_hash(const nlohmann::json& j) { return hex64(fnv1a(j.dump())); }

inline std::string dataset_hash(const DatasetConfig& d) {
  nlohmann::json j = to_json(d);
  j.erase("scales");  // registration only
  j.erase("template_count");
  return canonical_hash(j);
}

inline std::string registration_hash(const DatasetConfig& d, int target_width) {
  return canonical_hash(nlohmann::json{{"scales", d.scales}, {"template_count", d.template_count},
                                       {"target_width", target_width}});
}

inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("id");
  j.erase("seeds");
  j["model"].erase("seed");
  return canonical_hash(j);
}

// ---------------------------------------------------------------------------
// Cached stages.

namespace detail {

inline void write_text(const fs::path& p, const std::string& s) { write_file(p, s); }

/// Builds `final_dir` via `build(tmp)` into a sibling temp dir, then renames.
template <class F>
void build_cached_dir(const fs::path& final_dir, F&& build) {
  if (fs::exists(final_dir / "COMPLETE")) return;
  fs::path tmp = final_dir;
  tmp += ".partial";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw PersistenceError("cannot create directory", tmp.string());
  build(tmp);
  write_text(tmp / "COMPLETE", "ok\n");
  fs::remove_all(final_dir, ec);
  fs::rename(tmp, final_dir, ec);
  if (ec) throw PersistenceError("cannot move finished directory into place", final_dir.string());
}

}  // namespace detail

/// Generates the phantom dataset unless an identical one is cached.
inline fs::path prepare_dataset(const DatasetConfig& d, const fs::path& root) {
  validate(d);
  const fs::path dir = root / "datasets" / dataset_hash(d);
  detail::build_cached_dir(dir, [&](const fs::path& tmp) {
    generate_dataset(d.phantom, d.n_train, d.n_test, d.lesion, d.seed, tmp);
    nlohmann::ordered_json j = to_json(d);
    j.erase("scales");
    j.erase("template_count");
    detail::write_text(tmp / "dataset.json", j.dump(2) + "\n");
  });
  return dir;
}

inline nlohmann::ordered_json to_json(const RoiProvenance& p) {
  const Dims& s = p.source_dims;
  return {{"source_dims", {s.slices, s.rows, s.cols}},
          {"bbox",
           {{"top", p.bbox.top}, {"left", p.bbox.left}, {"height", p.bbox.height}, {"width", p.bbox.width},
            {"scale", p.bbox.scale}, {"score", p.bbox.score}}},
          {"roi_rows", p.roi_rows},
          {"resize_factor", p.resize_factor}};
}

/// Registers every volume of `m`: writes ROI volumes, ROI-space ground-truth
/// masks, provenance.jsonl and a ROI manifest into `out_dir`.
inline DatasetManifest register_manifest(const DatasetManifest& m, const Image2D& templ,
                                         std::span<const double> scales, int target_width, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw PersistenceError("cannot create directory", out_dir.string());
  DatasetManifest out;
  std::string provenance;
  int k = 0;
  for (const auto& e : m.entries) {
    const Volume v = load_volume(e.path);
    RoiVolume roi;
    try {
      roi = register_volume(v, templ, scales, target_width);
    } catch (const Error& err) {
      throw StageError("register", e.path.string() + ": " + err.what());
    }
    char name[32];
    std::snprintf(name, sizeof name, "roi_%04d.volz", k);
    ManifestEntry r = e;
    r.path = out_dir / name;
    save_volume(roi.volume, r.path);
    if (e.mask_path) {
      const MaskVolume gt = map_mask_to_roi(load_mask(*e.mask_path), roi.provenance, roi.volume.dims());
      std::snprintf(name, sizeof name, "roimask_%04d.volz", k);
      r.mask_path = out_dir / name;
      save_mask(gt, *r.mask_path);
    }
    nlohmann::ordered_json pj{{"source", e.path.filename().string()}, {"roi", r.path.filename().string()}};
    pj.update(to_json(roi.provenance));
    provenance += pj.dump() + "\n";
    out.entries.push_back(std::move(r));
    ++k;
  }
  save_manifest(out, out_dir / "manifest.jsonl");
  detail::write_text(out_dir / "provenance.jsonl", provenance);
  return out;
}

inline Image2D dataset_template(const DatasetConfig& d) {
  return build_template(d.phantom, d.template_count, derive_seed(d.seed, "template"));
}

/// Registered ROI dataset for `target_width`, cached next to the raw data.
inline fs::path prepare_registered(const DatasetConfig& d, int target_width, const fs::path& root) {
  const fs::path raw = prepare_dataset(d, root);
  const fs::path dir = raw / ("roi-" + registration_hash(d, target_width));
  detail::build_cached_dir(dir, [&](const fs::path& tmp) {
    const Image2D templ = dataset_template(d);
    save_volume(image_to_volume(templ), tmp / "template.volz");
    register_manifest(load_manifest(raw / "manifest.jsonl"), templ, d.scales, target_width, tmp);
  });
  return dir;
}

inline std::vector<TrainingVolume> load_training_set(const DatasetManifest& m) {
  std::vector<TrainingVolume> out;
  for (const auto& e : m.of_split(Split::train)) out.push_back({load_volume(e.path), e.meta});
  if (out.empty()) throw ValidationError("manifest has no training volumes");
  return out;
}

struct TestItem {
  Volume roi;
  PatientMeta meta;
  MaskVolume gt;
};

inline std::vector<TestItem> load_test_set(const DatasetManifest& m) {
  std::vector<TestItem> out;
  for (const auto& e : m.of_split(Split::test)) {
    if (!e.mask_path) throw ValidationError("test entry without mask: " + e.path.string());
    out.push_back({load_volume(e.path), e.meta, load_mask(*e.mask_path)});
  }
  if (out.empty()) throw ValidationError("manifest has no test volumes");
  return out;
}

inline std::vector<AnomalyResult> detect_test_set(std::span<const TestItem> tests, const ModelCheckpoint& ck,
                                                  const DetectOptions& opt) {
  std::vector<DetectInput> inputs;
  for (const auto& t : tests) inputs.push_back({&t.roi, t.meta});
  return detect_run(inputs, ck, opt);
}

inline MetricsReport evaluate_test_set(std::span<const AnomalyResult> results, std::span<const TestItem> tests) {
  std::vector<MaskVolume> gts;
  for (const auto& t : tests) gts.push_back(t.gt);
  return evaluate(results, gts);
}

// ---------------------------------------------------------------------------
// Runs.

struct RunRow {
  std::string config_id;
  std::string config_hash;
  int slices = 0;
  std::array<bool, kConditionDim> use_condition{};
  double beta = 0.0;
  std::uint64_t seed = 0;
  double auprc = 0.0, auroc = 0.0, dice = 0.0;
};

inline std::string csv_header() {
  return "config_id,config_hash,slices,use_age,use_weight,use_sex,use_w_z,use_w_y,beta,seed,auprc,auroc,dice";
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_csv(const RunRow& r) {
  std::string s = r.config_id + "," + r.config_hash + "," + std::to_string(r.slices);
  for (bool u : r.use_condition) s += u ? ",1" : ",0";
  s += "," + format_double(r.beta) + "," + std::to_string(r.seed) + "," + format_double(r.auprc) + "," +
       format_double(r.auroc) + "," + format_double(r.dice);
  return s;
}

/// Appends one line with a single write so concurrent appenders never interleave.
inline void append_csv_row(const fs::path& path, const std::string& row) {
  const bool fresh = !fs::exists(path);
  std::string text = (fresh ? csv_header() + "\n" : std::string()) + row + "\n";
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw PersistenceError("cannot append to CSV", path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out.flush()) throw PersistenceError("CSV write failed", path.string());
}

struct RunOptions {
  bool reuse = true;            // reuse finished seed runs found on disk
  bool save_masks = true;       // write continuous/binary masks per test volume
  std::ostream* log = nullptr;  // progress messages
};

namespace detail {

inline void log_line(const RunOptions& o, const std::string& s) {
  if (o.log) *o.log << s << std::endl;
}

inline RunRow row_from_csv(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
  if (f.size() != 13) throw FormatError("malformed result row: " + line);
  RunRow r;
  r.config_id = f[0];
  r.config_hash = f[1];
  r.slices = std::stoi(f[2]);
  for (std::size_t k = 0; k < kConditionDim; ++k) r.use_condition[k] = f[3 + k] == "1";
  r.beta = std::stod(f[8]);
  r.seed = std::stoull(f[9]);
  r.auprc = std::stod(f[10]);
  r.auroc = std::stod(f[11]);
  r.dice = std::stod(f[12]);
  return r;
}

}  // namespace detail

/// One seed: train (or reuse the checkpoint) -> detect -> evaluate.
inline RunRow run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& roi_dir, const fs::path& run_dir,
                       const RunOptions& opt = {}) {
  const fs::path dir = run_dir / ("seed-" + std::to_string(seed));
  const fs::path row_file = dir / "row.csv";
  if (opt.reuse && fs::exists(row_file)) {
    std::string line = detail::read_file(row_file);
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
    RunRow r = detail::row_from_csv(line);
    r.config_id = cfg.id;  // the same hash may be shared by differently named suite entries
    return r;
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw PersistenceError("cannot create run directory", dir.string());

  ModelConfig mc = cfg.model;
  mc.seed = seed;
  const DatasetManifest manifest = load_manifest(roi_dir / "manifest.jsonl");
  nlohmann::ordered_json timing;

  ModelCheckpoint ck;
  const fs::path ck_path = dir / "checkpoint.vsck";
  if (opt.reuse && fs::exists(ck_path)) {
    ck = load_checkpoint(ck_path);
    if (!(ck.config == mc)) throw StageError("train", "cached checkpoint config differs: " + ck_path.string());
  } else {
    try {
      const auto vols = load_training_set(manifest);
      const auto t0 = std::chrono::steady_clock::now();
      ck = train(vols, mc, [&](const EpochRecord& r) {
        detail::log_line(opt, "  [" + cfg.id + " seed " + std::to_string(seed) + "] epoch " + std::to_string(r.epoch) +
                                  " beta " + format_double(r.beta) + " loss " + format_double(r.loss));
      });
      timing["train_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      save_checkpoint(ck, ck_path);
    } catch (const StageError&) {
      throw;
    } catch (const Error& e) {
      throw StageError("train", e.what());
    }
  }

  std::vector<TestItem> tests;
  std::vector<AnomalyResult> results;
  try {
    tests = load_test_set(manifest);
    const auto t0 = std::chrono::steady_clock::now();
    results = detect_test_set(tests, ck, cfg.detect);
    timing["detect_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } catch (const Error& e) {
    throw StageError("detect", e.what());
  }
  if (opt.save_masks) {
    fs::create_directories(dir / "masks", ec);
    for (std::size_t i = 0; i < results.size(); ++i) {
      char name[40];
      std::snprintf(name, sizeof name, "continuous_%04zu.volz", i);
      save_mask(results[i].continuous_mask, dir / "masks" / name);
      std::snprintf(name, sizeof name, "binary_%04zu.volz", i);
      save_mask(results[i].binary_mask, dir / "masks" / name);
    }
  }

  MetricsReport rep;
  try {
    rep = evaluate_test_set(results, tests);
  } catch (const Error& e) {
    throw StageError("eval", e.what());
  }
  nlohmann::ordered_json report = to_json(rep);
  report["threshold"] = results.empty() ? 0.0 : results.front().threshold_used;
  detail::write_text(dir / "report.json", report.dump(2) + "\n");
  detail::write_text(dir / "timing.json", timing.dump(2) + "\n");

  RunRow row{cfg.id, config_hash(cfg), mc.channels, mc.use_condition, mc.beta, seed, rep.auprc, rep.auroc, rep.dice};
  detail::write_text(row_file, to_csv(row) + "\n");
  return row;
}

/// Runs every seed of `cfg` and appends rows to runs/<hash>/results.csv.
inline std::vector<RunRow> run_experiment(const ExperimentConfig& cfg, const fs::path& root, const RunOptions& opt = {}) {
  validate(cfg);
  fs::path roi_dir;
  try {
    prepare_dataset(cfg.data, root);
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError("gen-data", e.what());
  }
  try {
    roi_dir = prepare_registered(cfg.data, cfg.model.input_width, root);
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError("register", e.what());
  }
  const fs::path run_dir = root / "runs" / config_hash(cfg);
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  detail::write_text(run_dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::vector<RunRow> rows;
  for (std::uint64_t s : cfg.seeds) {
    detail::log_line(opt, "[" + cfg.id + "] seed " + std::to_string(s) + " (" + run_dir.filename().string() + ")");
    const bool cached = opt.reuse && fs::exists(run_dir / ("seed-" + std::to_string(s)) / "row.csv");
    rows.push_back(run_seed(cfg, s, roi_dir, run_dir, opt));
    if (!cached) append_csv_row(run_dir / "results.csv", to_csv(rows.back()));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Ablation suites.

inline std::array<bool, kConditionDim> condition_flags(bool age, bool weight, bool sex, bool w_z, bool w_y) {
  return {age, weight, sex, w_z, w_y};
}

/// Slice-count ablation in table order: 1 slice, 1 slice + w_z, then
/// c in {1,3,5,7,9} with both coordinates. Patient features are off.
inline std::vector<ExperimentConfig> slice_ablation_configs(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> out;
  auto make = [&](const std::string& id, int c, bool wz, bool wy) {
    ExperimentConfig e = base;
    e.id = id;
    e.model.channels = c;
    e.model.use_condition = condition_flags(false, false, false, wz, wy);
    out.push_back(e);
  };
  make("1slice", 1, false, false);
  make("1slice+wz", 1, true, false);
  for (int c : {1, 3, 5, 7, 9}) make(std::to_string(c) + "slice+wy+wz", c, true, true);
  return out;
}

/// Patient-feature ablation at c = 5 with both coordinates, in table order:
/// none, age, weight, sex, all three, sex with the tuned beta.
inline std::vector<ExperimentConfig> feature_ablation_configs(const ExperimentConfig& base, double tuned_beta = 2.0) {
  std::vector<ExperimentConfig> out;
  auto make = [&](const std::string& id, bool age, bool weight, bool sex, std::optional<double> beta) {
    ExperimentConfig e = base;
    e.id = id;
    e.model.channels = 5;
    e.model.use_condition = condition_flags(age, weight, sex, true, true);
    if (beta) e.model.beta = *beta;
    out.push_back(e);
  };
  make("5slice", false, false, false, std::nullopt);
  make("5slice+age", true, false, false, std::nullopt);
  make("5slice+weight", false, true, false, std::nullopt);
  make("5slice+sex", false, false, true, std::nullopt);
  make("5slice+age+weight+sex", true, true, true, std::nullopt);
  make("5slice+sex+tuned-beta", false, false, true, tuned_beta);
  return out;
}

inline std::vector<double> default_beta_sweep() { return {0.1, 0.5, 1.0, 2.0, 3.0, 5.0, 10.0}; }

/// Beta sweep at c = 5 with sex and both coordinates.
inline std::vector<ExperimentConfig> beta_sweep_configs(const ExperimentConfig& base,
                                                        const std::vector<double>& betas = default_beta_sweep()) {
  std::vector<ExperimentConfig> out;
  for (double b : betas) {
    ExperimentConfig e = base;
    char label[32];
    std::snprintf(label, sizeof label, "beta=%g", b);
    e.id = label;
    e.model.channels = 5;
    e.model.use_condition = condition_flags(false, false, true, true, true);
    e.model.beta = b;
    out.push_back(e);
  }
  return out;
}

/// Runs `configs` in order and writes all rows to `csv_path` (overwritten).
inline std::vector<RunRow> run_suite(const std::vector<ExperimentConfig>& configs, const fs::path& root,
                                     const fs::path& csv_path, const RunOptions& opt = {}) {
  std::vector<RunRow> all;
  for (const auto& c : configs) {
    auto rows = run_experiment(c, root, opt);
    all.insert(all.end(), rows.begin(), rows.end());
  }
  std::string text = csv_header() + "\n";
  for (const auto& r : all) text += to_csv(r) + "\n";
  detail::write_file(csv_path, text);
  return all;
}

}  // namespace volscan
