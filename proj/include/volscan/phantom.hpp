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

// Procedural whole-body phantoms and synthetic lesions.
//
// Image axes: slice s runs back (0) to front (S-1), row r runs head (0) to
// feet, column c runs across the body. The body is a symmetric silhouette
// (head, neck, shoulders, chest, abdomen, pelvis, legs) whose torso width
// depends on age, weight and sex. Inside it live lungs, heart, spine, ribs,
// brain ventricles and a set of small bright "nodes" whose positions depend
// on depth and sex; a few occur in one sex only. All seed-driven variation
// (placement, node jitter and presence, intensity jitter, noise) is
// proportional to `anatomy_noise`, so a phantom
// with zero anatomy noise depends only on (config, metadata).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "volscan/data_model.hpp"
#include "volscan/error.hpp"
#include "volscan/random.hpp"

namespace volscan {

struct PhantomConfig {
  int width = 64;
  int height = 128;
  int min_slices = 22;
  int max_slices = 45;
  double anatomy_noise = 0.04;
  double sex_effect = 4.0;  // full torso width difference between sexes, pixels
  double age_effect = 0.04;
  double weight_effect = 0.10;
  double spacing_mm = 6.0;
  double thickness_mm = 5.0;
  std::uint64_t seed = 0;
};

inline void validate(const PhantomConfig& cfg) {
  if (cfg.width < 16 || cfg.height < 16) throw ValidationError("phantom width and height must be >= 16");
  if (cfg.min_slices < 5 || cfg.max_slices < cfg.min_slices) {
    throw ValidationError("phantom slice range must satisfy 5 <= min <= max");
  }
  for (double v : {cfg.anatomy_noise, cfg.sex_effect, cfg.age_effect, cfg.weight_effect}) {
    if (!std::isfinite(v) || v < 0.0) throw ValidationError("phantom effect scalars must be finite and >= 0");
  }
  validate(SliceGeometry{cfg.spacing_mm, cfg.thickness_mm});
}

struct LesionSpec {
  double peak_intensity = 0.6;
  int slice_extent = 3;
  double sigma_px = 3.0;
  int count = 1;
  // Vertical band (fraction of image height) where lesion centers may fall.
  double row_min_frac = 0.0;
  double row_max_frac = 1.0;
};

inline void validate(const LesionSpec& spec) {
  if (!(spec.peak_intensity >= 0.0 && spec.peak_intensity <= 1.0)) {
    throw ValidationError("lesion peak_intensity must lie in [0, 1]");
  }
  if (spec.slice_extent < 1) throw ValidationError("lesion slice_extent must be >= 1");
  if (!(spec.sigma_px > 0.0) || !std::isfinite(spec.sigma_px)) throw ValidationError("lesion sigma_px must be > 0");
  if (spec.count < 1) throw ValidationError("lesion count must be >= 1");
  if (!(spec.row_min_frac >= 0.0 && spec.row_min_frac < spec.row_max_frac && spec.row_max_frac <= 1.0)) {
    throw ValidationError("lesion row band must satisfy 0 <= min < max <= 1");
  }
}

/// Default in-plane lesion radius: 3 px at width 64, proportional otherwise.
inline double default_lesion_sigma(int width) { return 3.0 * width / 64.0; }

inline double reference_weight(double age) { return 8.0 + 2.6 * age; }

struct PhantomNode {
  double col_offset_px;  // relative to body center
  double row;            // pixels
  double depth;          // fraction of body depth, 0 = back
  double sigma_px;
  double peak;
};

/// Geometry resolved from (config, metadata, seed) before rendering.
struct PhantomLayout {
  int width = 0;
  int height = 0;
  int slices = 0;
  double center_col = 0.0;
  double torso_half_width = 0.0;  // pixels, at mid depth
  double neck_half_width = 0.0;
  double head_half_width = 0.0;
  double growth = 0.0;      // 0 at age 5, 1 at age 18
  double sex_sign = 0.0;    // +0.5 male, -0.5 female
  double sex_effect = 0.0;
  double tissue = 0.30;
  double lung = 0.07;
  double heart = 0.48;
  double brain = 0.36;
  double csf = 0.72;
  std::vector<PhantomNode> nodes;
};

/// Chest rows (fractions of height) used for the planted torso box.
inline constexpr double kChestTopFrac = 0.27;
inline constexpr double kChestBottomFrac = 0.48;

struct PixelBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
};

namespace detail {

inline constexpr std::uint64_t kNodeAtlasSeed = 0x6E6F6465A7A5ull;
inline constexpr int kNodePairs = 8;
inline constexpr int kSexNodePairs = 3;  // per sex

inline double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

/// Cross-section factor: coronal slices away from mid-depth cut a narrower body.
inline double depth_profile(double d, double reach) {
  const double t = (d - 0.5) / reach;
  return std::sqrt(std::max(0.0, 1.0 - t * t));
}

inline double interp_profile(double v, const std::vector<std::array<double, 2>>& pts) {
  if (v <= pts.front()[0]) return pts.front()[1];
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (v <= pts[i][0]) {
      const double t = (v - pts[i - 1][0]) / (pts[i][0] - pts[i - 1][0]);
      return pts[i - 1][1] + t * (pts[i][1] - pts[i - 1][1]);
    }
  }
  return pts.back()[1];
}

}  // namespace detail

inline PhantomLayout make_layout(const PhantomConfig& cfg, const PatientMeta& meta, std::uint64_t seed) {
  validate(cfg);
  validate(meta);
  Rng rng(derive_seed(seed, "phantom-layout"));
  const double noise = cfg.anatomy_noise;

  PhantomLayout L;
  L.width = cfg.width;
  L.height = cfg.height;
  L.sex_effect = cfg.sex_effect;
  L.sex_sign = meta.sex == Sex::male ? 0.5 : -0.5;
  L.growth = std::clamp((meta.age - 5.0) / 13.0, 0.0, 1.0);

  const double W = cfg.width;
  const double hw_frac = 0.25 + cfg.age_effect * (L.growth - 0.5) +
                         cfg.weight_effect * std::log(meta.weight / reference_weight(meta.age));
  // sex_sign is +-0.5: male minus female full width equals sex_effect.
  L.torso_half_width = hw_frac * W + 0.5 * L.sex_sign * cfg.sex_effect;
  if (L.torso_half_width < 4.0 || L.torso_half_width > 0.5 * W - 1.0) {
    throw ValidationError("phantom torso width out of image for the given metadata");
  }
  L.neck_half_width = W * 0.055 * (0.9 + 0.2 * L.growth);
  L.head_half_width = W * 0.12 * (0.9 + 0.15 * L.growth);

  const double depth_fraction = std::clamp((meta.weight - 15.0) / 50.0, 0.0, 1.0);
  double slices = cfg.min_slices + (cfg.max_slices - cfg.min_slices) * depth_fraction;
  slices += noise * 25.0 * rng.normal();
  L.slices = static_cast<int>(std::clamp(std::lround(slices), static_cast<long>(cfg.min_slices),
                                         static_cast<long>(cfg.max_slices)));

  L.center_col = 0.5 * W + noise * 75.0 * rng.uniform(-1.0, 1.0);
  L.tissue += noise * 0.5 * rng.normal();
  L.lung += noise * 0.25 * rng.normal();
  L.heart += noise * 0.5 * rng.normal();
  L.brain += noise * 0.5 * rng.normal();
  L.csf += noise * 0.5 * rng.normal();

  // Population node atlas, fixed across patients. Shared pairs occur in
  // everyone; sex-specific pairs occur in one sex only, with a strength that
  // grows with sex_effect. Each patient jitters node position and depth and
  // lacks a node with a probability that grows with anatomy_noise.
  Rng atlas(detail::kNodeAtlasSeed);
  const double sex_row_shift = -L.sex_sign * cfg.sex_effect * 0.005;  // fraction of height
  const double sex_col_scale = 1.0 + L.sex_sign * cfg.sex_effect * 0.02;
  const double sex_strength = std::clamp(cfg.sex_effect / 4.0, 0.0, 1.0);
  const double keep = 1.0 - std::min(0.5, 5.0 * noise);
  const bool male = meta.sex == Sex::male;
  for (int i = 0; i < detail::kNodePairs + 2 * detail::kSexNodePairs; ++i) {
    double strength = 1.0;
    if (i >= detail::kNodePairs) {
      const bool male_only = i < detail::kNodePairs + detail::kSexNodePairs;
      strength = male_only == male ? sex_strength : 0.0;
    }
    const double u = atlas.uniform(0.15, 0.85);
    for (int side : {-1, 1}) {
      const double v = atlas.uniform(0.17, 0.47);
      const double d = atlas.uniform(0.15, 0.85);
      const double sigma = atlas.uniform(1.4, 2.2) * W / 64.0;
      const double peak = atlas.uniform(0.30, 0.45);
      // Patient draws happen for every node so absent nodes do not shift the stream.
      const bool present = rng.uniform() < keep;
      PhantomNode n;
      n.col_offset_px = side * u * sex_col_scale * L.torso_half_width + noise * 75.0 * W / 64.0 * rng.normal();
      n.row = (v + sex_row_shift) * cfg.height + noise * 75.0 * W / 64.0 * rng.normal();
      n.depth = d + noise * 0.5 * rng.normal();
      n.sigma_px = sigma;
      n.peak = strength * std::max(0.0, peak + noise * 0.5 * rng.normal());
      if (present && n.peak > 0.0) L.nodes.push_back(n);
    }
  }
  return L;
}

/// Planted chest box of a phantom: chest rows by torso extent at mid depth.
inline PixelBox torso_box(const PhantomLayout& L) {
  PixelBox b;
  b.top = static_cast<int>(std::lround(kChestTopFrac * L.height));
  b.height = static_cast<int>(std::lround(kChestBottomFrac * L.height)) - b.top;
  b.left = static_cast<int>(std::lround(L.center_col - L.torso_half_width));
  b.width = static_cast<int>(std::lround(L.center_col + L.torso_half_width)) - b.left;
  return b;
}

namespace detail {

/// Trilinear interpolation of a coarse random lattice: smooth bias field.
class SmoothField {
 public:
  SmoothField(int slices, int rows, int cols, Rng& rng, double cell_s, double cell_rc)
      : cell_s_(cell_s), cell_rc_(cell_rc) {
    ns_ = static_cast<int>(std::ceil(slices / cell_s)) + 2;
    nr_ = static_cast<int>(std::ceil(rows / cell_rc)) + 2;
    nc_ = static_cast<int>(std::ceil(cols / cell_rc)) + 2;
    lattice_.resize(static_cast<std::size_t>(ns_) * nr_ * nc_);
    for (double& x : lattice_) x = rng.normal();
  }

  double operator()(double s, double r, double c) const {
    const double fs = s / cell_s_, fr = r / cell_rc_, fc = c / cell_rc_;
    const int is = std::min(static_cast<int>(fs), ns_ - 2);
    const int ir = std::min(static_cast<int>(fr), nr_ - 2);
    const int ic = std::min(static_cast<int>(fc), nc_ - 2);
    const double ts = fs - is, tr = fr - ir, tc = fc - ic;
    double acc = 0.0;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        for (int k = 0; k < 2; ++k) {
          const double w = (a ? ts : 1 - ts) * (b ? tr : 1 - tr) * (k ? tc : 1 - tc);
          acc += w * lattice_[(static_cast<std::size_t>(is + a) * nr_ + (ir + b)) * nc_ + (ic + k)];
        }
      }
    }
    return acc;
  }

 private:
  double cell_s_, cell_rc_;
  int ns_ = 0, nr_ = 0, nc_ = 0;
  std::vector<double> lattice_;
};

}  // namespace detail

/// Renders the phantom described by make_layout(cfg, meta, seed).
inline Volume generate_phantom(const PhantomConfig& cfg, const PatientMeta& meta, std::uint64_t seed) {
  const PhantomLayout L = make_layout(cfg, meta, seed);
  const int S = L.slices, H = L.height, W = L.width;
  const double noise = cfg.anatomy_noise;

  Rng noise_rng(derive_seed(seed, "phantom-noise"));
  const detail::SmoothField field(S, H, W, noise_rng, 6.0, 16.0 * W / 64.0);
  Rng white(derive_seed(seed, "phantom-white"));

  const double hw = L.torso_half_width;
  const std::vector<std::array<double, 2>> torso_profile = {
      {0.165, L.neck_half_width}, {0.195, L.neck_half_width}, {0.25, 1.08 * hw}, {0.30, hw},
      {0.50, 0.95 * hw},          {0.58, 0.88 * hw},          {0.66, hw},         {0.74, hw}};
  const double sex_rows = -L.sex_sign * cfg.sex_effect * 0.005;
  const double rib_period = 0.045 * H;
  const double spine_period = 0.03 * H;

  Volume vol{Grid3<float>(Dims{static_cast<std::size_t>(S), static_cast<std::size_t>(H),
                               static_cast<std::size_t>(W)}),
             SliceGeometry{cfg.spacing_mm, cfg.thickness_mm}};

  for (int s = 0; s < S; ++s) {
    const double d = (s + 0.5) / S;
    const double body_d = detail::depth_profile(d, 0.58);
    const double head_d = detail::depth_profile(d, 0.55);
    const double lung_d = detail::depth_profile(d, 0.33);
    const double heart_t = (d - 0.68) / 0.22;
    const double heart_d = std::sqrt(std::max(0.0, 1.0 - heart_t * heart_t));
    const double vent_t = (d - 0.52) / 0.2;
    const double vent_d = std::sqrt(std::max(0.0, 1.0 - vent_t * vent_t));
    const double spine_w = detail::smoothstep(0.36, 0.26, d) * detail::smoothstep(0.0, 0.06, d);
    const double ribs_w = std::max(detail::smoothstep(0.30, 0.20, d), detail::smoothstep(0.78, 0.88, d));

    for (int r = 0; r < H; ++r) {
      const double v = (r + 0.5) / H;
      for (int c = 0; c < W; ++c) {
        const double x = c + 0.5 - L.center_col;
        const double ax = std::abs(x);
        double val = 0.0;
        bool inside = false;

        // Head.
        const double hv = (v - 0.095) / 0.072;
        const double hh = ax / std::max(1e-9, L.head_half_width * head_d);
        const double head_r = hv * hv + hh * hh;
        if (head_d > 0.0 && head_r < 1.0) {
          inside = true;
          val = L.brain;
          if (head_r > 0.80) val = 0.5;  // skull rim
          const double vx = (ax - 0.3 * L.head_half_width) / std::max(1e-9, 0.18 * L.head_half_width * vent_d);
          const double vy = (v - 0.09) / 0.025;
          if (vent_d > 0.0 && vx * vx + vy * vy < 1.0) val = L.csf;
        } else if (v >= 0.165) {
          double half = 0.0;
          if (v <= 0.74) {
            half = detail::interp_profile(v, torso_profile) * body_d;
            inside = ax < half;
          } else if (v <= 0.98) {
            const double leg_half = 0.42 * hw * body_d;
            inside = std::abs(ax - 0.5 * hw) < leg_half;
            half = hw;
          }
          if (inside) {
            val = L.tissue;
            if (v <= 0.74 && half - ax < 2.0) val += 0.12;  // subcutaneous rim

            // Spine with vertebral banding.
            if (spine_w > 0.0 && v > 0.17 && v < 0.74 && ax < 1.6 * W / 64.0) {
              val = (1.0 - spine_w) * val +
                    spine_w * (0.5 + 0.12 * std::cos(2.0 * std::numbers::pi * (r + 0.5) / spine_period));
            }

            // Ribs over the chest, behind and in front of the lungs.
            if (ribs_w > 0.0 && v > 0.26 + sex_rows && v < 0.48 + sex_rows) {
              const double phase = 2.0 * std::numbers::pi * (r + 0.5) / rib_period;
              val += ribs_w * 0.10 * std::max(0.0, std::cos(phase));
            }

            // Lungs.
            if (lung_d > 0.0) {
              const double ly = (v - (0.37 + sex_rows)) / (0.10 * std::sqrt(lung_d));
              const double lx = (ax - 0.45 * hw * body_d) / std::max(1e-9, 0.33 * hw * lung_d);
              if (lx * lx + ly * ly < 1.0) val = L.lung;
            }

            // Heart, displaced to the patient's left.
            if (heart_d > 0.0) {
              const double cy = (v - (0.40 + sex_rows)) / 0.065;
              const double cx = (x - 0.15 * hw) / std::max(1e-9, 0.28 * hw * heart_d);
              if (cx * cx + cy * cy < 1.0) val = L.heart;
            }
          }
        }

        if (inside) {
          for (const PhantomNode& n : L.nodes) {
            const double dz = (d - n.depth) / 0.06;
            if (dz * dz > 16.0) continue;
            const double dx = x - n.col_offset_px;
            const double dy = (r + 0.5) - n.row;
            const double q = (dx * dx + dy * dy) / (2.0 * n.sigma_px * n.sigma_px);
            if (q > 12.0) continue;
            val += n.peak * std::exp(-q - 0.5 * dz * dz);
          }
          if (noise > 0.0) {
            val += noise * field(s, r, c) + 0.25 * noise * white.normal();
          }
        }
        vol.data(s, r, c) = static_cast<float>(std::clamp(val, 0.0, 1.0));
      }
    }
  }
  return vol;
}

namespace detail {

/// Offsets of the slices a lesion spans, centered on 0.
inline std::pair<int, int> lesion_slice_offsets(int extent) {
  const int lo = -((extent - 1) / 2);
  return {lo, lo + extent - 1};
}

}  // namespace detail

/// Voxels considered part of the body when placing a lesion.
inline constexpr float kBodyThreshold = 0.12f;

/// Adds `spec.count` Gaussian bumps at random body positions. The mask marks
/// voxels where the summed bump exceeds peak_intensity / 10.
inline std::pair<Volume, MaskVolume> inject_lesion(const Volume& v, const LesionSpec& spec, std::uint64_t seed) {
  validate(v);
  validate(spec);
  const Dims dims = v.dims();
  const int S = static_cast<int>(dims.slices), H = static_cast<int>(dims.rows), W = static_cast<int>(dims.cols);
  if (spec.slice_extent > S) {
    throw ValidationError("volume has " + std::to_string(S) + " slices, lesion needs " +
                          std::to_string(spec.slice_extent));
  }
  const auto [lo, hi] = detail::lesion_slice_offsets(spec.slice_extent);
  const int r_lo = static_cast<int>(std::floor(spec.row_min_frac * H));
  const int r_hi = std::max(r_lo + 1, static_cast<int>(std::ceil(spec.row_max_frac * H)));

  // Candidate centers: body voxels whose full slice extent fits.
  std::vector<std::array<int, 3>> candidates;
  for (int s = -lo; s + hi < S; ++s) {
    for (int r = r_lo; r < std::min(r_hi, H); ++r) {
      for (int c = 0; c < W; ++c) {
        if (v.data(s, r, c) > kBodyThreshold) candidates.push_back({s, r, c});
      }
    }
  }
  if (candidates.empty()) throw ValidationError("no body voxel can host a lesion of the requested extent");

  const double sigma_s = std::max(0.5, spec.slice_extent / 3.0);
  Grid3<double> bump(dims, 0.0);
  Rng rng(derive_seed(seed, "lesion"));
  for (int k = 0; k < spec.count; ++k) {
    const auto& ctr = candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(candidates.size()) - 1))];
    const double reach = std::ceil(4.0 * spec.sigma_px);
    for (int ds = lo; ds <= hi; ++ds) {
      const int s = ctr[0] + ds;
      const double gs = std::exp(-0.5 * ds * ds / (sigma_s * sigma_s));
      for (int r = std::max(0, ctr[1] - static_cast<int>(reach)); r <= std::min(H - 1, ctr[1] + static_cast<int>(reach)); ++r) {
        for (int c = std::max(0, ctr[2] - static_cast<int>(reach)); c <= std::min(W - 1, ctr[2] + static_cast<int>(reach)); ++c) {
          const double dr = r - ctr[1], dc = c - ctr[2];
          bump(s, r, c) += spec.peak_intensity * gs * std::exp(-(dr * dr + dc * dc) / (2.0 * spec.sigma_px * spec.sigma_px));
        }
      }
    }
  }

  Volume out = v;
  MaskVolume mask{Grid3<float>(dims, 0.0f), MaskKind::binary, v.geometry};
  const double cut = spec.peak_intensity / 10.0;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double b = bump.values()[i];
    if (b == 0.0) continue;
    out.data.values()[i] = static_cast<float>(std::clamp(static_cast<double>(v.data.values()[i]) + b, 0.0, 1.0));
    if (b > cut) mask.data.values()[i] = 1.0f;
  }
  return {std::move(out), std::move(mask)};
}

/// Metadata distribution: age U[5,18], weight log-uniform within
/// +-35% (log scale) of the age reference, sex fair coin.
inline PatientMeta sample_meta(Rng& rng) {
  PatientMeta m;
  m.age = rng.uniform(5.0, 18.0);
  const double ref = reference_weight(m.age);
  m.weight = ref * std::exp(rng.uniform(-0.35, 0.35));
  m.sex = rng.coin() ? Sex::male : Sex::female;
  return m;
}

/// Writes train/ and test/ volumes plus manifest.jsonl under `out_dir`.
inline DatasetManifest generate_dataset(const PhantomConfig& cfg, int n_train, int n_test, const LesionSpec& lesion,
                                        std::uint64_t seed, const fs::path& out_dir) {
  validate(cfg);
  validate(lesion);
  if (n_train < 0 || n_test < 0) throw ValidationError("dataset counts must be non-negative");
  std::error_code ec;
  fs::create_directories(out_dir / "train", ec);
  fs::create_directories(out_dir / "test", ec);
  if (ec) throw PersistenceError("cannot create dataset directory", out_dir.string());

  auto name = [](const char* stem, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%04d.volz", stem, i);
    return std::string(buf);
  };

  DatasetManifest manifest;
  for (int i = 0; i < n_train + n_test; ++i) {
    const bool is_test = i >= n_train;
    Rng meta_rng(derive_seed(seed, "meta", static_cast<std::uint64_t>(i)));
    const PatientMeta meta = sample_meta(meta_rng);
    const Volume vol = generate_phantom(cfg, meta, derive_seed(seed, "volume", static_cast<std::uint64_t>(i)));
    ManifestEntry e;
    e.meta = meta;
    if (!is_test) {
      e.split = Split::train;
      e.path = out_dir / "train" / name("vol", i);
      save_volume(vol, e.path);
    } else {
      const int k = i - n_train;
      e.split = Split::test;
      auto [lesioned, mask] = inject_lesion(vol, lesion, derive_seed(seed, "lesion", static_cast<std::uint64_t>(k)));
      e.path = out_dir / "test" / name("vol", k);
      e.mask_path = out_dir / "test" / name("mask", k);
      save_volume(lesioned, e.path);
      save_mask(mask, *e.mask_path);
    }
    manifest.entries.push_back(std::move(e));
  }
  save_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

}  // namespace volscan
