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

// Pseudo-registration: find the chest box by multi-scale zero-normalized
// cross-correlation, cut the region of interest (chest columns, top half of
// the rows) and resize it to a canonical width.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "volscan/data_model.hpp"
#include "volscan/error.hpp"
#include "volscan/phantom.hpp"
#include "volscan/random.hpp"

namespace volscan {

using Image2D = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct BBox {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;
  double scale = 1.0;
  double score = 0.0;
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Which template axes a scale factor stretches. Body height is normalized
/// by the scanner field of view, so registration stretches width only.
enum class ScaleAxes { horizontal, both };

struct RoiProvenance {
  Dims source_dims;
  BBox bbox;
  int roi_rows = 0;          // rows cut before resizing
  double resize_factor = 1;  // target_w / bbox.width
  friend bool operator==(const RoiProvenance&, const RoiProvenance&) = default;
};

struct RoiVolume {
  Volume volume;
  RoiProvenance provenance;
  const Dims& dims() const noexcept { return volume.dims(); }
  friend bool operator==(const RoiVolume&, const RoiVolume&) = default;
};

/// Bilinear resample with pixel centers at half-integers and image corners
/// aligned: src = (dst + 0.5) * in / out - 0.5, clamped to the edge pixels.
inline Image2D resample_bilinear(const Image2D& in, int out_rows, int out_cols) {
  if (out_rows < 1 || out_cols < 1) throw ValidationError("resample target must be at least 1x1");
  Image2D out(out_rows, out_cols);
  const double sy = static_cast<double>(in.rows()) / out_rows;
  const double sx = static_cast<double>(in.cols()) / out_cols;
  for (int r = 0; r < out_rows; ++r) {
    const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.rows() - 1));
    const int y0 = static_cast<int>(y);
    const int y1 = std::min(y0 + 1, static_cast<int>(in.rows()) - 1);
    const double ty = y - y0;
    for (int c = 0; c < out_cols; ++c) {
      const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.cols() - 1));
      const int x0 = static_cast<int>(x);
      const int x1 = std::min(x0 + 1, static_cast<int>(in.cols()) - 1);
      const double tx = x - x0;
      const double top = (1 - tx) * in(y0, x0) + tx * in(y0, x1);
      const double bot = (1 - tx) * in(y1, x0) + tx * in(y1, x1);
      out(r, c) = (1 - ty) * top + ty * bot;
    }
  }
  return out;
}

/// Best zero-normalized cross-correlation placement over all scales.
/// Ties resolve to the smallest (scale, top, left). Image windows with zero
/// variance are skipped; a constant template or image is an error.
inline BBox match_template(const Image2D& image, const Image2D& templ, std::span<const double> scales,
                           ScaleAxes axes = ScaleAxes::horizontal) {
  if (scales.empty()) throw ValidationError("match_template needs at least one scale");
  if (templ.size() == 0 || image.size() == 0) throw ValidationError("match_template inputs must be non-empty");
  const double img_mean = image.mean();
  if ((image - img_mean).square().sum() <= 0.0) throw DegenerateInputError("image has zero variance; NCC undefined");
  const double t_mean = templ.mean();
  if ((templ - t_mean).square().sum() <= 0.0) throw DegenerateInputError("template has zero variance; NCC undefined");

  std::vector<double> order(scales.begin(), scales.end());
  std::sort(order.begin(), order.end());

  BBox best;
  bool found = false;
  best.score = -std::numeric_limits<double>::infinity();
  for (double s : order) {
    if (!(s > 0.0)) throw ValidationError("template scales must be positive");
    const int tw = std::max(1, static_cast<int>(std::lround(templ.cols() * s)));
    const int th = axes == ScaleAxes::both ? std::max(1, static_cast<int>(std::lround(templ.rows() * s)))
                                           : static_cast<int>(templ.rows());
    if (th > image.rows() || tw > image.cols()) {
      throw ValidationError("template at scale " + std::to_string(s) + " does not fit in the image");
    }
    Image2D t = (th == templ.rows() && tw == templ.cols()) ? templ : resample_bilinear(templ, th, tw);
    t -= t.mean();
    const double t_energy = t.square().sum();
    if (t_energy <= 0.0) continue;
    const double n = static_cast<double>(th) * tw;
    for (int top = 0; top + th <= image.rows(); ++top) {
      for (int left = 0; left + tw <= image.cols(); ++left) {
        const auto win = image.block(top, left, th, tw);
        const double mean = win.sum() / n;
        double cross = 0.0, energy = 0.0;
        for (int r = 0; r < th; ++r) {
          for (int c = 0; c < tw; ++c) {
            const double a = win(r, c) - mean;
            cross += a * t(r, c);
            energy += a * a;
          }
        }
        if (energy <= 1e-18 * n) continue;
        const double score = std::clamp(cross / std::sqrt(energy * t_energy), -1.0, 1.0);
        if (score > best.score) {
          best = BBox{top, left, th, tw, s, score};
          found = true;
        }
      }
    }
  }
  if (!found) throw DegenerateInputError("every image window has zero variance; NCC undefined");
  return best;
}

/// Rows [0, floor(H/2)) and the box columns of every slice.
inline Volume extract_roi(const Volume& v, const BBox& bbox) {
  const Dims d = v.dims();
  if (bbox.width < 1 || bbox.left < 0 || static_cast<std::size_t>(bbox.left) + bbox.width > d.cols) {
    throw ValidationError("bbox columns [" + std::to_string(bbox.left) + ", " +
                          std::to_string(bbox.left + bbox.width) + ") outside image width " + std::to_string(d.cols));
  }
  if (bbox.top < 0 || bbox.height < 1 || static_cast<std::size_t>(bbox.top) + bbox.height > d.rows) {
    throw ValidationError("bbox rows outside image height");
  }
  const std::size_t rows = d.rows / 2;
  if (rows < 1) throw ValidationError("volume too short for a region of interest");
  Volume out{Grid3<float>(Dims{d.slices, rows, static_cast<std::size_t>(bbox.width)}), v.geometry};
  for (std::size_t s = 0; s < d.slices; ++s) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (int c = 0; c < bbox.width; ++c) out.data(s, r, c) = v.data(s, r, bbox.left + c);
    }
  }
  return out;
}

inline Image2D slice_image(const Volume& v, std::size_t s) {
  const Dims d = v.dims();
  Image2D img(d.rows, d.cols);
  for (std::size_t r = 0; r < d.rows; ++r) {
    for (std::size_t c = 0; c < d.cols; ++c) img(r, c) = v.data(s, r, c);
  }
  return img;
}

/// Proportional bilinear resize of every slice to width `target_w`.
inline RoiVolume resize_width(const Volume& sub, int target_w) {
  if (target_w < 16) throw ValidationError("target width must be >= 16");
  const Dims d = sub.dims();
  const int rows = std::max(1, static_cast<int>(std::lround(static_cast<double>(d.rows) * target_w / d.cols)));
  RoiVolume out;
  out.volume = Volume{Grid3<float>(Dims{d.slices, static_cast<std::size_t>(rows), static_cast<std::size_t>(target_w)}),
                      sub.geometry};
  for (std::size_t s = 0; s < d.slices; ++s) {
    const Image2D res = (static_cast<std::size_t>(target_w) == d.cols && static_cast<std::size_t>(rows) == d.rows)
                            ? slice_image(sub, s)
                            : resample_bilinear(slice_image(sub, s), rows, target_w);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < target_w; ++c) {
        out.volume.data(s, r, c) = static_cast<float>(std::clamp(res(r, c), 0.0, 1.0));
      }
    }
  }
  out.provenance.roi_rows = static_cast<int>(d.rows);
  out.provenance.resize_factor = static_cast<double>(target_w) / static_cast<double>(d.cols);
  return out;
}

/// Rows of the chest band searched by the matcher.
inline std::pair<std::size_t, std::size_t> chest_band_rows(std::size_t height) { return {height / 4, height / 2}; }

/// Slice-mean of the chest band rows [H/4, H/2).
inline Image2D chest_band_projection(const Volume& v) {
  const Dims d = v.dims();
  const auto [r0, r1] = chest_band_rows(d.rows);
  if (r1 <= r0) throw ValidationError("volume too short for a chest band");
  Image2D band = Image2D::Zero(static_cast<Eigen::Index>(r1 - r0), static_cast<Eigen::Index>(d.cols));
  for (std::size_t s = 0; s < d.slices; ++s) {
    for (std::size_t r = r0; r < r1; ++r) {
      for (std::size_t c = 0; c < d.cols; ++c) band(r - r0, c) += v.data(s, r, c);
    }
  }
  return band / static_cast<double>(d.slices);
}

inline std::vector<double> default_scales() { return {0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3}; }

/// Parses "lo:hi:step" (inclusive of hi up to rounding).
inline std::vector<double> parse_scales(const std::string& text) {
  double lo = 0, hi = 0, step = 0;
  char c1 = 0, c2 = 0;
  std::istringstream ss(text);
  if (!(ss >> lo >> c1 >> hi >> c2 >> step) || c1 != ':' || c2 != ':' || !(step > 0) || !(lo > 0) || hi < lo) {
    throw ValidationError("scales must look like lo:hi:step, got '" + text + "'");
  }
  std::vector<double> out;
  const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9));
  for (int i = 0; i <= n; ++i) out.push_back(std::round((lo + i * step) * 1e9) / 1e9);
  return out;
}

inline RoiVolume register_volume(const Volume& v, const Image2D& templ, std::span<const double> scales, int target_w) {
  validate(v);
  const Image2D band = chest_band_projection(v);
  BBox box = match_template(band, templ, scales, ScaleAxes::horizontal);
  box.top += static_cast<int>(chest_band_rows(v.dims().rows).first);
  RoiVolume roi = resize_width(extract_roi(v, box), target_w);
  roi.provenance.source_dims = v.dims();
  roi.provenance.bbox = box;
  return roi;
}

/// Maps a ground-truth mask into ROI coordinates with the same crop and a
/// nearest-neighbour resize, then binarizes (> 0.5).
inline MaskVolume map_mask_to_roi(const MaskVolume& mask, const RoiProvenance& p, const Dims& roi_dims) {
  if (mask.dims() != p.source_dims) {
    throw ShapeError("mask dims " + to_string(mask.dims()) + " differ from registered volume " +
                     to_string(p.source_dims));
  }
  MaskVolume out{Grid3<float>(roi_dims, 0.0f), MaskKind::binary, mask.geometry};
  const double sy = static_cast<double>(p.roi_rows) / roi_dims.rows;
  const double sx = static_cast<double>(p.bbox.width) / roi_dims.cols;
  for (std::size_t s = 0; s < roi_dims.slices; ++s) {
    for (std::size_t r = 0; r < roi_dims.rows; ++r) {
      const auto sr = std::min<std::size_t>(static_cast<std::size_t>((r + 0.5) * sy), p.roi_rows - 1);
      for (std::size_t c = 0; c < roi_dims.cols; ++c) {
        const auto sc = std::min<std::size_t>(static_cast<std::size_t>((c + 0.5) * sx), p.bbox.width - 1);
        out.data(s, r, c) = mask.data(s, sr, p.bbox.left + sc) > 0.5f ? 1.0f : 0.0f;
      }
    }
  }
  return out;
}

/// Reference chest width of the template, in pixels.
inline int template_width(int image_width) { return std::max(4, static_cast<int>(std::lround(0.5 * image_width))); }

/// Mean chest-band appearance of `n` held-out phantoms, each cropped to its
/// planted torso box and resized to the reference width.
inline Image2D build_template(const PhantomConfig& cfg, int n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("template needs at least one phantom");
  const int tw = template_width(cfg.width);
  Image2D acc;
  const auto [band0, band1] = chest_band_rows(static_cast<std::size_t>(cfg.height));
  (void)band1;
  for (int i = 0; i < n; ++i) {
    Rng meta_rng(derive_seed(seed, "template-meta", static_cast<std::uint64_t>(i)));
    const PatientMeta meta = sample_meta(meta_rng);
    const std::uint64_t vs = derive_seed(seed, "template-volume", static_cast<std::uint64_t>(i));
    const PixelBox box = torso_box(make_layout(cfg, meta, vs));
    const Image2D band = chest_band_projection(generate_phantom(cfg, meta, vs));
    const Image2D crop = band.block(box.top - static_cast<int>(band0), box.left, box.height, box.width);
    const Image2D res = resample_bilinear(crop, box.height, tw);
    if (i == 0) acc = res;
    else acc += res;
  }
  return acc / static_cast<double>(n);
}

inline Volume image_to_volume(const Image2D& img) {
  Volume v{Grid3<float>(Dims{1, static_cast<std::size_t>(img.rows()), static_cast<std::size_t>(img.cols())}),
           SliceGeometry{1.0, 1.0}};
  for (Eigen::Index r = 0; r < img.rows(); ++r) {
    for (Eigen::Index c = 0; c < img.cols(); ++c) v.data(0, r, c) = static_cast<float>(std::clamp(img(r, c), 0.0, 1.0));
  }
  return v;
}

/// Template files are single-slice VOLZ images.
inline Image2D load_template(const fs::path& path) {
  const Volume v = load_volume(path);
  if (v.dims().slices != 1) throw FormatError("template must have exactly one slice: " + path.string());
  return slice_image(v, 0);
}

}  // namespace volscan
