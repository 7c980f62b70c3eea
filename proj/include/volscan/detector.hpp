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

// Anomaly detection: maximum-likelihood reconstruction of every test window,
// middle-channel underestimate residuals, overlap-mean stitching, a 3-D
// median filter and a percentile threshold.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "volscan/cvae.hpp"
#include "volscan/data_model.hpp"
#include "volscan/error.hpp"
#include "volscan/training.hpp"
#include "volscan/windowing.hpp"

namespace volscan {

/// Residual mask of one window placed at (center_slice, top_row).
struct WindowMask {
  std::vector<float> values;  // width x width
  int center_slice = 0;
  int top_row = 0;
};

struct AnomalyResult {
  MaskVolume continuous_mask;
  MaskVolume binary_mask;
  double threshold_used = std::numeric_limits<double>::infinity();
  std::vector<WindowPosition> window_log;
};

/// decode(mu, y): the reconstruction at the posterior mean, no sampling.
template <class T>
nn::Tensor<T> reconstruct_ml(const Cvae<T>& model, const nn::Tensor<T>& x, const nn::Tensor<T>& y) {
  return model.decode(model.encode(x, y).mu, y);
}

/// Squared residual of the middle channel where the reconstruction
/// underestimates the input; zero elsewhere.
inline std::vector<float> residual_mask(std::span<const float> x, std::span<const float> xhat, int channels,
                                        int width) {
  const std::size_t plane = static_cast<std::size_t>(width) * width;
  if (channels < 1 || channels % 2 == 0) throw ValidationError("channel count must be odd");
  if (x.size() != xhat.size() || x.size() != plane * static_cast<std::size_t>(channels)) {
    throw ShapeError("residual_mask: window sizes differ");
  }
  const std::size_t off = static_cast<std::size_t>(channels / 2) * plane;
  std::vector<float> out(plane, 0.0f);
  for (std::size_t i = 0; i < plane; ++i) {
    const float a = x[off + i], b = xhat[off + i];
    if (b < a) out[i] = (a - b) * (a - b);
  }
  return out;
}

/// Places every window mask on its center slice and averages overlaps.
/// Voxels covered by no window are 0.
inline MaskVolume stitch(std::span<const WindowMask> masks, const Dims& roi_dims, int width,
                         const SliceGeometry& geometry = {}) {
  detail::validate_dims(roi_dims);
  const std::size_t plane = static_cast<std::size_t>(width) * width;
  if (width < 1 || static_cast<std::size_t>(width) != roi_dims.cols) throw ValidationError("stitch: window width must equal ROI width");
  Grid3<double> sum(roi_dims), count(roi_dims);
  for (const auto& m : masks) {
    if (m.values.size() != plane) throw ShapeError("stitch: window mask has the wrong size");
    if (m.center_slice < 0 || static_cast<std::size_t>(m.center_slice) >= roi_dims.slices || m.top_row < 0 ||
        static_cast<std::size_t>(m.top_row + width) > roi_dims.rows) {
      throw ValidationError("stitch: window at slice " + std::to_string(m.center_slice) + ", row " +
                            std::to_string(m.top_row) + " is out of bounds");
    }
    for (int r = 0; r < width; ++r) {
      for (int c = 0; c < width; ++c) {
        const std::size_t s = static_cast<std::size_t>(m.center_slice), rr = static_cast<std::size_t>(m.top_row + r);
        sum(s, rr, static_cast<std::size_t>(c)) += m.values[static_cast<std::size_t>(r) * width + c];
        count(s, rr, static_cast<std::size_t>(c)) += 1.0;
      }
    }
  }
  MaskVolume out{Grid3<float>(roi_dims), MaskKind::continuous, geometry};
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double n = count.values()[i];
    out.data.values()[i] = n > 0.0 ? static_cast<float>(sum.values()[i] / n) : 0.0f;
  }
  return out;
}

struct Kernel3 {
  int slices = 3, rows = 5, cols = 5;
};

/// Median over a (slices x rows x cols) neighbourhood; outside voxels count as 0.
inline Grid3<float> median_filter_3d(const Grid3<float>& in, Kernel3 k = {}) {
  if (k.slices < 1 || k.rows < 1 || k.cols < 1 || k.slices % 2 == 0 || k.rows % 2 == 0 || k.cols % 2 == 0) {
    throw ValidationError("median filter kernel dimensions must be odd and positive");
  }
  const Dims d = in.dims();
  const long long hs = k.slices / 2, hr = k.rows / 2, hc = k.cols / 2;
  const std::size_t n = static_cast<std::size_t>(k.slices) * k.rows * k.cols;
  Grid3<float> out(d);
  std::vector<float> buf(n);
  const auto S = static_cast<long long>(d.slices), R = static_cast<long long>(d.rows), C = static_cast<long long>(d.cols);
  for (long long s = 0; s < S; ++s) {
    for (long long r = 0; r < R; ++r) {
      for (long long c = 0; c < C; ++c) {
        std::size_t j = 0;
        for (long long ds = -hs; ds <= hs; ++ds) {
          for (long long dr = -hr; dr <= hr; ++dr) {
            for (long long dc = -hc; dc <= hc; ++dc) {
              const long long ss = s + ds, rr = r + dr, cc = c + dc;
              const bool inside = ss >= 0 && ss < S && rr >= 0 && rr < R && cc >= 0 && cc < C;
              buf[j++] = inside ? in(static_cast<std::size_t>(ss), static_cast<std::size_t>(rr), static_cast<std::size_t>(cc))
                                : 0.0f;
            }
          }
        }
        auto mid = buf.begin() + static_cast<std::ptrdiff_t>(n / 2);
        std::nth_element(buf.begin(), mid, buf.end());
        out(static_cast<std::size_t>(s), static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = *mid;
      }
    }
  }
  return out;
}

inline MaskVolume median_filter_3d(const MaskVolume& m, Kernel3 k = {}) {
  return {median_filter_3d(m.data, k), m.kind, m.geometry};
}

/// Nearest-rank percentile: the value at rank ceil(p/100 * n) (1-based) of
/// the sorted values. Returns +inf for an empty input.
inline double nearest_rank_percentile(std::vector<double> values, double percentile) {
  if (!(percentile > 0.0 && percentile <= 100.0)) throw ValidationError("percentile must be in (0, 100]");
  if (values.empty()) return std::numeric_limits<double>::infinity();
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

/// Threshold from the strictly positive voxels of all masks pooled.
inline double pooled_threshold(std::span<const MaskVolume> masks, double percentile = 99.0) {
  std::vector<double> pos;
  for (const auto& m : masks) {
    for (float v : m.data.values()) {
      if (v > 0.0f) pos.push_back(v);
    }
  }
  return nearest_rank_percentile(std::move(pos), percentile);
}

/// Binary mask of voxels strictly above `threshold`.
inline MaskVolume binarize(const MaskVolume& m, double threshold) {
  MaskVolume out{Grid3<float>(m.data.dims()), MaskKind::binary, m.geometry};
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data.values()[i] = m.data.values()[i] > threshold ? 1.0f : 0.0f;
  return out;
}

struct ThresholdedMask {
  MaskVolume binary;
  double threshold = std::numeric_limits<double>::infinity();
};

/// Percentile threshold of a single mask's positive values.
inline ThresholdedMask threshold_mask(const MaskVolume& m, double percentile = 99.0) {
  const double t = pooled_threshold(std::span<const MaskVolume>(&m, 1), percentile);
  return {binarize(m, t), t};
}

enum class ThresholdScope { pooled, per_volume };

struct DetectOptions {
  double overlap = 0.5;
  int batch_size = 32;
  Kernel3 kernel{};
  double percentile = 99.0;
  ThresholdScope scope = ThresholdScope::pooled;
};

/// Continuous mask of one ROI volume; the binary mask is left empty.
inline AnomalyResult detect_continuous(const Volume& roi, const PatientMeta& meta, const ModelCheckpoint& ck,
                                       const DetectOptions& opt = {}) {
  const ModelConfig& cfg = ck.config;
  const int W = cfg.input_width, C = cfg.channels;
  if (opt.batch_size < 1) throw ValidationError("detection batch size must be >= 1");
  const auto positions = test_window_positions(roi.dims(), C, W, opt.overlap);
  std::vector<WindowMask> masks;
  masks.reserve(positions.size());
  const std::size_t bs = static_cast<std::size_t>(opt.batch_size);
  for (std::size_t start = 0; start < positions.size(); start += bs) {
    const std::size_t count = std::min(bs, positions.size() - start);
    std::vector<WindowSample> batch;
    batch.reserve(count);
    for (std::size_t j = 0; j < count; ++j) batch.push_back(crop_window(roi, meta, C, W, positions[start + j]));
    auto [x, y] = make_batch(batch, ck.standardizer, cfg.use_condition);
    const nn::Tensor<float> xhat = reconstruct_ml(ck.model, x, y);
    const std::size_t per = static_cast<std::size_t>(C) * W * W;
    for (std::size_t j = 0; j < count; ++j) {
      masks.push_back({residual_mask(std::span<const float>(x.sample(static_cast<int>(j)), per),
                                     std::span<const float>(xhat.sample(static_cast<int>(j)), per), C, W),
                       batch[j].center_slice, batch[j].top_row});
    }
  }
  AnomalyResult res;
  res.continuous_mask = median_filter_3d(stitch(masks, roi.dims(), W, roi.geometry), opt.kernel);
  res.binary_mask = MaskVolume{Grid3<float>(roi.dims()), MaskKind::binary, roi.geometry};
  res.window_log = positions;
  return res;
}

/// Thresholds a set of results in place (one pooled threshold, or one per volume).
inline void apply_threshold(std::span<AnomalyResult> results, double percentile, ThresholdScope scope) {
  if (scope == ThresholdScope::pooled) {
    std::vector<MaskVolume> masks;
    masks.reserve(results.size());
    for (const auto& r : results) masks.push_back(r.continuous_mask);
    const double t = pooled_threshold(masks, percentile);
    for (auto& r : results) {
      r.threshold_used = t;
      r.binary_mask = binarize(r.continuous_mask, t);
    }
  } else {
    for (auto& r : results) {
      auto tm = threshold_mask(r.continuous_mask, percentile);
      r.threshold_used = tm.threshold;
      r.binary_mask = std::move(tm.binary);
    }
  }
}

/// Single-volume detection, thresholded on its own values.
inline AnomalyResult detect_volume(const Volume& roi, const PatientMeta& meta, const ModelCheckpoint& ck,
                                   const DetectOptions& opt = {}) {
  AnomalyResult r = detect_continuous(roi, meta, ck, opt);
  apply_threshold(std::span<AnomalyResult>(&r, 1), opt.percentile, ThresholdScope::per_volume);
  return r;
}

struct DetectInput {
  const Volume* roi = nullptr;
  PatientMeta meta;
};

/// Detection over an evaluation run, thresholded per `opt.scope`.
inline std::vector<AnomalyResult> detect_run(std::span<const DetectInput> inputs, const ModelCheckpoint& ck,
                                             const DetectOptions& opt = {}) {
  std::vector<AnomalyResult> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.roi == nullptr) throw ValidationError("detect_run: null volume");
    out.push_back(detect_continuous(*in.roi, in.meta, ck, opt));
  }
  apply_threshold(out, opt.percentile, opt.scope);
  return out;
}

}  // namespace volscan
