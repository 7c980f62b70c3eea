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

// Multi-channel sliding windows and their condition vectors.
//
// A window is a c x W x W crop: c consecutive slices centered on
// `center_slice`, rows [top_row, top_row + W), all W columns of the ROI.
// Its raw condition is (age, weight, sex, w_z, w_y) with sex coded -1/+1,
// w_z the relative slice depth and w_y the normalized window top.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string_view>
#include <vector>

#include "volscan/data_model.hpp"
#include "volscan/error.hpp"
#include "volscan/random.hpp"
#include "volscan/registration.hpp"

namespace volscan {

inline constexpr std::size_t kConditionDim = 5;
using ConditionArray = std::array<double, kConditionDim>;
inline constexpr std::array<std::string_view, kConditionDim> kConditionNames = {"age", "weight", "sex", "w_z", "w_y"};

enum ConditionIndex : std::size_t { kAge = 0, kWeight = 1, kSex = 2, kSliceZ = 3, kWindowY = 4 };

/// Relative depth of a slice center, measured from the back of the volume.
inline double slice_coordinate(std::size_t n_slices, const SliceGeometry& g, long long slice_index) {
  if (slice_index < 0 || static_cast<std::size_t>(slice_index) >= n_slices) {
    throw ValidationError("slice index " + std::to_string(slice_index) + " outside [0, " + std::to_string(n_slices) +
                          ")");
  }
  const double extent = static_cast<double>(n_slices - 1) * g.spacing_mm + g.thickness_mm;
  return (static_cast<double>(slice_index) * g.spacing_mm + 0.5 * g.thickness_mm) / extent;
}

inline double slice_coordinate(const Volume& v, long long slice_index) {
  return slice_coordinate(v.dims().slices, v.geometry, slice_index);
}

inline double window_coordinate(std::size_t top_row, std::size_t roi_height, std::size_t window) {
  const std::size_t range = roi_height > window ? roi_height - window : 0;
  return static_cast<double>(top_row) / static_cast<double>(std::max<std::size_t>(1, range));
}

inline ConditionArray raw_condition(const PatientMeta& meta, double w_z, double w_y) {
  return {meta.age, meta.weight, meta.sex == Sex::male ? 1.0 : -1.0, w_z, w_y};
}

struct WindowPosition {
  int center_slice = 0;
  int top_row = 0;
  friend bool operator==(const WindowPosition&, const WindowPosition&) = default;
};

struct WindowSample {
  int channels = 1;
  int width = 0;
  int center_slice = 0;
  int top_row = 0;
  std::vector<float> x;  // channels x width x width
  ConditionArray y_raw{};
};

namespace detail {

inline void check_window_fit(const Dims& d, int channels, int width) {
  if (channels < 1 || channels % 2 == 0) throw ValidationError("channel count must be odd and >= 1");
  if (width < 1 || d.cols != static_cast<std::size_t>(width)) {
    throw ValidationError("ROI width " + std::to_string(d.cols) + " differs from window width " +
                          std::to_string(width));
  }
  if (d.rows < static_cast<std::size_t>(width)) {
    throw ValidationError("ROI height " + std::to_string(d.rows) + " is shorter than the window " +
                          std::to_string(width));
  }
  if (d.slices < static_cast<std::size_t>(channels)) {
    throw ValidationError("ROI has " + std::to_string(d.slices) + " slices, fewer than " + std::to_string(channels) +
                          " channels");
  }
}

}  // namespace detail

/// Copies the window at `pos` and computes its raw condition.
inline WindowSample crop_window(const Volume& roi, const PatientMeta& meta, int channels, int width,
                                WindowPosition pos) {
  const Dims d = roi.dims();
  detail::check_window_fit(d, channels, width);
  const int half = channels / 2;
  if (pos.center_slice - half < 0 || pos.center_slice + half >= static_cast<int>(d.slices) || pos.top_row < 0 ||
      static_cast<std::size_t>(pos.top_row + width) > d.rows) {
    throw ValidationError("window position out of ROI bounds");
  }
  WindowSample w;
  w.channels = channels;
  w.width = width;
  w.center_slice = pos.center_slice;
  w.top_row = pos.top_row;
  w.x.resize(static_cast<std::size_t>(channels) * width * width);
  auto out = w.x.begin();
  for (int ch = 0; ch < channels; ++ch) {
    const auto plane = roi.data.slice(static_cast<std::size_t>(pos.center_slice - half + ch));
    const auto first = plane.begin() + static_cast<std::ptrdiff_t>(pos.top_row) * width;
    out = std::copy(first, first + static_cast<std::ptrdiff_t>(width) * width, out);
  }
  w.y_raw = raw_condition(meta, slice_coordinate(roi, pos.center_slice),
                          window_coordinate(static_cast<std::size_t>(pos.top_row), d.rows, width));
  return w;
}

/// Random training window: uniform top row and uniform valid center slice.
inline WindowPosition sample_window_position(const Dims& d, int channels, int width, Rng& rng) {
  detail::check_window_fit(d, channels, width);
  const int half = channels / 2;
  WindowPosition p;
  p.top_row = static_cast<int>(rng.uniform_int(0, static_cast<long long>(d.rows) - width));
  p.center_slice = static_cast<int>(rng.uniform_int(half, static_cast<long long>(d.slices) - 1 - half));
  return p;
}

inline WindowSample sample_train_window(const Volume& roi, const PatientMeta& meta, int channels, int width,
                                        Rng& rng) {
  return crop_window(roi, meta, channels, width, sample_window_position(roi.dims(), channels, width, rng));
}

/// Evenly spaced window tops from 0 to height - W.
inline std::vector<int> window_tops(std::size_t height, int width, double overlap_fraction) {
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0)) throw ValidationError("overlap_fraction must be in [0, 1)");
  if (height < static_cast<std::size_t>(width)) throw ValidationError("ROI shorter than window");
  const double range = static_cast<double>(height) - width;
  const double stride = width * (1.0 - overlap_fraction);
  const int k = std::max(1, static_cast<int>(std::ceil(range / stride - 1e-12)) + 1);
  std::vector<int> tops;
  tops.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    tops.push_back(k == 1 ? 0 : static_cast<int>(std::lround(i * range / (k - 1))));
  }
  return tops;
}

/// Every valid center slice crossed with the evenly spaced tops.
inline std::vector<WindowPosition> test_window_positions(const Dims& d, int channels, int width,
                                                         double overlap_fraction = 0.5) {
  detail::check_window_fit(d, channels, width);
  const std::vector<int> tops = window_tops(d.rows, width, overlap_fraction);
  const int half = channels / 2;
  std::vector<WindowPosition> out;
  for (int s = half; s + half < static_cast<int>(d.slices); ++s) {
    for (int t : tops) out.push_back({s, t});
  }
  return out;
}

inline std::vector<WindowSample> test_windows(const Volume& roi, const PatientMeta& meta, int channels, int width,
                                              double overlap_fraction = 0.5) {
  std::vector<WindowSample> out;
  for (const auto& p : test_window_positions(roi.dims(), channels, width, overlap_fraction)) {
    out.push_back(crop_window(roi, meta, channels, width, p));
  }
  return out;
}

/// Per-feature z-scoring fitted on training conditions (population std).
/// A feature with zero spread is flagged constant and always maps to 0.
class Standardizer {
 public:
  Standardizer() { std_.fill(1.0); }

  static Standardizer fit(std::span<const ConditionArray> samples) {
    if (samples.size() < 2) throw ValidationError("standardizer needs at least 2 samples");
    Standardizer s;
    const double n = static_cast<double>(samples.size());
    for (std::size_t f = 0; f < kConditionDim; ++f) {
      double mean = 0.0;
      for (const auto& y : samples) mean += y[f];
      mean /= n;
      double var = 0.0;
      for (const auto& y : samples) var += (y[f] - mean) * (y[f] - mean);
      var /= n;
      s.mean_[f] = mean;
      const double sd = std::sqrt(var);
      s.constant_[f] = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
      s.std_[f] = s.constant_[f] ? 1.0 : sd;
    }
    return s;
  }

  ConditionArray apply(const ConditionArray& raw) const {
    ConditionArray out{};
    for (std::size_t f = 0; f < kConditionDim; ++f) {
      if (!std::isfinite(raw[f])) throw ValidationError("non-finite condition feature");
      out[f] = constant_[f] ? 0.0 : (raw[f] - mean_[f]) / std_[f];
    }
    return out;
  }

  const ConditionArray& mean() const noexcept { return mean_; }
  const ConditionArray& stddev() const noexcept { return std_; }
  const std::array<bool, kConditionDim>& constant() const noexcept { return constant_; }

  static Standardizer from_parts(const ConditionArray& mean, const ConditionArray& sd,
                                 const std::array<bool, kConditionDim>& constant) {
    Standardizer s;
    s.mean_ = mean;
    s.std_ = sd;
    s.constant_ = constant;
    for (std::size_t f = 0; f < kConditionDim; ++f) {
      if (!(s.std_[f] > 0.0) || !std::isfinite(s.mean_[f])) throw ValidationError("invalid standardizer parameters");
    }
    return s;
  }

  friend bool operator==(const Standardizer&, const Standardizer&) = default;

 private:
  ConditionArray mean_{};
  ConditionArray std_{};
  std::array<bool, kConditionDim> constant_{};
};

}  // namespace volscan
