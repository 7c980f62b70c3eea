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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volscan/error.hpp"

namespace volscan::nn {

/// NCHW batch of feature maps.
template <class T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T{})
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c) * h * w; }

  T* sample(int i) noexcept { return data.data() + i * sample_size(); }
  const T* sample(int i) const noexcept { return data.data() + i * sample_size(); }

  T& at(int in, int ic, int y, int x) noexcept {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x];
  }
  const T& at(int in, int ic, int y, int x) const noexcept {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + y) * w + x];
  }

  bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
  std::string shape_string() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
  }
};

template <class T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatrixRM<T>>;
template <class T>
using ConstMapRM = Eigen::Map<const MatrixRM<T>>;

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ShapeError(std::string(what) + ": " + a.shape_string() + " vs " + b.shape_string());
}

/// x * sigmoid(x). Smooth, so finite-difference checks are meaningful.
template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.data) v = v / (T(1) + std::exp(-v));
  return y;
}

/// Multiplies `grad` by silu'(pre) in place.
template <class T>
void silu_backward_inplace(const Tensor<T>& pre, Tensor<T>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const T x = pre.data[i];
    const T sg = T(1) / (T(1) + std::exp(-x));
    grad.data[i] *= sg * (T(1) + x * (T(1) - sg));
  }
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  Tensor<T> y(x.n, x.c, 2 * x.h, 2 * x.w);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      for (int r = 0; r < y.h; ++r) {
        const T* src = &x.at(i, ch, r / 2, 0);
        T* dst = &y.at(i, ch, r, 0);
        for (int q = 0; q < y.w; ++q) dst[q] = src[q / 2];
      }
    }
  }
  return y;
}

/// Adjoint of nearest-neighbour upsampling: sums each 2x2 block.
template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& g) {
  Tensor<T> x(g.n, g.c, g.h / 2, g.w / 2);
  for (int i = 0; i < g.n; ++i) {
    for (int ch = 0; ch < g.c; ++ch) {
      for (int r = 0; r < g.h; ++r) {
        const T* src = &g.at(i, ch, r, 0);
        T* dst = &x.at(i, ch, r / 2, 0);
        for (int q = 0; q < g.w; ++q) dst[q / 2] += src[q];
      }
    }
  }
  return x;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace volscan::nn
