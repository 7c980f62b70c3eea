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

// Layers with explicit forward/backward passes. Backward functions take the
// forward input again (recomputing cheap intermediates) and accumulate
// parameter gradients into Parameter::grad.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "volscan/nn/tensor.hpp"
#include "volscan/random.hpp"

namespace volscan::nn {

template <class T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    value.assign(count, T(0));
    grad.assign(count, T(0));
  }
  std::size_t size() const noexcept { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
  void fill_normal(Rng& rng, double stddev) {
    for (T& v : value) v = static_cast<T>(stddev * rng.normal());
  }
};

/// Non-trainable state saved with the model (normalization running stats).
template <class T>
struct Buffer {
  std::string name;
  std::vector<T> value;
};

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, Rng& rng, double gain = 1.0)
      : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(kernel / 2),
        weight_(name + ".weight", {out_ch, in_ch, kernel, kernel}), bias_(name + ".bias", {out_ch}) {
    const double fan_in = static_cast<double>(in_ch) * kernel * kernel;
    weight_.fill_normal(rng, gain * std::sqrt(2.0 / fan_in));
  }

  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }
  int out_size(int n) const noexcept { return (n + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.c != in_) throw ShapeError("conv " + weight_.name + ": expected " + std::to_string(in_) + " channels, got " + x.shape_string());
    const int ho = out_size(x.h), wo = out_size(x.w);
    const int K = in_ * k_ * k_, P = ho * wo;
    const std::size_t NP = static_cast<std::size_t>(x.n) * P;
    // One GEMM for the whole batch: columns are grouped by sample.
    std::vector<T> col(static_cast<std::size_t>(K) * NP);
    for (int i = 0; i < x.n; ++i) im2col(x.sample(i), x.h, x.w, ho, wo, col.data() + static_cast<std::size_t>(i) * P, NP);
    MatrixRM<T> Y(out_, static_cast<Eigen::Index>(NP));
    Y.noalias() = ConstMapRM<T>(weight_.value.data(), out_, K) * ConstMapRM<T>(col.data(), K, static_cast<Eigen::Index>(NP));
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), out_);
    Tensor<T> y(x.n, out_, ho, wo);
    for (int i = 0; i < x.n; ++i) {
      MapRM<T>(y.sample(i), out_, P) = Y.middleCols(static_cast<Eigen::Index>(i) * P, P);
      MapRM<T>(y.sample(i), out_, P).colwise() += b;
    }
    return y;
  }

  /// Accumulates weight/bias gradients and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const int ho = out_size(x.h), wo = out_size(x.w);
    const int K = in_ * k_ * k_, P = ho * wo;
    if (dy.n != x.n || dy.c != out_ || dy.h != ho || dy.w != wo) throw ShapeError("conv backward: gradient shape");
    const std::size_t NP = static_cast<std::size_t>(x.n) * P;
    const auto NPi = static_cast<Eigen::Index>(NP);
    std::vector<T> col(static_cast<std::size_t>(K) * NP);
    for (int i = 0; i < x.n; ++i) im2col(x.sample(i), x.h, x.w, ho, wo, col.data() + static_cast<std::size_t>(i) * P, NP);
    MatrixRM<T> dY(out_, NPi);
    for (int i = 0; i < x.n; ++i) dY.middleCols(static_cast<Eigen::Index>(i) * P, P) = ConstMapRM<T>(dy.sample(i), out_, P);

    MapRM<T>(weight_.grad.data(), out_, K).noalias() += dY * ConstMapRM<T>(col.data(), K, NPi).transpose();
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.grad.data(), out_) += dY.rowwise().sum();

    MapRM<T> dcol(col.data(), K, NPi);  // reuse the buffer
    dcol.noalias() = ConstMapRM<T>(weight_.value.data(), out_, K).transpose() * dY;
    Tensor<T> dx(x.n, x.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i) col2im(col.data() + static_cast<std::size_t>(i) * P, x.h, x.w, ho, wo, dx.sample(i), NP);
    return dx;
  }

  Parameter<T>& weight() noexcept { return weight_; }
  Parameter<T>& bias() noexcept { return bias_; }
  const Parameter<T>& weight() const noexcept { return weight_; }
  const Parameter<T>& bias() const noexcept { return bias_; }

  template <class F>
  void visit(F&& f) {
    f(weight_);
    f(bias_);
  }
  template <class F>
  void visit(F&& f) const {
    f(weight_);
    f(bias_);
  }

 private:
  // Column matrices are row-major with leading dimension `ld`.
  void im2col(const T* x, int h, int w, int ho, int wo, T* col, std::size_t ld) const {
    for (int ci = 0; ci < in_; ++ci) {
      const T* plane = x + static_cast<std::size_t>(ci) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* row = col + (static_cast<std::size_t>(ci * k_ + ky) * k_ + kx) * ld;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ + ky - pad_;
            T* out = row + static_cast<std::size_t>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(out, out + wo, T(0));
              continue;
            }
            const T* in_row = plane + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ + kx - pad_;
              out[ox] = (ix >= 0 && ix < w) ? in_row[ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const T* col, int h, int w, int ho, int wo, T* dx, std::size_t ld) const {
    for (int ci = 0; ci < in_; ++ci) {
      T* plane = dx + static_cast<std::size_t>(ci) * h * w;
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = col + (static_cast<std::size_t>(ci * k_ + ky) * k_ + kx) * ld;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ + ky - pad_;
            if (iy < 0 || iy >= h) continue;
            T* out_row = plane + static_cast<std::size_t>(iy) * w;
            const T* in = row + static_cast<std::size_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ + kx - pad_;
              if (ix >= 0 && ix < w) out_row[ix] += in[ox];
            }
          }
        }
      }
    }
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Parameter<T> weight_, bias_;
};

/// Batch normalization whose per-channel scale (1 + s(y)) and bias b(y) are
/// affine functions of the condition vector y only.
template <class T>
class CondNorm {
 public:
  struct Stats {
    std::vector<T> mean;
    std::vector<T> invstd;
  };

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  CondNorm() = default;
  CondNorm(const std::string& name, int channels, int cond_dim, Rng& rng, double cond_init = 0.05)
      : c_(channels), d_(cond_dim),
        scale_w_(name + ".scale.weight", {channels, cond_dim}), scale_b_(name + ".scale.bias", {channels}),
        shift_w_(name + ".shift.weight", {channels, cond_dim}), shift_b_(name + ".shift.bias", {channels}),
        running_mean_{name + ".running_mean", std::vector<T>(static_cast<std::size_t>(channels), T(0))},
        running_var_{name + ".running_var", std::vector<T>(static_cast<std::size_t>(channels), T(1))} {
    scale_w_.fill_normal(rng, cond_init);
    shift_w_.fill_normal(rng, cond_init);
  }

  int channels() const noexcept { return c_; }

  /// Per-sample modulation: s(y) (scale offset) and b(y) for every channel.
  void modulation(const Tensor<T>& y, std::vector<T>& s, std::vector<T>& b) const {
    if (y.c != d_) throw ShapeError("condition vector has " + std::to_string(y.c) + " features, expected " + std::to_string(d_));
    s.assign(static_cast<std::size_t>(y.n) * c_, T(0));
    b.assign(static_cast<std::size_t>(y.n) * c_, T(0));
    for (int i = 0; i < y.n; ++i) {
      const T* yi = y.sample(i);
      for (int ch = 0; ch < c_; ++ch) {
        T as = scale_b_.value[ch], ab = shift_b_.value[ch];
        for (int k = 0; k < d_; ++k) {
          as += scale_w_.value[static_cast<std::size_t>(ch) * d_ + k] * yi[k];
          ab += shift_w_.value[static_cast<std::size_t>(ch) * d_ + k] * yi[k];
        }
        s[static_cast<std::size_t>(i) * c_ + ch] = as;
        b[static_cast<std::size_t>(i) * c_ + ch] = ab;
      }
    }
  }

  /// Batch statistics; optionally folds them into the running averages.
  Tensor<T> forward_train(const Tensor<T>& x, const Tensor<T>& y, Stats& st, bool update_running) {
    check(x, y);
    const std::size_t P = x.plane();
    const double M = static_cast<double>(x.n) * P;
    st.mean.assign(c_, T(0));
    st.invstd.assign(c_, T(0));
    for (int ch = 0; ch < c_; ++ch) {
      double sum = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.sample(i) + ch * P;
        for (std::size_t q = 0; q < P; ++q) sum += p[q];
      }
      const double mean = sum / M;
      double var = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.sample(i) + ch * P;
        for (std::size_t q = 0; q < P; ++q) var += (p[q] - mean) * (p[q] - mean);
      }
      var /= M;
      st.mean[ch] = static_cast<T>(mean);
      st.invstd[ch] = static_cast<T>(1.0 / std::sqrt(var + kEps));
      if (update_running) {
        const double unbiased = M > 1 ? var * M / (M - 1) : var;
        running_mean_.value[ch] = static_cast<T>((1 - kMomentum) * running_mean_.value[ch] + kMomentum * mean);
        running_var_.value[ch] = static_cast<T>((1 - kMomentum) * running_var_.value[ch] + kMomentum * unbiased);
      }
    }
    return apply(x, y, st.mean, st.invstd);
  }

  /// Running statistics; no state changes.
  Tensor<T> forward_infer(const Tensor<T>& x, const Tensor<T>& y) const {
    check(x, y);
    std::vector<T> invstd(c_);
    for (int ch = 0; ch < c_; ++ch) invstd[ch] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var_.value[ch]) + kEps));
    return apply(x, y, running_mean_.value, invstd);
  }

  /// Normalization with explicit statistics, then modulation.
  Tensor<T> apply(const Tensor<T>& x, const Tensor<T>& y, const std::vector<T>& mean, const std::vector<T>& invstd) const {
    std::vector<T> s, b;
    modulation(y, s, b);
    Tensor<T> out(x.n, x.c, x.h, x.w);
    const std::size_t P = x.plane();
    for (int i = 0; i < x.n; ++i) {
      for (int ch = 0; ch < c_; ++ch) {
        const T g = (T(1) + s[static_cast<std::size_t>(i) * c_ + ch]) * invstd[ch];
        const T off = b[static_cast<std::size_t>(i) * c_ + ch] - mean[ch] * g;
        const T* p = x.sample(i) + ch * P;
        T* o = out.sample(i) + ch * P;
        for (std::size_t q = 0; q < P; ++q) o[q] = p[q] * g + off;
      }
    }
    return out;
  }

  /// Backward through the batch-statistics path.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& y, const Stats& st, const Tensor<T>& dout) {
    std::vector<T> s, b;
    modulation(y, s, b);
    const std::size_t P = x.plane();
    const double M = static_cast<double>(x.n) * P;
    Tensor<T> dx(x.n, x.c, x.h, x.w);
    std::vector<T> ds(static_cast<std::size_t>(x.n) * c_), db(static_cast<std::size_t>(x.n) * c_);
    for (int ch = 0; ch < c_; ++ch) {
      const T mean = st.mean[ch], inv = st.invstd[ch];
      double sum_g = 0.0, sum_gx = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.sample(i) + ch * P;
        const T* g = dout.sample(i) + ch * P;
        const T scale = T(1) + s[static_cast<std::size_t>(i) * c_ + ch];
        double a_ds = 0.0, a_db = 0.0;
        for (std::size_t q = 0; q < P; ++q) {
          const double xh = (p[q] - mean) * inv;
          a_ds += g[q] * xh;
          a_db += g[q];
        }
        ds[static_cast<std::size_t>(i) * c_ + ch] = static_cast<T>(a_ds);
        db[static_cast<std::size_t>(i) * c_ + ch] = static_cast<T>(a_db);
        sum_g += a_db * scale;
        sum_gx += a_ds * scale;
      }
      for (int i = 0; i < x.n; ++i) {
        const T* p = x.sample(i) + ch * P;
        const T* g = dout.sample(i) + ch * P;
        T* o = dx.sample(i) + ch * P;
        const double scale = T(1) + s[static_cast<std::size_t>(i) * c_ + ch];
        for (std::size_t q = 0; q < P; ++q) {
          const double xh = (p[q] - mean) * inv;
          o[q] = static_cast<T>(inv / M * (M * g[q] * scale - sum_g - xh * sum_gx));
        }
      }
    }
    for (int i = 0; i < x.n; ++i) {
      const T* yi = y.sample(i);
      for (int ch = 0; ch < c_; ++ch) {
        const T gs = ds[static_cast<std::size_t>(i) * c_ + ch];
        const T gb = db[static_cast<std::size_t>(i) * c_ + ch];
        scale_b_.grad[ch] += gs;
        shift_b_.grad[ch] += gb;
        for (int k = 0; k < d_; ++k) {
          scale_w_.grad[static_cast<std::size_t>(ch) * d_ + k] += gs * yi[k];
          shift_w_.grad[static_cast<std::size_t>(ch) * d_ + k] += gb * yi[k];
        }
      }
    }
    return dx;
  }

  Parameter<T>& scale_weight() noexcept { return scale_w_; }
  Parameter<T>& shift_weight() noexcept { return shift_w_; }
  Parameter<T>& scale_bias() noexcept { return scale_b_; }
  Parameter<T>& shift_bias() noexcept { return shift_b_; }

  template <class F>
  void visit(F&& f) {
    f(scale_w_);
    f(scale_b_);
    f(shift_w_);
    f(shift_b_);
  }
  template <class F>
  void visit(F&& f) const {
    f(scale_w_);
    f(scale_b_);
    f(shift_w_);
    f(shift_b_);
  }
  template <class F>
  void visit_buffers(F&& f) {
    f(running_mean_);
    f(running_var_);
  }
  template <class F>
  void visit_buffers(F&& f) const {
    f(running_mean_);
    f(running_var_);
  }

 private:
  void check(const Tensor<T>& x, const Tensor<T>& y) const {
    if (x.c != c_) throw ShapeError("norm: expected " + std::to_string(c_) + " channels, got " + x.shape_string());
    if (y.n != x.n || y.c != d_) throw ShapeError("norm: condition batch " + y.shape_string() + " vs features " + x.shape_string());
  }

  int c_ = 0, d_ = 0;
  Parameter<T> scale_w_, scale_b_, shift_w_, shift_b_;
  Buffer<T> running_mean_, running_var_;
};

enum class Resample { none, down, up };

/// norm -> silu -> conv3x3 -> norm -> silu -> conv3x3, plus a skip path.
/// Down blocks stride the first conv; up blocks upsample (nearest) first.
template <class T>
class ResBlock {
 public:
  struct Tape {
    Tensor<T> x, a1, r1, h1, a2, r2;  // a = normalized, r = activated
    typename CondNorm<T>::Stats s1, s2;
  };

  ResBlock() = default;
  ResBlock(const std::string& name, int in_ch, int out_ch, Resample mode, int cond_dim, Rng& rng)
      : mode_(mode),
        n1_(name + ".norm1", in_ch, cond_dim, rng),
        conv1_(name + ".conv1", in_ch, out_ch, 3, mode == Resample::down ? 2 : 1, rng),
        n2_(name + ".norm2", out_ch, cond_dim, rng),
        conv2_(name + ".conv2", out_ch, out_ch, 3, 1, rng, 0.5) {
    if (in_ch != out_ch || mode != Resample::none) {
      skip_.emplace(name + ".skip", in_ch, out_ch, 1, mode == Resample::down ? 2 : 1, rng, 0.5);
    }
  }

  Tensor<T> forward_train(const Tensor<T>& x, const Tensor<T>& y, Tape& tape, bool update_running) {
    tape.x = x;
    tape.a1 = n1_.forward_train(x, y, tape.s1, update_running);
    tape.r1 = silu(tape.a1);
    tape.h1 = conv1_.forward(mode_ == Resample::up ? upsample2(tape.r1) : tape.r1);
    tape.a2 = n2_.forward_train(tape.h1, y, tape.s2, update_running);
    tape.r2 = silu(tape.a2);
    Tensor<T> out = conv2_.forward(tape.r2);
    add_inplace(out, skip_forward(x));
    return out;
  }

  Tensor<T> forward_infer(const Tensor<T>& x, const Tensor<T>& y) const {
    const Tensor<T> r1 = silu(n1_.forward_infer(x, y));
    const Tensor<T> h1 = conv1_.forward(mode_ == Resample::up ? upsample2(r1) : r1);
    Tensor<T> out = conv2_.forward(silu(n2_.forward_infer(h1, y)));
    add_inplace(out, skip_forward(x));
    return out;
  }

  Tensor<T> backward(const Tape& tape, const Tensor<T>& y, const Tensor<T>& dout) {
    Tensor<T> g = conv2_.backward(tape.r2, dout);
    silu_backward_inplace(tape.a2, g);
    g = n2_.backward(tape.h1, y, tape.s2, g);
    if (mode_ == Resample::up) {
      g = upsample2_backward(conv1_.backward(upsample2(tape.r1), g));
    } else {
      g = conv1_.backward(tape.r1, g);
    }
    silu_backward_inplace(tape.a1, g);
    Tensor<T> dx = n1_.backward(tape.x, y, tape.s1, g);
    if (skip_) {
      Tensor<T> ds = mode_ == Resample::up ? upsample2_backward(skip_->backward(upsample2(tape.x), dout))
                                           : skip_->backward(tape.x, dout);
      add_inplace(dx, ds);
    } else {
      add_inplace(dx, dout);
    }
    return dx;
  }

  template <class F>
  void visit(F&& f) {
    n1_.visit(f);
    conv1_.visit(f);
    n2_.visit(f);
    conv2_.visit(f);
    if (skip_) skip_->visit(f);
  }
  template <class F>
  void visit(F&& f) const {
    n1_.visit(f);
    conv1_.visit(f);
    n2_.visit(f);
    conv2_.visit(f);
    if (skip_) skip_->visit(f);
  }
  template <class F>
  void visit_buffers(F&& f) {
    n1_.visit_buffers(f);
    n2_.visit_buffers(f);
  }
  template <class F>
  void visit_buffers(F&& f) const {
    n1_.visit_buffers(f);
    n2_.visit_buffers(f);
  }

 private:
  Tensor<T> skip_forward(const Tensor<T>& x) const {
    if (!skip_) return x;
    return skip_->forward(mode_ == Resample::up ? upsample2(x) : x);
  }

  Resample mode_ = Resample::none;
  CondNorm<T> n1_;
  Conv2d<T> conv1_;
  CondNorm<T> n2_;
  Conv2d<T> conv2_;
  std::optional<Conv2d<T>> skip_;
};

}  // namespace volscan::nn
