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

// Conditional beta-VAE with a spatial latent.
//
// Encoder: conv3x3 stem, four downsampling residual stages (W -> W/16) with
// widths base, 2*base, 4*base, 8*base, then norm/silu and two conv3x3 heads
// producing mu and logvar of shape latent_channels x W/16 x W/16.
// Decoder mirrors it with upsampling stages and a sigmoid output. Every
// normalization layer is conditioned on y.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "volscan/error.hpp"
#include "volscan/nn/layers.hpp"
#include "volscan/nn/tensor.hpp"
#include "volscan/random.hpp"
#include "volscan/windowing.hpp"

namespace volscan {

struct ModelConfig {
  int input_width = 64;
  int channels = 5;
  int latent_channels = 32;
  int base_width = 32;
  int n_resblocks = 1;  // per resolution; the first one resamples
  double beta = 1.0;
  int anneal_epochs = 20;
  double lr = 1e-3;
  int batch_size = 16;
  int epochs = 30;
  int windows_per_volume = 4;
  std::uint64_t seed = 0;
  // Which of (age, weight, sex, w_z, w_y) feed the model; disabled ones are zeroed.
  std::array<bool, kConditionDim> use_condition{false, false, true, true, true};

  int latent_size() const noexcept { return input_width / 16; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.input_width < 16 || c.input_width % 16 != 0) throw ValidationError("input_width must be a positive multiple of 16");
  if (c.channels < 1 || c.channels % 2 == 0) throw ValidationError("channels must be odd");
  if (c.latent_channels < 1 || c.base_width < 1 || c.n_resblocks < 1) throw ValidationError("model widths must be positive");
  if (!std::isfinite(c.beta) || c.beta < 0.0) throw ValidationError("beta must be finite and >= 0");
  if (c.anneal_epochs < 0) throw ValidationError("anneal_epochs must be >= 0");
  if (!(c.lr > 0.0)) throw ValidationError("lr must be > 0");
  if (c.batch_size < 2) throw ValidationError("batch_size must be >= 2 for batch statistics");
  if (c.epochs < 0 || c.windows_per_volume < 1) throw ValidationError("epochs >= 0 and windows_per_volume >= 1 required");
}

/// Linear warm-up of the KL weight over the first anneal_epochs epochs.
inline double beta_schedule(int epoch, const ModelConfig& cfg) {
  if (epoch < 0) throw ValidationError("epoch must be >= 0");
  if (cfg.anneal_epochs == 0) return cfg.beta;
  return cfg.beta * std::min(1.0, static_cast<double>(epoch) / cfg.anneal_epochs);
}

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

template <class T>
struct LatentDistribution {
  nn::Tensor<T> mu;
  nn::Tensor<T> logvar;  // clamped to [kLogvarMin, kLogvarMax]
};

/// 0.5 * sum(mu^2 + exp(logvar) - logvar - 1) over every element (and batch).
template <class T>
double kl_divergence(const LatentDistribution<T>& q) {
  nn::require_same_shape(q.mu, q.logvar, "kl_divergence");
  double acc = 0.0;
  for (std::size_t i = 0; i < q.mu.size(); ++i) {
    const double m = q.mu.data[i], lv = q.logvar.data[i];
    acc += m * m + std::exp(lv) - lv - 1.0;
  }
  return 0.5 * acc;
}

template <class T>
double sum_squared_error(const nn::Tensor<T>& x, const nn::Tensor<T>& xhat) {
  nn::require_same_shape(x, xhat, "reconstruction");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x.data[i]) - static_cast<double>(xhat.data[i]);
    acc += d * d;
  }
  return acc;
}

/// ||x - xhat||^2 + beta * KL(q || N(0, I)), summed over the batch.
template <class T>
double vae_loss(const nn::Tensor<T>& x, const nn::Tensor<T>& xhat, const LatentDistribution<T>& q, double beta) {
  return sum_squared_error(x, xhat) + beta * kl_divergence(q);
}

/// z = mu + exp(logvar / 2) * eps.
template <class T>
nn::Tensor<T> reparam_with(const LatentDistribution<T>& q, const nn::Tensor<T>& eps) {
  nn::require_same_shape(q.mu, eps, "reparam");
  nn::Tensor<T> z = q.mu;
  for (std::size_t i = 0; i < z.size(); ++i) z.data[i] += std::exp(q.logvar.data[i] / T(2)) * eps.data[i];
  return z;
}

template <class T>
nn::Tensor<T> standard_normal_like(const nn::Tensor<T>& like, Rng& rng) {
  nn::Tensor<T> eps(like.n, like.c, like.h, like.w);
  for (T& e : eps.data) e = static_cast<T>(rng.normal());
  return eps;
}

template <class T>
nn::Tensor<T> reparam_sample(const LatentDistribution<T>& q, Rng& rng) {
  return reparam_with(q, standard_normal_like(q.mu, rng));
}

struct LossParts {
  double total = 0.0;           // (recon + beta * kl) / batch
  double reconstruction = 0.0;  // per-sample sum of squares
  double kl = 0.0;              // per-sample KL
};

template <class T>
class Cvae {
 public:
  Cvae() = default;

  explicit Cvae(const ModelConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    Rng rng(derive_seed(cfg.seed, "init"));
    const int D = static_cast<int>(kConditionDim);
    const int b = cfg.base_width;
    const std::array<int, 4> widths{b, 2 * b, 4 * b, 8 * b};

    enc_stem_ = nn::Conv2d<T>("enc.stem", cfg.channels, b, 3, 1, rng);
    int in = b;
    for (int stage = 0; stage < 4; ++stage) {
      for (int k = 0; k < cfg.n_resblocks; ++k) {
        const std::string name = "enc.stage" + std::to_string(stage) + ".block" + std::to_string(k);
        enc_blocks_.emplace_back(name, in, widths[stage], k == 0 ? nn::Resample::down : nn::Resample::none, D, rng);
        in = widths[stage];
      }
    }
    enc_norm_ = nn::CondNorm<T>("enc.head.norm", in, D, rng);
    mu_head_ = nn::Conv2d<T>("enc.head.mu", in, cfg.latent_channels, 3, 1, rng, 0.5);
    logvar_head_ = nn::Conv2d<T>("enc.head.logvar", in, cfg.latent_channels, 3, 1, rng, 0.05);

    dec_stem_ = nn::Conv2d<T>("dec.stem", cfg.latent_channels, widths[3], 3, 1, rng);
    in = widths[3];
    const std::array<int, 4> up_widths{widths[2], widths[1], widths[0], widths[0]};
    for (int stage = 0; stage < 4; ++stage) {
      for (int k = 0; k < cfg.n_resblocks; ++k) {
        const std::string name = "dec.stage" + std::to_string(stage) + ".block" + std::to_string(k);
        dec_blocks_.emplace_back(name, in, up_widths[stage], k == 0 ? nn::Resample::up : nn::Resample::none, D, rng);
        in = up_widths[stage];
      }
    }
    dec_norm_ = nn::CondNorm<T>("dec.out.norm", in, D, rng);
    out_conv_ = nn::Conv2d<T>("dec.out.conv", in, cfg.channels, 3, 1, rng, 0.5);
  }

  const ModelConfig& config() const noexcept { return cfg_; }

  LatentDistribution<T> encode(const nn::Tensor<T>& x, const nn::Tensor<T>& y) const {
    check_input(x, y);
    nn::Tensor<T> h = enc_stem_.forward(x);
    for (const auto& blk : enc_blocks_) h = blk.forward_infer(h, y);
    const nn::Tensor<T> r = nn::silu(enc_norm_.forward_infer(h, y));
    LatentDistribution<T> q{mu_head_.forward(r), logvar_head_.forward(r)};
    clamp_logvar(q.logvar);
    return q;
  }

  nn::Tensor<T> decode(const nn::Tensor<T>& z, const nn::Tensor<T>& y) const {
    check_latent(z, y);
    nn::Tensor<T> h = dec_stem_.forward(z);
    for (const auto& blk : dec_blocks_) h = blk.forward_infer(h, y);
    nn::Tensor<T> out = out_conv_.forward(nn::silu(dec_norm_.forward_infer(h, y)));
    for (T& v : out.data) v = sigmoid(v);
    return out;
  }

  /// Training-mode forward and backward for one batch with the given noise.
  /// Gradients are accumulated (call zero_grad first); returns loss parts.
  LossParts loss_and_grad(const nn::Tensor<T>& x, const nn::Tensor<T>& y, double beta, const nn::Tensor<T>& eps,
                          bool update_running = true) {
    check_input(x, y);
    const int N = x.n;

    // Encoder.
    std::vector<typename nn::ResBlock<T>::Tape> enc_tapes(enc_blocks_.size());
    nn::Tensor<T> h = enc_stem_.forward(x);
    for (std::size_t i = 0; i < enc_blocks_.size(); ++i) h = enc_blocks_[i].forward_train(h, y, enc_tapes[i], update_running);
    typename nn::CondNorm<T>::Stats enc_stats;
    const nn::Tensor<T> enc_feat = h;
    const nn::Tensor<T> enc_a = enc_norm_.forward_train(h, y, enc_stats, update_running);
    const nn::Tensor<T> enc_r = nn::silu(enc_a);
    LatentDistribution<T> q{mu_head_.forward(enc_r), logvar_head_.forward(enc_r)};
    const nn::Tensor<T> logvar_raw = q.logvar;
    clamp_logvar(q.logvar);
    const nn::Tensor<T> z = reparam_with(q, eps);

    // Decoder.
    std::vector<typename nn::ResBlock<T>::Tape> dec_tapes(dec_blocks_.size());
    h = dec_stem_.forward(z);
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i) h = dec_blocks_[i].forward_train(h, y, dec_tapes[i], update_running);
    typename nn::CondNorm<T>::Stats dec_stats;
    const nn::Tensor<T> dec_feat = h;
    const nn::Tensor<T> dec_a = dec_norm_.forward_train(h, y, dec_stats, update_running);
    const nn::Tensor<T> dec_r = nn::silu(dec_a);
    nn::Tensor<T> xhat = out_conv_.forward(dec_r);
    for (T& v : xhat.data) v = sigmoid(v);

    LossParts parts;
    const double recon = sum_squared_error(x, xhat);
    const double kl = kl_divergence(q);
    parts.reconstruction = recon / N;
    parts.kl = kl / N;
    parts.total = (recon + beta * kl) / N;

    // Backward: d(total)/d(xhat) then through the sigmoid.
    const T inv_n = T(1) / static_cast<T>(N);
    nn::Tensor<T> g(xhat.n, xhat.c, xhat.h, xhat.w);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T xh = xhat.data[i];
      g.data[i] = T(2) * (xh - x.data[i]) * inv_n * xh * (T(1) - xh);
    }
    g = out_conv_.backward(dec_r, g);
    nn::silu_backward_inplace(dec_a, g);
    g = dec_norm_.backward(dec_feat, y, dec_stats, g);
    for (std::size_t i = dec_blocks_.size(); i-- > 0;) g = dec_blocks_[i].backward(dec_tapes[i], y, g);
    const nn::Tensor<T> dz = dec_stem_.backward(z, g);

    // Latent: z = mu + exp(lv/2) eps, plus the KL term.
    const T b = static_cast<T>(beta);
    nn::Tensor<T> dmu(q.mu.n, q.mu.c, q.mu.h, q.mu.w), dlv(q.mu.n, q.mu.c, q.mu.h, q.mu.w);
    for (std::size_t i = 0; i < dz.size(); ++i) {
      const T lv = q.logvar.data[i];
      const T sd = std::exp(lv / T(2));
      dmu.data[i] = dz.data[i] + b * q.mu.data[i] * inv_n;
      const bool active = logvar_raw.data[i] > T(kLogvarMin) && logvar_raw.data[i] < T(kLogvarMax);
      dlv.data[i] = active ? dz.data[i] * eps.data[i] * sd / T(2) + b * (std::exp(lv) - T(1)) / T(2) * inv_n : T(0);
    }
    g = mu_head_.backward(enc_r, dmu);
    nn::add_inplace(g, logvar_head_.backward(enc_r, dlv));
    nn::silu_backward_inplace(enc_a, g);
    g = enc_norm_.backward(enc_feat, y, enc_stats, g);
    for (std::size_t i = enc_blocks_.size(); i-- > 0;) g = enc_blocks_[i].backward(enc_tapes[i], y, g);
    enc_stem_.backward(x, g);
    return parts;
  }

  template <class F>
  void visit_params(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit_params(F&& f) const {
    visit_impl(*this, f);
  }
  template <class F>
  void visit_buffers(F&& f) {
    buffers_impl(*this, f);
  }
  template <class F>
  void visit_buffers(F&& f) const {
    buffers_impl(*this, f);
  }

  void zero_grad() {
    visit_params([](nn::Parameter<T>& p) { p.zero_grad(); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_params([&](const nn::Parameter<T>& p) { n += p.size(); });
    return n;
  }

  nn::CondNorm<T>& first_encoder_norm() { return enc_norm_; }

 private:
  static T sigmoid(T v) { return T(1) / (T(1) + std::exp(-v)); }

  static void clamp_logvar(nn::Tensor<T>& lv) {
    for (T& v : lv.data) v = std::clamp(v, T(kLogvarMin), T(kLogvarMax));
  }

  void check_input(const nn::Tensor<T>& x, const nn::Tensor<T>& y) const {
    if (x.c != cfg_.channels || x.h != cfg_.input_width || x.w != cfg_.input_width) {
      throw ShapeError("model expects [N," + std::to_string(cfg_.channels) + "," + std::to_string(cfg_.input_width) + "," +
                       std::to_string(cfg_.input_width) + "], got " + x.shape_string());
    }
    if (y.n != x.n || y.c != static_cast<int>(kConditionDim) || y.h != 1 || y.w != 1) {
      throw ShapeError("condition batch must be [N,5,1,1], got " + y.shape_string());
    }
  }

  void check_latent(const nn::Tensor<T>& z, const nn::Tensor<T>& y) const {
    const int s = cfg_.latent_size();
    if (z.c != cfg_.latent_channels || z.h != s || z.w != s) {
      throw ShapeError("latent must be [N," + std::to_string(cfg_.latent_channels) + "," + std::to_string(s) + "," +
                       std::to_string(s) + "], got " + z.shape_string());
    }
    if (y.n != z.n || y.c != static_cast<int>(kConditionDim)) throw ShapeError("condition batch mismatch");
  }

  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    self.enc_stem_.visit(f);
    for (auto& b : self.enc_blocks_) b.visit(f);
    self.enc_norm_.visit(f);
    self.mu_head_.visit(f);
    self.logvar_head_.visit(f);
    self.dec_stem_.visit(f);
    for (auto& b : self.dec_blocks_) b.visit(f);
    self.dec_norm_.visit(f);
    self.out_conv_.visit(f);
  }

  template <class Self, class F>
  static void buffers_impl(Self& self, F& f) {
    for (auto& b : self.enc_blocks_) b.visit_buffers(f);
    self.enc_norm_.visit_buffers(f);
    for (auto& b : self.dec_blocks_) b.visit_buffers(f);
    self.dec_norm_.visit_buffers(f);
  }

  ModelConfig cfg_;
  nn::Conv2d<T> enc_stem_;
  std::vector<nn::ResBlock<T>> enc_blocks_;
  nn::CondNorm<T> enc_norm_;
  nn::Conv2d<T> mu_head_, logvar_head_;
  nn::Conv2d<T> dec_stem_;
  std::vector<nn::ResBlock<T>> dec_blocks_;
  nn::CondNorm<T> dec_norm_;
  nn::Conv2d<T> out_conv_;
};

/// Packs condition arrays into an [N,5,1,1] tensor.
template <class T>
nn::Tensor<T> condition_batch(std::span<const ConditionArray> ys) {
  nn::Tensor<T> y(static_cast<int>(ys.size()), static_cast<int>(kConditionDim), 1, 1);
  for (std::size_t i = 0; i < ys.size(); ++i) {
    for (std::size_t f = 0; f < kConditionDim; ++f) y.data[i * kConditionDim + f] = static_cast<T>(ys[i][f]);
  }
  return y;
}

/// Standardized condition with disabled features zeroed.
inline ConditionArray model_condition(const Standardizer& st, const std::array<bool, kConditionDim>& use,
                                      const ConditionArray& raw) {
  ConditionArray y = st.apply(raw);
  for (std::size_t f = 0; f < kConditionDim; ++f) {
    if (!use[f]) y[f] = 0.0;
  }
  return y;
}

}  // namespace volscan
