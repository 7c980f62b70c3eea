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

// Training loop (Adam, KL warm-up, seeded window sampling) and the model
// checkpoint file.
//
// Checkpoint layout: magic "VSCK1\n", uint32 LE header length, a JSON header
// (config, standardizer, history, tensor table), then every tensor as
// little-endian float32 in table order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "volscan/cvae.hpp"
#include "volscan/data_model.hpp"
#include "volscan/error.hpp"
#include "volscan/random.hpp"
#include "volscan/windowing.hpp"

namespace volscan {

/// A registered (ROI) training volume with its patient metadata.
struct TrainingVolume {
  Volume roi;
  PatientMeta meta;
};

struct EpochRecord {
  int epoch = 0;
  double beta = 0.0;
  double loss = 0.0;            // mean per-window total loss
  double reconstruction = 0.0;  // mean per-window sum of squared errors
  double kl = 0.0;              // mean per-window KL
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct ModelCheckpoint {
  ModelConfig config;
  Standardizer standardizer;
  Cvae<float> model;
  std::vector<EpochRecord> history;
};

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
template <class T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(Cvae<T>& model) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    std::size_t k = 0;
    model.visit_params([&](nn::Parameter<T>& p) {
      if (k == m_.size()) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        p.value[i] -= static_cast<T>(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
      }
      ++k;
    });
  }

  long long steps() const noexcept { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

namespace detail {

inline void check_training_set(std::span<const TrainingVolume> vols, const ModelConfig& cfg) {
  if (vols.empty()) throw ValidationError("training set is empty");
  for (const auto& tv : vols) {
    validate(tv.roi);
    validate(tv.meta);
    detail::check_window_fit(tv.roi.dims(), cfg.channels, cfg.input_width);
  }
}

}  // namespace detail

/// Fits the condition standardizer on the raw conditions of every test-grid
/// window position of the training ROIs.
inline Standardizer fit_condition_standardizer(std::span<const TrainingVolume> vols, const ModelConfig& cfg) {
  std::vector<ConditionArray> raws;
  for (const auto& tv : vols) {
    const Dims d = tv.roi.dims();
    for (const auto& p : test_window_positions(d, cfg.channels, cfg.input_width)) {
      raws.push_back(raw_condition(tv.meta, slice_coordinate(tv.roi, p.center_slice),
                                   window_coordinate(static_cast<std::size_t>(p.top_row), d.rows, cfg.input_width)));
    }
  }
  return Standardizer::fit(raws);
}

/// Stacks windows into an [N,c,W,W] tensor and their model conditions into [N,5,1,1].
inline std::pair<nn::Tensor<float>, nn::Tensor<float>> make_batch(std::span<const WindowSample> windows,
                                                                  const Standardizer& st,
                                                                  const std::array<bool, kConditionDim>& use) {
  if (windows.empty()) throw ValidationError("empty batch");
  const int c = windows.front().channels, w = windows.front().width;
  nn::Tensor<float> x(static_cast<int>(windows.size()), c, w, w);
  std::vector<ConditionArray> ys;
  ys.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    std::copy(windows[i].x.begin(), windows[i].x.end(), x.sample(static_cast<int>(i)));
    ys.push_back(model_condition(st, use, windows[i].y_raw));
  }
  return {std::move(x), condition_batch<float>(ys)};
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains a model from scratch. Deterministic given cfg.seed.
inline ModelCheckpoint train(std::span<const TrainingVolume> vols, const ModelConfig& cfg,
                             const EpochCallback& on_epoch = {}) {
  validate(cfg);
  detail::check_training_set(vols, cfg);
  ModelCheckpoint ck{cfg, fit_condition_standardizer(vols, cfg), Cvae<float>(cfg), {}};
  Adam<float> opt(cfg.lr);
  const std::size_t n = vols.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  long long step = 0;

  for (int e = 0; e < cfg.epochs; ++e) {
    const double beta = beta_schedule(e, cfg);
    std::vector<WindowSample> windows;
    windows.reserve(n * static_cast<std::size_t>(cfg.windows_per_volume));
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(cfg.seed, "window", static_cast<std::uint64_t>(e) * n + i));
      for (int k = 0; k < cfg.windows_per_volume; ++k) {
        windows.push_back(sample_train_window(vols[i].roi, vols[i].meta, cfg.channels, cfg.input_width, rng));
      }
    }
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(e)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<long long>(i) - 1))]);
    }

    EpochRecord rec;
    rec.epoch = e;
    rec.beta = beta;
    std::size_t seen = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += bs) {
      const std::size_t count = std::min(bs, order.size() - start);
      if (count < 2) break;  // batch statistics need two samples
      std::vector<WindowSample> batch;
      batch.reserve(count);
      for (std::size_t j = 0; j < count; ++j) batch.push_back(windows[order[start + j]]);
      auto [x, y] = make_batch(batch, ck.standardizer, cfg.use_condition);
      Rng eps_rng(derive_seed(cfg.seed, "eps", static_cast<std::uint64_t>(step)));
      nn::Tensor<float> eps(x.n, cfg.latent_channels, cfg.latent_size(), cfg.latent_size());
      for (float& v : eps.data) v = static_cast<float>(eps_rng.normal());

      ck.model.zero_grad();
      const LossParts parts = ck.model.loss_and_grad(x, y, beta, eps);
      if (!std::isfinite(parts.total)) {
        throw StageError("train", "non-finite loss at epoch " + std::to_string(e) + ", step " +
                                      std::to_string(step) + " (reconstruction " +
                                      std::to_string(parts.reconstruction) + ", kl " + std::to_string(parts.kl) + ")");
      }
      opt.step(ck.model);
      ++step;
      rec.loss += parts.total * static_cast<double>(count);
      rec.reconstruction += parts.reconstruction * static_cast<double>(count);
      rec.kl += parts.kl * static_cast<double>(count);
      seen += count;
    }
    if (seen > 0) {
      rec.loss /= static_cast<double>(seen);
      rec.reconstruction /= static_cast<double>(seen);
      rec.kl /= static_cast<double>(seen);
    }
    ck.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return ck;
}

// ---------------------------------------------------------------------------
// JSON for configuration records.

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["input_width"] = c.input_width;
  j["channels"] = c.channels;
  j["latent_channels"] = c.latent_channels;
  j["base_width"] = c.base_width;
  j["n_resblocks"] = c.n_resblocks;
  j["beta"] = c.beta;
  j["anneal_epochs"] = c.anneal_epochs;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["windows_per_volume"] = c.windows_per_volume;
  j["seed"] = c.seed;
  nlohmann::ordered_json use;
  for (std::size_t f = 0; f < kConditionDim; ++f) use[std::string(kConditionNames[f])] = c.use_condition[f];
  j["use_condition"] = use;
  return j;
}

namespace detail {

/// Reads `key` from `j` into `out` when present; rejects wrong types.
template <class V>
void read_field(const nlohmann::json& j, const char* key, V& out, std::string_view where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string(where) + ": field '" + key + "' has the wrong type");
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                           std::string_view where) {
  if (!j.is_object()) throw ValidationError(std::string(where) + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ValidationError(std::string(where) + ": unknown field '" + k + "'");
    }
  }
}

}  // namespace detail

/// Missing fields keep their defaults; unknown fields are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"input_width", "channels", "latent_channels", "base_width", "n_resblocks", "beta",
                          "anneal_epochs", "lr", "batch_size", "epochs", "windows_per_volume", "seed", "use_condition"},
                         "model");
  ModelConfig c;
  detail::read_field(j, "input_width", c.input_width, "model");
  detail::read_field(j, "channels", c.channels, "model");
  detail::read_field(j, "latent_channels", c.latent_channels, "model");
  detail::read_field(j, "base_width", c.base_width, "model");
  detail::read_field(j, "n_resblocks", c.n_resblocks, "model");
  detail::read_field(j, "beta", c.beta, "model");
  detail::read_field(j, "anneal_epochs", c.anneal_epochs, "model");
  detail::read_field(j, "lr", c.lr, "model");
  detail::read_field(j, "batch_size", c.batch_size, "model");
  detail::read_field(j, "epochs", c.epochs, "model");
  detail::read_field(j, "windows_per_volume", c.windows_per_volume, "model");
  detail::read_field(j, "seed", c.seed, "model");
  if (auto it = j.find("use_condition"); it != j.end()) {
    detail::reject_unknown(*it, {"age", "weight", "sex", "w_z", "w_y"}, "model.use_condition");
    for (std::size_t f = 0; f < kConditionDim; ++f) {
      detail::read_field(*it, std::string(kConditionNames[f]).c_str(), c.use_condition[f], "model.use_condition");
    }
  }
  validate(c);
  return c;
}

inline nlohmann::ordered_json to_json(const Standardizer& s) {
  nlohmann::ordered_json j;
  j["mean"] = s.mean();
  j["std"] = s.stddev();
  j["constant"] = s.constant();
  return j;
}

inline Standardizer standardizer_from_json(const nlohmann::json& j) {
  try {
    return Standardizer::from_parts(j.at("mean").get<ConditionArray>(), j.at("std").get<ConditionArray>(),
                                    j.at("constant").get<std::array<bool, kConditionDim>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("standardizer: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoint persistence.

inline constexpr std::string_view kCheckpointMagic = "VSCK1\n";

inline std::string encode_checkpoint(const ModelCheckpoint& ck) {
  nlohmann::ordered_json header;
  header["config"] = to_json(ck.config);
  header["standardizer"] = to_json(ck.standardizer);
  nlohmann::ordered_json hist = nlohmann::ordered_json::array();
  for (const auto& r : ck.history) {
    hist.push_back({{"epoch", r.epoch}, {"beta", r.beta}, {"loss", r.loss}, {"reconstruction", r.reconstruction},
                    {"kl", r.kl}});
  }
  header["history"] = hist;

  std::vector<const std::vector<float>*> blobs;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  ck.model.visit_params([&](const nn::Parameter<float>& p) {
    table.push_back({{"name", p.name}, {"kind", "param"}, {"shape", p.shape}, {"count", p.size()}});
    blobs.push_back(&p.value);
  });
  ck.model.visit_buffers([&](const nn::Buffer<float>& b) {
    table.push_back({{"name", b.name}, {"kind", "buffer"}, {"shape", {b.value.size()}}, {"count", b.value.size()}});
    blobs.push_back(&b.value);
  });
  header["tensors"] = table;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic);
  detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out.append(text);
  for (const auto* blob : blobs) {
    for (float v : *blob) detail::put_u32_le(out, detail::float_bits_le(v));
  }
  return out;
}

inline ModelCheckpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() + 4 || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint32_t hlen = detail::get_u32_le(base + kCheckpointMagic.size());
  std::size_t pos = kCheckpointMagic.size() + 4;
  if (pos + hlen > bytes.size()) throw FormatError("checkpoint: header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  pos += hlen;
  if (!header.is_object() || !header.contains("config") || !header.contains("tensors")) {
    throw FormatError("checkpoint: header lacks config or tensor table");
  }

  ModelCheckpoint ck;
  ck.config = model_config_from_json(header.at("config"));
  ck.standardizer = standardizer_from_json(header.at("standardizer"));
  try {
    for (const auto& r : header.at("history")) {
      ck.history.push_back({r.at("epoch").get<int>(), r.at("beta").get<double>(), r.at("loss").get<double>(),
                            r.at("reconstruction").get<double>(), r.at("kl").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint history: ") + e.what());
  }
  ck.model = Cvae<float>(ck.config);

  const auto& table = header.at("tensors");
  if (!table.is_array()) throw FormatError("checkpoint: tensor table must be an array");
  std::size_t idx = 0;
  auto read_blob = [&](const std::string& name, std::string_view kind, std::vector<float>& dst) {
    if (idx >= table.size()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    const auto& entry = table[idx++];
    if (entry.value("name", "") != name || entry.value("kind", "") != kind) {
      throw FormatError("checkpoint: expected tensor '" + name + "', found '" + entry.value("name", "?") + "'");
    }
    const auto count = entry.value("count", std::size_t{0});
    if (count != dst.size()) {
      throw FormatError("checkpoint: tensor '" + name + "' has " + std::to_string(count) + " values, model expects " +
                        std::to_string(dst.size()));
    }
    if (pos + 4 * count > bytes.size()) throw FormatError("checkpoint: truncated data for tensor '" + name + "'");
    for (std::size_t i = 0; i < count; ++i, pos += 4) {
      dst[i] = std::bit_cast<float>(detail::get_u32_le(base + pos));
    }
  };
  ck.model.visit_params([&](nn::Parameter<float>& p) { read_blob(p.name, "param", p.value); });
  ck.model.visit_buffers([&](nn::Buffer<float>& b) { read_blob(b.name, "buffer", b.value); });
  if (idx != table.size()) throw FormatError("checkpoint: tensor table has extra entries");
  if (pos != bytes.size()) {
    throw FormatError("checkpoint: " + std::to_string(bytes.size() - pos) + " trailing bytes after tensor data");
  }
  return ck;
}

inline void save_checkpoint(const ModelCheckpoint& ck, const fs::path& path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline ModelCheckpoint load_checkpoint(const fs::path& path) {
  try {
    return decode_checkpoint(detail::read_file(path));
  } catch (const FormatError& e) {
    throw PersistenceError(e.what(), path.string());
  }
}

}  // namespace volscan
