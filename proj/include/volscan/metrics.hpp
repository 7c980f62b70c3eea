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

// Voxel-level evaluation: AUROC, AUPRC (average precision) and DICE.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "volscan/data_model.hpp"
#include "volscan/detector.hpp"
#include "volscan/error.hpp"

namespace volscan {

/// Raised when a metric is undefined for the given labels.
class UndefinedMetricError : public Error {
 public:
  using Error::Error;
};

namespace detail {

struct ScoredLabel {
  double score;
  bool positive;
};

inline std::vector<ScoredLabel> zip_scores(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
  std::vector<ScoredLabel> v(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw ValidationError("NaN score");
    v[i] = {scores[i], labels[i] != 0};
  }
  return v;
}

}  // namespace detail

/// P(score_pos > score_neg) + 0.5 P(tie), exact via sorting.
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  auto v = detail::zip_scores(scores, labels);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score < b.score; });
  double n_pos = 0, n_neg = 0, wins = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    double gp = 0, gn = 0;
    while (j < v.size() && v[j].score == v[i].score) {
      (v[j].positive ? gp : gn) += 1;
      ++j;
    }
    wins += gp * (n_neg + 0.5 * gn);  // negatives strictly below plus half the tied ones
    n_pos += gp;
    n_neg += gn;
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("AUROC needs both positive and negative labels");
  return wins / (n_pos * n_neg);
}

/// Average precision: sum over distinct thresholds (descending) of
/// (recall gain) x (precision at that threshold). Tied scores form one step.
inline double auprc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  auto v = detail::zip_scores(scores, labels);
  std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  double total_pos = 0;
  for (const auto& s : v) total_pos += s.positive ? 1 : 0;
  if (total_pos == 0) throw UndefinedMetricError("AUPRC needs at least one positive label");
  double tp = 0, fp = 0, ap = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    double gp = 0;
    while (j < v.size() && v[j].score == v[i].score) {
      if (v[j].positive) gp += 1; else fp += 1;
      ++j;
    }
    tp += gp;
    if (gp > 0) ap += (gp / total_pos) * (tp / (tp + fp));
    i = j;
  }
  return ap;
}

/// 2|A∩B| / (|A| + |B|); 1 when both masks are empty.
inline double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ShapeError("dice: masks differ in size");
  double inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  return na + nb == 0 ? 1.0 : 2.0 * inter / (na + nb);
}

inline std::vector<std::uint8_t> binary_labels(const MaskVolume& m) {
  std::vector<std::uint8_t> out(m.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.data.values()[i] > 0.5f ? 1 : 0;
  return out;
}

inline double dice(const MaskVolume& pred, const MaskVolume& gt) {
  if (pred.data.dims() != gt.data.dims()) throw ShapeError("dice: mask dims differ");
  const auto a = binary_labels(pred), b = binary_labels(gt);
  return dice(a, b);
}

struct VolumeMetrics {
  double auprc = std::numeric_limits<double>::quiet_NaN();  // NaN when undefined
  double auroc = std::numeric_limits<double>::quiet_NaN();
  double dice = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
};

struct MetricsReport {
  double auprc = std::numeric_limits<double>::quiet_NaN();
  double auroc = std::numeric_limits<double>::quiet_NaN();
  double dice = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  std::vector<VolumeMetrics> per_volume;
};

namespace detail {

inline VolumeMetrics score_voxels(std::span<const double> scores, std::span<const std::uint8_t> gt,
                                  std::span<const std::uint8_t> pred) {
  VolumeMetrics m;
  for (auto g : gt) (g ? m.n_pos : m.n_neg) += 1;
  if (m.n_pos > 0) m.auprc = auprc(scores, gt);
  if (m.n_pos > 0 && m.n_neg > 0) m.auroc = auroc(scores, gt);
  m.dice = dice(pred, gt);
  return m;
}

}  // namespace detail

/// Pooled metrics over all voxels of all volumes, plus per-volume values.
inline MetricsReport evaluate(std::span<const AnomalyResult> results, std::span<const MaskVolume> gts) {
  if (results.size() != gts.size()) throw ValidationError("evaluate: result and ground-truth counts differ");
  if (results.empty()) throw ValidationError("evaluate: nothing to evaluate");
  std::vector<double> all_scores;
  std::vector<std::uint8_t> all_gt, all_pred;
  MetricsReport rep;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (r.continuous_mask.data.dims() != gts[i].data.dims() || r.binary_mask.data.dims() != gts[i].data.dims()) {
      throw ShapeError("evaluate: volume " + std::to_string(i) + " mask dims differ from ground truth");
    }
    std::vector<double> scores(r.continuous_mask.data.values().begin(), r.continuous_mask.data.values().end());
    const auto gt = binary_labels(gts[i]);
    const auto pred = binary_labels(r.binary_mask);
    rep.per_volume.push_back(detail::score_voxels(scores, gt, pred));
    all_scores.insert(all_scores.end(), scores.begin(), scores.end());
    all_gt.insert(all_gt.end(), gt.begin(), gt.end());
    all_pred.insert(all_pred.end(), pred.begin(), pred.end());
  }
  const VolumeMetrics pooled = detail::score_voxels(all_scores, all_gt, all_pred);
  rep.auprc = pooled.auprc;
  rep.auroc = pooled.auroc;
  rep.dice = pooled.dice;
  rep.n_pos = pooled.n_pos;
  rep.n_neg = pooled.n_neg;
  return rep;
}

inline nlohmann::ordered_json to_json(const VolumeMetrics& m) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  return {{"auprc", num(m.auprc)}, {"auroc", num(m.auroc)}, {"dice", m.dice}, {"n_pos", m.n_pos}, {"n_neg", m.n_neg}};
}

/// Structured-text (JSON) form of a report.
inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j = to_json(VolumeMetrics{r.auprc, r.auroc, r.dice, r.n_pos, r.n_neg});
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& v : r.per_volume) per.push_back(to_json(v));
  j["per_volume"] = per;
  return j;
}

}  // namespace volscan
