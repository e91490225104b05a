// Copyright 2026 The cbmlab Authors.
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
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "cbmlab/datagen.hpp"
#include "cbmlab/dense_array.hpp"
#include "cbmlab/models.hpp"

namespace cbmlab {

/// Mann-Whitney ROC-AUC: P(score of a random positive > score of a random
/// negative), ties counted 1/2. Empty when labels hold a single class.
inline std::optional<double> concept_roc_auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ValidationError("roc_auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average 1-based ranks over tie groups.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }
  double n_pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] != 0.0) {
      n_pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) return std::nullopt;
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Distance between the OOD and ID centroids, in units of the mean distance
/// of ID rows to their centroid.
inline double bottleneck_shift(const DenseArray& id, const DenseArray& ood) {
  if (id.cols() != ood.cols()) throw ShapeError("bottleneck_shift: width mismatch");
  if (id.rows() < 2 || ood.rows() < 2) throw ValidationError("bottleneck_shift: each set needs >= 2 rows");
  const std::size_t w = id.cols();
  auto centroid = [w](const DenseArray& a) {
    std::vector<double> mu(w, 0.0);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      for (std::size_t j = 0; j < w; ++j) mu[j] += a(r, j);
    }
    for (double& v : mu) v /= static_cast<double>(a.rows());
    return mu;
  };
  const auto mu_id = centroid(id);
  const auto mu_ood = centroid(ood);
  double spread = 0.0;
  for (std::size_t r = 0; r < id.rows(); ++r) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < w; ++j) d2 += (id(r, j) - mu_id[j]) * (id(r, j) - mu_id[j]);
    spread += std::sqrt(d2);
  }
  spread /= static_cast<double>(id.rows());
  if (!(spread > 0.0)) throw NumericError("bottleneck_shift: ID rows have zero spread");
  double gap = 0.0;
  for (std::size_t j = 0; j < w; ++j) gap += (mu_ood[j] - mu_id[j]) * (mu_ood[j] - mu_id[j]);
  return std::sqrt(gap) / spread;
}

/// Quantile by linear interpolation between order statistics at q (n - 1).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ValidationError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline constexpr std::array<double, 5> kEntropyQuantiles = {0.05, 0.25, 0.50, 0.75, 0.95};

struct EntropySummary {
  double mean = 0.0;
  std::array<double, 5> quantiles{};
};

inline EntropySummary entropy_summary(const DenseArray& p_hat) {
  std::vector<double> h(p_hat.size());
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = bernoulli_entropy(p_hat[i]);
  EntropySummary s;
  if (h.empty()) return s;
  s.mean = std::accumulate(h.begin(), h.end(), 0.0) / static_cast<double>(h.size());
  std::sort(h.begin(), h.end());
  for (std::size_t i = 0; i < kEntropyQuantiles.size(); ++i) s.quantiles[i] = quantile_sorted(h, kEntropyQuantiles[i]);
  return s;
}

inline double accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ValidationError("accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct NoiseShift {
  double level = 0.0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  double task_accuracy = 0.0;
  double mean_concept_auc = 0.0;
  std::vector<std::optional<double>> per_concept_auc;
  std::size_t excluded_concepts = 0;
  double mean_entropy = 0.0;
  std::array<double, 5> entropy_quantiles{};
  std::optional<double> bottleneck_shift;
  std::size_t sample_count = 0;
};

/// Concept AUC per column. Scores are concept logits; the ranking equals that
/// of the probabilities without saturation ties near 0 and 1.
inline void fill_concept_auc(EvalReport& rep, const DenseArray& scores, const DenseArray& labels) {
  rep.per_concept_auc.clear();
  rep.excluded_concepts = 0;
  double sum = 0.0;
  std::size_t used = 0;
  std::vector<double> s(scores.rows()), l(scores.rows());
  for (std::size_t i = 0; i < scores.cols(); ++i) {
    for (std::size_t r = 0; r < scores.rows(); ++r) {
      s[r] = scores(r, i);
      l[r] = labels(r, i);
    }
    auto auc = concept_roc_auc(s, l);
    rep.per_concept_auc.push_back(auc);
    if (auc) {
      sum += *auc;
      ++used;
    } else {
      ++rep.excluded_concepts;
    }
  }
  rep.mean_concept_auc = used ? sum / static_cast<double>(used) : 0.0;
}

/// One pass over a split. With a shift, the report describes the shifted rows
/// and bottleneck_shift compares their bottlenecks with the clean ones.
inline EvalReport evaluate(const Model& model, const SplitView& split, const FeatureStats& stats,
                           const std::optional<NoiseShift>& shift, const ForwardOptions& opts) {
  if (split.y.empty()) throw ValidationError("evaluate: empty split");
  EvalReport rep;
  rep.sample_count = split.y.size();
  const ForwardOutput clean = forward(model, split.x, opts);
  const ForwardOutput* used = &clean;
  ForwardOutput shifted;
  if (shift) {
    shifted = forward(model, inject_salt_pepper(split.x, shift->level, stats, shift->seed), opts);
    used = &shifted;
    rep.bottleneck_shift = bottleneck_shift(clean.bottleneck, shifted.bottleneck);
  }
  rep.task_accuracy = accuracy(argmax_rows(used->y_prob), split.y);
  fill_concept_auc(rep, used->logits, split.c);
  const auto es = entropy_summary(used->p_hat);
  rep.mean_entropy = es.mean;
  rep.entropy_quantiles = es.quantiles;
  return rep;
}

}  // namespace cbmlab
