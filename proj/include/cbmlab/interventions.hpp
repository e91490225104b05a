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

// Random-subset intervention curves and the two Bayes-classifier references:
// an exact one computed by enumerating unobserved complete concepts, and a
// masked MLP trained on ground-truth concepts with inputs randomly replaced by
// 0.5.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <thread>
#include <vector>

#include "cbmlab/datagen.hpp"
#include "cbmlab/dense_array.hpp"
#include "cbmlab/graph.hpp"
#include "cbmlab/metrics.hpp"
#include "cbmlab/models.hpp"
#include "cbmlab/rng.hpp"
#include "cbmlab/training.hpp"

namespace cbmlab {

struct InterventionCurve {
  std::vector<double> fractions;
  DenseArray accuracies;  // trials x |fractions|
  std::vector<double> mean;
  std::vector<double> std;
  double auc = 0.0;
};

inline void validate_fractions(std::span<const double> f) {
  if (f.size() < 2) throw ValidationError("fraction grid needs at least two points");
  if (f.front() != 0.0 || f.back() != 1.0) throw ValidationError("fraction grid must start at 0 and end at 1");
  for (std::size_t i = 1; i < f.size(); ++i) {
    if (!(f[i] > f[i - 1])) throw ValidationError("fraction grid must be strictly ascending");
  }
}

/// Trapezoidal area under a sampled curve.
inline double curve_auc(std::span<const double> fractions, std::span<const double> values) {
  if (fractions.size() < 2 || fractions.size() != values.size()) {
    throw ValidationError("curve_auc: need >= 2 points and equal lengths");
  }
  double area = 0.0;
  for (std::size_t i = 1; i < fractions.size(); ++i) {
    area += 0.5 * (fractions[i] - fractions[i - 1]) * (values[i] + values[i - 1]);
  }
  return area;
}

/// Number of concepts intervened at a fraction: ceil(f k).
inline std::size_t intervened_count(double fraction, std::size_t k) {
  const double v = fraction * static_cast<double>(k);
  return std::min(k, static_cast<std::size_t>(std::ceil(v - 1e-9)));
}

/// Intervention order of one trial: a uniform permutation of the k concepts.
inline std::vector<std::size_t> trial_order(std::uint64_t seed, std::size_t trial, std::size_t k) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(trial)));
  return permutation(rng, k);
}

inline std::size_t worker_threads() {
  if (const char* env = std::getenv("CBMLAB_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

inline void finish_curve(InterventionCurve& c) {
  const std::size_t T = c.accuracies.rows(), F = c.accuracies.cols();
  c.mean.assign(F, 0.0);
  c.std.assign(F, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    for (std::size_t t = 0; t < T; ++t) c.mean[f] += c.accuracies(t, f);
    c.mean[f] /= static_cast<double>(T);
    for (std::size_t t = 0; t < T; ++t) c.std[f] += (c.accuracies(t, f) - c.mean[f]) * (c.accuracies(t, f) - c.mean[f]);
    c.std[f] = std::sqrt(c.std[f] / static_cast<double>(T));
  }
  c.auc = curve_auc(c.fractions, c.mean);
}

// Runs `trial_fn(t)` for each trial, at most worker_threads() at a time,
// storing row t of the accuracy matrix. Results do not depend on scheduling.
inline void run_trials(std::size_t trials, const std::function<std::vector<double>(std::size_t)>& trial_fn,
                       DenseArray& acc) {
  const std::size_t workers = std::min(trials, worker_threads());
  std::vector<std::vector<double>> rows(trials);
  if (workers <= 1) {
    for (std::size_t t = 0; t < trials; ++t) rows[t] = trial_fn(t);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t t = w; t < trials; t += workers) rows[t] = trial_fn(t);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (std::size_t t = 0; t < trials; ++t) {
    for (std::size_t f = 0; f < rows[t].size(); ++f) acc(t, f) = rows[t][f];
  }
}

// Per trial, evaluates `accuracy_for(order prefix)` once per distinct
// intervened-concept count along the fraction grid.
inline InterventionCurve sweep(std::span<const double> fractions, std::size_t trials, std::size_t k,
                               std::uint64_t seed,
                               const std::function<double(std::span<const std::size_t>)>& accuracy_for) {
  validate_fractions(fractions);
  if (trials < 1) throw ValidationError("trials must be >= 1");
  InterventionCurve curve;
  curve.fractions.assign(fractions.begin(), fractions.end());
  curve.accuracies = DenseArray::matrix(trials, fractions.size());
  run_trials(
      trials,
      [&](std::size_t t) {
        const auto order = trial_order(seed, t, k);
        std::map<std::size_t, double> cache;
        std::vector<double> row;
        for (double f : fractions) {
          const std::size_t n = intervened_count(f, k);
          auto it = cache.find(n);
          if (it == cache.end()) {
            it = cache.emplace(n, accuracy_for(std::span<const std::size_t>(order.data(), n))).first;
          }
          row.push_back(it->second);
        }
        return row;
      },
      curve.accuracies);
  finish_curve(curve);
  return curve;
}

inline InterventionMask mask_from_concepts(std::span<const std::size_t> concepts, const DenseArray& c) {
  InterventionMask mask;
  mask.concepts.assign(concepts.begin(), concepts.end());
  if (concepts.empty()) return mask;
  mask.values = DenseArray::matrix(c.rows(), concepts.size());
  for (std::size_t r = 0; r < c.rows(); ++r) {
    for (std::size_t t = 0; t < concepts.size(); ++t) mask.values(r, t) = c(r, concepts[t]);
  }
  return mask;
}

}  // namespace detail

/// Task accuracy of a model as increasingly many randomly ordered concepts are
/// set to their ground truth. With a shift, inputs are corrupted first while
/// intervention values still come from the clean annotations.
inline InterventionCurve intervention_curve(const Model& model, const SplitView& eval, const FeatureStats& stats,
                                            std::span<const double> fractions, std::size_t trials,
                                            const std::optional<NoiseShift>& shift, std::uint64_t seed,
                                            const ForwardOptions& base) {
  const DenseArray x = shift ? inject_salt_pepper(eval.x, shift->level, stats, shift->seed) : eval.x;
  return detail::sweep(fractions, trials, model.config.k, seed, [&](std::span<const std::size_t> s) {
    ForwardOptions opts = base;
    opts.intervention.reset();
    if (!s.empty()) opts.intervention = detail::mask_from_concepts(s, eval.c);
    return accuracy(argmax_rows(forward(model, x, opts).y_prob), eval.y);
  });
}

/// Bayes-optimal accuracy given only the intervened concepts, by enumeration.
/// Ties between labels resolve to the lowest index.
inline InterventionCurve exact_bayes_curve(const TaskSpec& spec, const SplitView& eval,
                                           std::span<const double> fractions, std::size_t trials,
                                           std::uint64_t seed) {
  return detail::sweep(fractions, trials, spec.k, seed, [&](std::span<const std::size_t> s) {
    std::map<std::uint64_t, std::size_t> cache;
    std::vector<double> values(s.size());
    std::size_t hit = 0;
    for (std::size_t r = 0; r < eval.y.size(); ++r) {
      std::uint64_t key = 0;
      for (std::size_t t = 0; t < s.size(); ++t) {
        values[t] = eval.c(r, s[t]);
        if (values[t] != 0.0) key |= std::uint64_t{1} << t;
      }
      auto it = cache.find(key);
      if (it == cache.end()) {
        const auto post = exact_posterior(spec, s, values);
        it = cache.emplace(key, static_cast<std::size_t>(std::max_element(post.begin(), post.end()) - post.begin()))
                 .first;
      }
      hit += it->second == eval.y[r] ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(eval.y.size());
  });
}

// ---------------------------------------------------------------------------
// Masked-MLP approximation of the Bayes classifier.

struct BayesApproxConfig {
  std::vector<std::size_t> hidden_widths = {28, 64, 32};
  double mask_prob = 0.25;
  double mask_value = 0.5;
  std::size_t epochs = 75;
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

inline void validate(const BayesApproxConfig& c) {
  if (!(c.mask_prob >= 0.0 && c.mask_prob <= 1.0)) throw ValidationError("BayesApproxConfig: mask_prob outside [0, 1]");
  for (std::size_t w : c.hidden_widths) {
    if (w < 1) throw ValidationError("BayesApproxConfig: hidden widths must be positive");
  }
  if (c.batch_size < 1) throw ValidationError("BayesApproxConfig: batch_size must be positive");
}

struct MaskedBayesModel {
  BayesApproxConfig config;
  std::size_t k = 0;
  std::size_t L = 0;
  ParameterSet params;
};

namespace detail {

inline NodeId masked_mlp(ValueGraph& g, const MaskedBayesModel& m, NodeId input, bool trainable) {
  NodeId h = input;
  const std::size_t layers = m.config.hidden_widths.size() + 1;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = "mlp." + std::to_string(l);
    h = g.add(g.matmul(h, g.parameter(p + ".weight", m.params.at(p + ".weight"), trainable)),
              g.parameter(p + ".bias", m.params.at(p + ".bias"), trainable));
    if (l + 1 < layers) h = g.leaky_relu(h, kLeakySlope);
  }
  return h;
}

}  // namespace detail

/// Label distributions for rows of (partially masked) concept vectors.
inline DenseArray predict_masked_bayes(const MaskedBayesModel& m, const DenseArray& c_prime) {
  if (c_prime.cols() != m.k) throw ShapeError("masked bayes: input width != k");
  DenseArray out;
  for (std::size_t begin = 0; begin < c_prime.rows(); begin += 1024) {
    const std::size_t end = std::min(c_prime.rows(), begin + 1024);
    ValueGraph g;
    NodeId probs = g.softmax(detail::masked_mlp(g, m, g.input("c"), false));
    g.run({{"c", take_rows(c_prime, begin, end)}});
    detail::append_rows(out, g.value(probs));
  }
  return out;
}

/// Trains the masked MLP on the training split's ground-truth concepts.
inline MaskedBayesModel train_masked_bayes(const ConceptDataset& data, const BayesApproxConfig& cfg) {
  validate(cfg);
  const SplitView tr = select_split(data, Split::kTrain);
  MaskedBayesModel m;
  m.config = cfg;
  m.k = data.spec.k;
  m.L = data.spec.L;
  Rng init(derive_seed(cfg.seed, "init"));
  std::size_t width = m.k;
  std::vector<std::size_t> widths = cfg.hidden_widths;
  widths.push_back(m.L);
  for (std::size_t l = 0; l < widths.size(); ++l) {
    DenseArray w = DenseArray::matrix(width, widths[l]);
    const double sd = 1.0 / std::sqrt(static_cast<double>(width));
    for (double& v : w.data()) v = standard_normal(init) * sd;
    m.params.emplace("mlp." + std::to_string(l) + ".weight", std::move(w));
    m.params.emplace("mlp." + std::to_string(l) + ".bias", DenseArray::matrix(1, widths[l]));
    width = widths[l];
  }

  SgdMomentum opt(cfg.momentum, 0.0);
  const std::size_t n = tr.y.size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng(derive_seed(derive_seed(cfg.seed, "epoch"), epoch));
    const auto perm = permutation(rng, n);
    for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      DenseArray c = DenseArray::matrix(end - begin, m.k);
      std::vector<std::size_t> y;
      for (std::size_t r = begin; r < end; ++r) {
        for (std::size_t i = 0; i < m.k; ++i) {
          c(r - begin, i) = uniform01(rng) < cfg.mask_prob ? cfg.mask_value : tr.c(perm[r], i);
        }
        y.push_back(tr.y[perm[r]]);
      }
      ValueGraph g;
      NodeId logits = detail::masked_mlp(g, m, g.input("c"), true);
      NodeId loss = detail::cross_entropy(g, logits, g.constant(detail::one_hot(y, m.L)));
      g.run({{"c", c}});
      opt.step(m.params, g.gradients(loss), cfg.lr);
    }
  }
  return m;
}

/// Inputs with the intervened concepts at their values and the rest at mask_value.
inline DenseArray masked_inputs(const MaskedBayesModel& m, std::span<const std::size_t> observed, const DenseArray& c) {
  DenseArray out(Shape{c.rows(), m.k}, m.config.mask_value);
  for (std::size_t r = 0; r < c.rows(); ++r) {
    for (std::size_t i : observed) out(r, i) = c(r, i);
  }
  return out;
}

inline InterventionCurve masked_bayes_curve(const MaskedBayesModel& m, const SplitView& eval,
                                            std::span<const double> fractions, std::size_t trials,
                                            std::uint64_t seed) {
  return detail::sweep(fractions, trials, m.k, seed, [&](std::span<const std::size_t> s) {
    return accuracy(argmax_rows(predict_masked_bayes(m, masked_inputs(m, s, eval.c))), eval.y);
  });
}

}  // namespace cbmlab
