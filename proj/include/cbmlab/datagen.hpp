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

// Synthetic concept tasks. A row is generated from K latent binary concepts
// c*; the input is a noisy random linear image of the +/-1 coded concepts and
// the label is (sum_i 2^i c*_i) mod L. Only the first k concepts are exposed
// as training annotations, so k < K yields a concept-incomplete task whose
// Bayes posteriors are computable by enumeration.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cbmlab/dense_array.hpp"
#include "cbmlab/rng.hpp"

namespace cbmlab {

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ValidationError("unknown split tag '" + s + "'");
}

struct SpuriousSpec {
  std::size_t n_s = 0;
  double strength = 1.0;
};

struct SplitFractions {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

struct TaskSpec {
  std::size_t K = 2;        // complete concept count
  std::size_t k = 2;        // annotated (training) concepts, a prefix of the K
  std::size_t n = 8;        // input dimension
  std::size_t L = 4;        // label count
  std::size_t N = 100;      // rows
  double sigma_x = 0.0;     // input noise std
  std::optional<SpuriousSpec> spurious;
  SplitFractions split;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kMaxEnumerationBits = 20;

inline void validate(const TaskSpec& s) {
  auto fail = [](const std::string& m) { throw ValidationError("TaskSpec: " + m); };
  if (s.K < 2 || s.K > kMaxEnumerationBits) fail("K must lie in [2, 20]");
  if (s.k < 1 || s.k > s.K) fail("k must lie in [1, K]");
  if (s.n < 1) fail("n must be positive");
  if (s.L < 2 || s.L > (std::size_t{1} << s.K)) fail("L must lie in [2, 2^K]");
  if (s.N < 1) fail("N must be positive");
  if (!(s.sigma_x >= 0.0) || !std::isfinite(s.sigma_x)) fail("sigma_x must be finite and >= 0");
  if (s.spurious) {
    if (s.spurious->n_s < 1) fail("spurious.n_s must be positive");
    if (!std::isfinite(s.spurious->strength)) fail("spurious.strength must be finite");
  }
}

struct FeatureStats {
  std::vector<double> min;
  std::vector<double> max;
};

struct ConceptDataset {
  DenseArray x;        // N x (n [+ n_s])
  DenseArray c_star;   // N x K, entries 0/1
  DenseArray c;        // N x k, first k columns of c_star
  std::vector<std::size_t> y;
  std::vector<Split> split;
  TaskSpec spec;
  FeatureStats feature_stats;

  std::size_t rows() const { return y.size(); }
  std::size_t width() const { return x.cols(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] == s) out.push_back(i);
    }
    return out;
  }
};

/// Rows of one split, materialized.
struct SplitView {
  DenseArray x;
  DenseArray c;
  std::vector<std::size_t> y;
  std::vector<std::size_t> rows;  // positions in the parent dataset
};

inline SplitView select_split(const ConceptDataset& d, Split s) {
  SplitView v;
  v.rows = d.indices(s);
  if (v.rows.empty()) throw ValidationError(std::string("split '") + split_name(s) + "' is empty");
  v.x = gather_rows(d.x, v.rows);
  v.c = gather_rows(d.c, v.rows);
  for (std::size_t r : v.rows) v.y.push_back(d.y[r]);
  return v;
}

inline std::size_t label_of(std::span<const double> c_star, std::size_t L) {
  std::uint64_t code = 0;
  for (std::size_t i = 0; i < c_star.size(); ++i) {
    if (c_star[i] != 0.0) code |= std::uint64_t{1} << i;
  }
  return static_cast<std::size_t>(code % L);
}

inline FeatureStats compute_feature_stats(const DenseArray& x, std::span<const Split> split) {
  FeatureStats st;
  st.min.assign(x.cols(), 0.0);
  st.max.assign(x.cols(), 0.0);
  bool seen = false;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (split[r] != Split::kTrain) continue;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      const double v = x(r, j);
      if (!seen || v < st.min[j]) st.min[j] = v;
      if (!seen || v > st.max[j]) st.max[j] = v;
    }
    seen = true;
  }
  if (!seen) throw ValidationError("feature stats: training split is empty");
  return st;
}

namespace detail {

inline std::array<std::size_t, 3> split_counts(std::size_t N, const SplitFractions& f) {
  for (double v : {f.train, f.val, f.test}) {
    if (!(v > 0.0)) throw ValidationError("split fractions must be positive");
  }
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ValidationError("split fractions must sum to 1");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(N)));
  const auto n_val = static_cast<std::size_t>(std::llround(f.val * static_cast<double>(N)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= N) {
    throw ValidationError("split of " + std::to_string(N) + " rows leaves an empty partition");
  }
  return {n_train, n_val, N - n_train - n_val};
}

inline std::vector<Split> assign_splits(std::size_t N, const SplitFractions& f, std::uint64_t seed) {
  const auto counts = split_counts(N, f);
  Rng rng(seed);
  const auto perm = permutation(rng, N);
  std::vector<Split> tags(N, Split::kTest);
  for (std::size_t i = 0; i < counts[0]; ++i) tags[perm[i]] = Split::kTrain;
  for (std::size_t i = counts[0]; i < counts[0] + counts[1]; ++i) tags[perm[i]] = Split::kVal;
  return tags;
}

// Uniform permutation with no fixed point.
inline std::vector<std::size_t> derangement(Rng& rng, std::size_t n) {
  for (;;) {
    auto p = permutation(rng, n);
    bool fixed = false;
    for (std::size_t i = 0; i < n; ++i) fixed = fixed || p[i] == i;
    if (!fixed) return p;
  }
}

}  // namespace detail

/// Samples a dataset from the spec. Deterministic given spec.seed.
inline ConceptDataset generate_task(const TaskSpec& spec) {
  validate(spec);
  const std::size_t N = spec.N, K = spec.K, n = spec.n;
  const std::size_t n_s = spec.spurious ? spec.spurious->n_s : 0;

  Rng mix_rng(derive_seed(spec.seed, "mixing"));
  DenseArray A = DenseArray::matrix(n, K);
  const double scale = 1.0 / std::sqrt(static_cast<double>(K));
  for (double& v : A.data()) v = standard_normal(mix_rng) * scale;

  ConceptDataset d;
  d.spec = spec;
  d.c_star = DenseArray::matrix(N, K);
  d.c = DenseArray::matrix(N, spec.k);
  d.x = DenseArray::matrix(N, n + n_s);
  d.y.resize(N);

  Rng concept_rng(derive_seed(spec.seed, "concepts"));
  Rng noise_rng(derive_seed(spec.seed, "noise"));
  for (std::size_t r = 0; r < N; ++r) {
    for (std::size_t i = 0; i < K; ++i) d.c_star(r, i) = (concept_rng() >> 63) ? 1.0 : 0.0;
    for (std::size_t i = 0; i < spec.k; ++i) d.c(r, i) = d.c_star(r, i);
    d.y[r] = label_of(d.c_star.row(r), spec.L);
    for (std::size_t j = 0; j < n; ++j) {
      double v = 0.0;
      for (std::size_t i = 0; i < K; ++i) v += A(j, i) * (2.0 * d.c_star(r, i) - 1.0);
      if (spec.sigma_x > 0.0) v += spec.sigma_x * standard_normal(noise_rng);
      d.x(r, j) = v;
    }
  }

  d.split = detail::assign_splits(N, spec.split, derive_seed(spec.seed, "split"));

  if (n_s > 0) {
    Rng sp_rng(derive_seed(spec.seed, "spurious"));
    DenseArray B = DenseArray::matrix(n_s, spec.L);
    for (double& v : B.data()) v = standard_normal(sp_rng);
    Rng perm_rng(derive_seed(spec.seed, "shift_perm"));
    const auto pi = detail::derangement(perm_rng, spec.L);
    Rng sp_noise(derive_seed(spec.seed, "spurious_noise"));
    for (std::size_t r = 0; r < N; ++r) {
      const std::size_t label = d.split[r] == Split::kTest ? pi[d.y[r]] : d.y[r];
      for (std::size_t j = 0; j < n_s; ++j) {
        double v = spec.spurious->strength * B(j, label);
        if (spec.sigma_x > 0.0) v += spec.sigma_x * standard_normal(sp_noise);
        d.x(r, n + j) = v;
      }
    }
  }

  d.feature_stats = compute_feature_stats(d.x, d.split);
  return d;
}

/// Reassigns split tags by a seeded shuffle and recomputes feature stats.
inline ConceptDataset split_dataset(const ConceptDataset& dataset, const SplitFractions& fractions,
                                    std::uint64_t seed) {
  ConceptDataset out = dataset;
  out.split = detail::assign_splits(dataset.rows(), fractions, seed);
  out.spec.split = fractions;
  out.feature_stats = compute_feature_stats(out.x, out.split);
  return out;
}

/// P(y | c_S) under the uniform prior over complete concepts: enumerates every
/// completion of the unobserved bits. `observed` holds indices into the k
/// training concepts; `values` their 0/1 settings.
inline std::vector<double> exact_posterior(const TaskSpec& spec, std::span<const std::size_t> observed,
                                           std::span<const double> values) {
  if (observed.size() != values.size()) throw ValidationError("exact_posterior: size mismatch");
  std::uint64_t fixed_bits = 0;
  std::uint64_t fixed_mask = 0;
  for (std::size_t t = 0; t < observed.size(); ++t) {
    const std::size_t i = observed[t];
    if (i >= spec.k) throw ValidationError("exact_posterior: concept index out of range");
    if (values[t] != 0.0 && values[t] != 1.0) throw ValidationError("exact_posterior: non-binary value");
    if (fixed_mask & (std::uint64_t{1} << i)) throw ValidationError("exact_posterior: duplicate index");
    fixed_mask |= std::uint64_t{1} << i;
    if (values[t] == 1.0) fixed_bits |= std::uint64_t{1} << i;
  }
  std::vector<std::size_t> free_bits;
  for (std::size_t i = 0; i < spec.K; ++i) {
    if (!(fixed_mask & (std::uint64_t{1} << i))) free_bits.push_back(i);
  }
  if (free_bits.size() > kMaxEnumerationBits) {
    throw ValidationError("exact_posterior: more than 20 unobserved bits to enumerate");
  }
  std::vector<double> hist(spec.L, 0.0);
  const std::uint64_t total = std::uint64_t{1} << free_bits.size();
  for (std::uint64_t a = 0; a < total; ++a) {
    std::uint64_t code = fixed_bits;
    for (std::size_t b = 0; b < free_bits.size(); ++b) {
      if (a & (std::uint64_t{1} << b)) code |= std::uint64_t{1} << free_bits[b];
    }
    hist[code % spec.L] += 1.0;
  }
  for (double& h : hist) h /= static_cast<double>(total);
  return hist;
}

/// Number of entries per row pinned to each extreme at a given level.
inline std::size_t salt_pepper_count(double level, std::size_t width) {
  // The small slack keeps e.g. 0.2 * 10 / 2 from flooring to 0 through rounding.
  return static_cast<std::size_t>(std::floor(level * static_cast<double>(width) / 2.0 + 1e-9));
}

/// Salt-and-pepper corruption: per row, floor(level/2 * width) feature indices
/// (with replacement) are set to the training max, then as many to the
/// training min.
inline DenseArray inject_salt_pepper(const DenseArray& x, double level, const FeatureStats& stats,
                                     std::uint64_t seed) {
  if (!(level >= 0.0 && level <= 1.0)) throw ValidationError("noise level must lie in [0, 1]");
  if (stats.min.size() != x.cols() || stats.max.size() != x.cols()) {
    throw ValidationError("feature stats width does not match input width");
  }
  DenseArray out = x;
  const std::size_t count = salt_pepper_count(level, x.cols());
  if (count == 0) return out;
  Rng rng(seed);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t t = 0; t < count; ++t) {
      const std::size_t j = uniform_index(rng, x.cols());
      out(r, j) = stats.max[j];
    }
    for (std::size_t t = 0; t < count; ++t) {
      const std::size_t j = uniform_index(rng, x.cols());
      out(r, j) = stats.min[j];
    }
  }
  return out;
}

}  // namespace cbmlab
