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

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include <gtest/gtest.h>

#include "cbmlab/datagen.hpp"

namespace cbmlab {
namespace {

TaskSpec small_spec(std::size_t K, std::size_t k, std::size_t L, std::size_t N, std::uint64_t seed = 1) {
  TaskSpec s;
  s.K = K;
  s.k = k;
  s.n = 8;
  s.L = L;
  s.N = N;
  s.sigma_x = 0.1;
  s.seed = seed;
  return s;
}

TEST(DatagenTest, LabelRuleForTwoConcepts) {
  auto d = generate_task(small_spec(2, 2, 4, 200));
  for (std::size_t r = 0; r < d.rows(); ++r) {
    EXPECT_EQ(d.y[r], static_cast<std::size_t>(d.c_star(r, 0) + 2 * d.c_star(r, 1)));
  }
}

TEST(DatagenTest, LabelRuleHoldsWithModulo) {
  auto d = generate_task(small_spec(5, 3, 6, 500));
  for (std::size_t r = 0; r < d.rows(); ++r) {
    std::size_t code = 0;
    for (std::size_t i = 0; i < 5; ++i) code += static_cast<std::size_t>(d.c_star(r, i)) << i;
    EXPECT_EQ(d.y[r], code % 6);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(d.c(r, i), d.c_star(r, i));
  }
}

TEST(DatagenTest, NoiselessInputsAreLinearInSignedConcepts) {
  TaskSpec s = small_spec(3, 3, 8, 50);
  s.sigma_x = 0.0;
  auto d = generate_task(s);
  // Rows with identical concepts must have identical inputs, and x is odd in
  // the signed code: x(c) + x(~c) = 0.
  std::map<std::vector<double>, std::vector<double>> by_code;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    std::vector<double> code(d.c_star.row(r).begin(), d.c_star.row(r).end());
    std::vector<double> x(d.x.row(r).begin(), d.x.row(r).end());
    auto [it, fresh] = by_code.emplace(code, x);
    if (!fresh) {
      EXPECT_EQ(it->second, x);
    }
  }
  for (const auto& [code, x] : by_code) {
    std::vector<double> flip = code;
    for (double& v : flip) v = 1.0 - v;
    auto it = by_code.find(flip);
    if (it == by_code.end()) continue;
    for (std::size_t j = 0; j < x.size(); ++j) EXPECT_NEAR(x[j] + it->second[j], 0.0, 1e-12);
  }
}

TEST(DatagenTest, LabelFrequenciesAreNearUniform) {
  auto d = generate_task(small_spec(4, 2, 8, 2000));
  std::vector<double> freq(8, 0.0);
  for (std::size_t y : d.y) freq[y] += 1.0 / 2000.0;
  for (double f : freq) EXPECT_NEAR(f, 1.0 / 8.0, 0.05);
}

TEST(DatagenTest, DeterministicGivenSeed) {
  auto a = generate_task(small_spec(4, 2, 8, 100, 9));
  auto b = generate_task(small_spec(4, 2, 8, 100, 9));
  auto c = generate_task(small_spec(4, 2, 8, 100, 10));
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.split, b.split);
  EXPECT_NE(a.x, c.x);
}

TEST(DatagenTest, InfeasibleSpecsAreRejected) {
  EXPECT_THROW(generate_task(small_spec(21, 2, 4, 10)), ValidationError);
  EXPECT_THROW(generate_task(small_spec(4, 5, 4, 10)), ValidationError);
  EXPECT_THROW(generate_task(small_spec(2, 2, 5, 10)), ValidationError);
  EXPECT_THROW(generate_task(small_spec(3, 0, 4, 10)), ValidationError);
}

TEST(DatagenTest, SplitCountsFollowFractions) {
  auto d = generate_task(small_spec(3, 3, 8, 10));
  EXPECT_EQ(d.indices(Split::kTrain).size(), 6u);
  EXPECT_EQ(d.indices(Split::kVal).size(), 2u);
  EXPECT_EQ(d.indices(Split::kTest).size(), 2u);
}

TEST(DatagenTest, FeatureStatsUseTrainingRowsOnly) {
  auto d = generate_task(small_spec(3, 3, 8, 300));
  for (std::size_t j = 0; j < d.width(); ++j) {
    double lo = 1e300, hi = -1e300;
    for (std::size_t r : d.indices(Split::kTrain)) {
      lo = std::min(lo, d.x(r, j));
      hi = std::max(hi, d.x(r, j));
    }
    EXPECT_EQ(d.feature_stats.min[j], lo);
    EXPECT_EQ(d.feature_stats.max[j], hi);
  }
}

TEST(DatagenTest, SplitDatasetRejectsEmptyPartitions) {
  auto d = generate_task(small_spec(3, 3, 8, 10));
  EXPECT_THROW(split_dataset(d, {1.0, 0.0, 0.0}, 1), ValidationError);
  EXPECT_THROW(split_dataset(d, {0.5, 0.3, 0.3}, 1), ValidationError);
}

TEST(DatagenTest, SplitDatasetIsDeterministic) {
  auto d = generate_task(small_spec(3, 3, 8, 10));
  auto a = split_dataset(d, {0.6, 0.2, 0.2}, 77);
  auto b = split_dataset(d, {0.6, 0.2, 0.2}, 77);
  EXPECT_EQ(a.split, b.split);
  EXPECT_EQ(a.indices(Split::kTrain).size(), 6u);
  EXPECT_EQ(a.indices(Split::kVal).size(), 2u);
}

TEST(DatagenTest, SpuriousFeaturesSwapLabelsOnTestRows) {
  TaskSpec s = small_spec(3, 3, 8, 600);
  s.sigma_x = 0.0;
  s.spurious = SpuriousSpec{4, 2.0};
  auto d = generate_task(s);
  ASSERT_EQ(d.width(), 12u);
  // Spurious block is a function of the label on train/val; on test rows the
  // same label maps to a different block.
  std::map<std::size_t, std::vector<double>> train_block, test_block;
  for (std::size_t r = 0; r < d.rows(); ++r) {
    std::vector<double> block(d.x.row(r).begin() + 8, d.x.row(r).end());
    auto& m = d.split[r] == Split::kTest ? test_block : train_block;
    auto [it, fresh] = m.emplace(d.y[r], block);
    if (!fresh) {
      EXPECT_EQ(it->second, block);
    }
  }
  for (const auto& [y, block] : test_block) {
    if (train_block.count(y)) {
      EXPECT_NE(train_block[y], block);
    }
  }
}

TEST(ExactPosteriorTest, SingleObservedConcept) {
  TaskSpec s = small_spec(2, 2, 4, 10);
  const std::vector<std::size_t> S = {0};
  const std::vector<double> v = {1.0};
  EXPECT_EQ(exact_posterior(s, S, v), (std::vector<double>{0.0, 0.5, 0.0, 0.5}));
}

TEST(ExactPosteriorTest, FullObservationIsOneHot) {
  TaskSpec s = small_spec(3, 3, 8, 10);
  const std::vector<std::size_t> S = {0, 1, 2};
  const std::vector<double> v = {1.0, 0.0, 1.0};
  auto p = exact_posterior(s, S, v);
  for (std::size_t y = 0; y < 8; ++y) EXPECT_EQ(p[y], y == 5 ? 1.0 : 0.0);
}

TEST(ExactPosteriorTest, EmptyObservationIsUniformWhenLabelsCoverCodes) {
  TaskSpec s = small_spec(3, 3, 8, 10);
  auto p = exact_posterior(s, {}, {});
  for (double v : p) EXPECT_DOUBLE_EQ(v, 1.0 / 8.0);
}

TEST(ExactPosteriorTest, EmptyObservationIsAverageOfOneHots) {
  // Law of total probability against brute force over all 2^K codes.
  for (std::size_t K = 2; K <= 10; ++K) {
    TaskSpec s = small_spec(K, 1, std::min<std::size_t>(6, std::size_t{1} << K), 10);
    std::vector<double> brute(s.L, 0.0);
    for (std::uint64_t code = 0; code < (std::uint64_t{1} << K); ++code) {
      brute[code % s.L] += 1.0 / static_cast<double>(std::uint64_t{1} << K);
    }
    auto p = exact_posterior(s, {}, {});
    for (std::size_t y = 0; y < s.L; ++y) EXPECT_NEAR(p[y], brute[y], 1e-15) << "K=" << K;
  }
}

TEST(ExactPosteriorTest, SumsToOne) {
  TaskSpec s = small_spec(6, 3, 16, 10);
  const std::vector<std::size_t> S = {2, 0};
  const std::vector<double> v = {1.0, 0.0};
  auto p = exact_posterior(s, S, v);
  double total = 0.0;
  for (double x : p) total += x;
  EXPECT_NEAR(total, 1.0, 1e-15);
}

TEST(ExactPosteriorTest, RejectsBadObservations) {
  TaskSpec s = small_spec(3, 2, 8, 10);
  const std::vector<std::size_t> out_of_range = {2};
  const std::vector<double> one = {1.0};
  EXPECT_THROW(exact_posterior(s, out_of_range, one), ValidationError);
  const std::vector<std::size_t> first = {0};
  const std::vector<double> half = {0.5};
  EXPECT_THROW(exact_posterior(s, first, half), ValidationError);
}

TEST(SaltPepperTest, LevelZeroIsIdentity) {
  auto d = generate_task(small_spec(3, 3, 8, 50));
  EXPECT_EQ(inject_salt_pepper(d.x, 0.0, d.feature_stats, 3), d.x);
}

TEST(SaltPepperTest, WidthTenLevelPointTwoDrawsOneEach) {
  EXPECT_EQ(salt_pepper_count(0.2, 10), 1u);
  EXPECT_EQ(salt_pepper_count(0.1, 32), 1u);
  EXPECT_EQ(salt_pepper_count(0.05, 32), 0u);
  DenseArray x = DenseArray::matrix(200, 10, 0.5);
  FeatureStats st{std::vector<double>(10, -1.0), std::vector<double>(10, 2.0)};
  auto out = inject_salt_pepper(x, 0.2, st, 9);
  std::size_t both = 0;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    std::size_t hi = 0, lo = 0;
    for (double v : out.row(r)) {
      hi += v == 2.0;
      lo += v == -1.0;
    }
    EXPECT_LE(hi, 1u);
    EXPECT_EQ(lo, 1u);  // min is written last, so it always survives
    both += hi;
  }
  EXPECT_GT(both, 150u);  // the max survives unless the min lands on it (p = 0.1)
}

TEST(SaltPepperTest, FullLevelOnlyProducesExtremesOrOriginals) {
  auto d = generate_task(small_spec(3, 3, 8, 100));
  auto out = inject_salt_pepper(d.x, 1.0, d.feature_stats, 4);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t j = 0; j < out.cols(); ++j) {
      const double v = out(r, j);
      EXPECT_TRUE(v == d.feature_stats.min[j] || v == d.feature_stats.max[j] || v == d.x(r, j));
    }
  }
}

TEST(SaltPepperTest, NeverAltersMoreThanLevelTimesWidth) {
  auto d = generate_task(small_spec(3, 3, 8, 200));
  for (double level : {0.1, 0.25, 0.5, 0.75}) {
    auto out = inject_salt_pepper(d.x, level, d.feature_stats, 5);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      std::size_t changed = 0;
      for (std::size_t j = 0; j < out.cols(); ++j) changed += out(r, j) != d.x(r, j);
      EXPECT_LE(static_cast<double>(changed), level * static_cast<double>(out.cols()));
    }
  }
}

TEST(SaltPepperTest, DeterministicGivenSeed) {
  auto d = generate_task(small_spec(3, 3, 8, 100));
  EXPECT_EQ(inject_salt_pepper(d.x, 0.5, d.feature_stats, 8), inject_salt_pepper(d.x, 0.5, d.feature_stats, 8));
  EXPECT_NE(inject_salt_pepper(d.x, 0.5, d.feature_stats, 8), inject_salt_pepper(d.x, 0.5, d.feature_stats, 9));
}

}  // namespace
}  // namespace cbmlab
