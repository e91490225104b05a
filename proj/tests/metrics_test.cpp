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

#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "cbmlab/metrics.hpp"

namespace cbmlab {
namespace {

// O(n^2) pair count.
double brute_auc(const std::vector<double>& s, const std::vector<double>& l) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (l[i] == 1.0 && l[j] == 0.0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
  }
  return wins / pairs;
}

TEST(MetricsTest, AucHandExamples) {
  const std::vector<double> s = {0.1, 0.4, 0.35, 0.8};
  const std::vector<double> l = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(*concept_roc_auc(s, l), 0.75);
  EXPECT_DOUBLE_EQ(*concept_roc_auc(std::vector<double>{0.5, 0.5}, std::vector<double>{0, 1}), 0.5);
  EXPECT_DOUBLE_EQ(*concept_roc_auc(std::vector<double>{0.9, 0.1}, std::vector<double>{0, 1}), 0.0);
  EXPECT_FALSE(concept_roc_auc(std::vector<double>{0.2, 0.3}, std::vector<double>{1, 1}).has_value());
  EXPECT_THROW(concept_roc_auc(s, std::vector<double>{1}), ValidationError);
}

TEST(MetricsTest, AucMatchesPairCountWithTies) {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> s(60), l(60);
    for (std::size_t i = 0; i < 60; ++i) {
      s[i] = static_cast<double>(uniform_index(rng, 8));  // many ties
      l[i] = uniform_index(rng, 2) ? 1.0 : 0.0;
    }
    l[0] = 1.0;
    l[1] = 0.0;
    EXPECT_NEAR(*concept_roc_auc(s, l), brute_auc(s, l), 1e-12);
  }
}

TEST(MetricsTest, AucInvariantUnderMonotoneMaps) {
  Rng rng(4);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> s(100), l(100), t(100);
    for (std::size_t i = 0; i < 100; ++i) {
      s[i] = standard_normal(rng);
      l[i] = uniform01(rng) < 0.4 ? 1.0 : 0.0;
      t[i] = 1.0 / (1.0 + std::exp(-3.0 * s[i] + 1.0));
    }
    l[0] = 1.0;
    l[1] = 0.0;
    EXPECT_DOUBLE_EQ(*concept_roc_auc(s, l), *concept_roc_auc(t, l));
  }
}

TEST(MetricsTest, BottleneckShiftHandExample) {
  DenseArray id = DenseArray::from_rows({{0, 0}, {2, 0}, {0, 2}, {2, 2}});
  DenseArray ood = DenseArray::from_rows({{3, 4}, {5, 4}, {3, 6}, {5, 6}});
  EXPECT_NEAR(bottleneck_shift(id, ood), 5.0 / std::numbers::sqrt2, 1e-12);
  EXPECT_EQ(bottleneck_shift(id, id), 0.0);
}

TEST(MetricsTest, BottleneckShiftIsRotationInvariant) {
  Rng rng(5);
  DenseArray id = DenseArray::matrix(30, 2), ood = DenseArray::matrix(25, 2);
  for (double& v : id.data()) v = standard_normal(rng);
  for (double& v : ood.data()) v = standard_normal(rng) + 0.7;
  const double th = 0.83;
  auto rotate = [th](const DenseArray& a) {
    DenseArray out = a;
    for (std::size_t r = 0; r < a.rows(); ++r) {
      out(r, 0) = std::cos(th) * a(r, 0) - std::sin(th) * a(r, 1);
      out(r, 1) = std::sin(th) * a(r, 0) + std::cos(th) * a(r, 1);
    }
    return out;
  };
  EXPECT_NEAR(bottleneck_shift(id, ood), bottleneck_shift(rotate(id), rotate(ood)), 1e-12);
}

TEST(MetricsTest, BottleneckShiftErrors) {
  DenseArray flat = DenseArray::from_rows({{1, 1}, {1, 1}});
  EXPECT_THROW(bottleneck_shift(flat, DenseArray::from_rows({{0, 0}, {1, 1}})), NumericError);
  EXPECT_THROW(bottleneck_shift(flat, DenseArray::from_rows({{0, 0, 1}, {1, 1, 1}})), ShapeError);
  EXPECT_THROW(bottleneck_shift(flat, DenseArray::from_rows({{0, 0}})), ValidationError);
}

TEST(MetricsTest, QuantilesInterpolate) {
  const std::vector<double> v = {1, 2, 3, 4, 5};
  EXPECT_EQ(quantile_sorted(v, 0.25), 2.0);
  EXPECT_EQ(quantile_sorted(v, 0.1), 1.4);
  EXPECT_EQ(quantile_sorted(v, 1.0), 5.0);
  EXPECT_THROW(quantile_sorted(std::vector<double>{}, 0.5), ValidationError);
}

TEST(MetricsTest, EntropySummaryExamples) {
  auto half = entropy_summary(DenseArray::matrix(3, 2, 0.5));
  EXPECT_EQ(half.mean, 1.0);
  for (double q : half.quantiles) EXPECT_EQ(q, 1.0);
  auto mixed = entropy_summary(DenseArray::from_rows({{0, 0.5}, {1, 0.5}}));
  EXPECT_EQ(mixed.mean, 0.5);
  EXPECT_EQ(mixed.quantiles[0], 0.0);
  EXPECT_EQ(mixed.quantiles[2], 0.5);
  EXPECT_EQ(mixed.quantiles[4], 1.0);
}

TEST(MetricsTest, Accuracy) {
  const std::vector<std::size_t> p = {1, 2, 3, 0}, t = {1, 2, 0, 0};
  EXPECT_EQ(accuracy(p, t), 0.75);
  EXPECT_THROW(accuracy(p, std::vector<std::size_t>{1}), ValidationError);
}

class EvaluateTest : public ::testing::Test {
 protected:
  void SetUp() override {
    TaskSpec s;
    s.K = 4;
    s.k = 3;
    s.n = 10;
    s.L = 8;
    s.N = 300;
    s.sigma_x = 0.2;
    s.seed = 2;
    data = generate_task(s);
    ModelConfig c;
    c.kind = ModelKind::kCem;
    c.input_width = 10;
    c.k = 3;
    c.m = 3;
    c.L = 8;
    c.backbone_widths = {8};
    model = init_model(c);
    test = select_split(data, Split::kTest);
  }
  ConceptDataset data;
  Model model;
  SplitView test;
};

TEST_F(EvaluateTest, CleanReportMatchesForward) {
  auto rep = evaluate(model, test, data.feature_stats, std::nullopt, {});
  auto out = forward(model, test.x);
  EXPECT_EQ(rep.task_accuracy, accuracy(argmax_rows(out.y_prob), test.y));
  EXPECT_EQ(rep.sample_count, test.y.size());
  EXPECT_FALSE(rep.bottleneck_shift.has_value());
  EXPECT_EQ(rep.per_concept_auc.size(), 3u);
  EXPECT_EQ(rep.mean_entropy, entropy_summary(out.p_hat).mean);
}

TEST_F(EvaluateTest, ShiftedReportDescribesCorruptedRows) {
  NoiseShift shift{0.5, 9};
  auto rep = evaluate(model, test, data.feature_stats, shift, {});
  auto out = forward(model, inject_salt_pepper(test.x, 0.5, data.feature_stats, 9));
  EXPECT_EQ(rep.task_accuracy, accuracy(argmax_rows(out.y_prob), test.y));
  ASSERT_TRUE(rep.bottleneck_shift.has_value());
  EXPECT_GT(*rep.bottleneck_shift, 0.0);
}

TEST_F(EvaluateTest, ConstantConceptIsExcluded) {
  for (std::size_t r = 0; r < test.c.rows(); ++r) test.c(r, 1) = 1.0;
  auto rep = evaluate(model, test, data.feature_stats, std::nullopt, {});
  EXPECT_EQ(rep.excluded_concepts, 1u);
  EXPECT_FALSE(rep.per_concept_auc[1].has_value());
  EXPECT_NEAR(rep.mean_concept_auc, (*rep.per_concept_auc[0] + *rep.per_concept_auc[2]) / 2.0, 1e-15);
}

}  // namespace
}  // namespace cbmlab
