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
#include <vector>

#include <gtest/gtest.h>

#include "cbmlab/calibration.hpp"
#include "cbmlab/metrics.hpp"

namespace cbmlab {
namespace {

TEST(CalibrationTest, EceHandComputed) {
  // Bin [0.1, 0.2): conf 0.15, acc 0. Bin [0.9, 1.0]: conf 0.95, acc 0.5.
  const std::vector<double> p = {0.15, 0.15, 0.95, 0.95};
  const std::vector<double> y = {0, 0, 1, 0};
  EXPECT_NEAR(expected_calibration_error(p, y), 0.5 * 0.15 + 0.5 * 0.45, 1e-15);
}

TEST(CalibrationTest, EceSingleBinExamples) {
  const std::vector<double> half = {1, 0, 1, 0};
  EXPECT_NEAR(expected_calibration_error(std::vector<double>(4, 0.5), half), 0.0, 1e-15);
  EXPECT_NEAR(expected_calibration_error(std::vector<double>(4, 0.9), half), 0.4, 1e-15);
  EXPECT_EQ(expected_calibration_error(std::vector<double>(4, 1.0), std::vector<double>(4, 1.0)), 0.0);
}

TEST(CalibrationTest, EcePerfectAndEdgeCases) {
  const std::vector<double> p = {1.0, 0.0, 1.0};
  const std::vector<double> y = {1, 0, 1};
  EXPECT_EQ(expected_calibration_error(p, y), 0.0);
  EXPECT_EQ(expected_calibration_error(std::vector<double>{}, std::vector<double>{}), 0.0);
  EXPECT_THROW(expected_calibration_error(std::vector<double>{1.2}, std::vector<double>{1}), ValidationError);
  EXPECT_THROW(expected_calibration_error(p, std::vector<double>{1}), ValidationError);
}

TEST(CalibrationTest, PlattRecoversKnownScaling) {
  // Labels drawn from sigmoid(0.5 z - 1): the fit should land near (0.5, -1).
  Rng rng(7);
  const std::size_t n = 5000;
  DenseArray z = DenseArray::matrix(n, 1), c = DenseArray::matrix(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    z(r, 0) = 4.0 * standard_normal(rng);
    c(r, 0) = uniform01(rng) < 1.0 / (1.0 + std::exp(-(0.5 * z(r, 0) - 1.0))) ? 1.0 : 0.0;
  }
  auto p = fit_platt_logits(z, c, 1500, 1.0);
  EXPECT_NEAR(p.a[0], 0.5, 0.05);
  EXPECT_NEAR(p.b[0], -1.0, 0.1);
  for (std::size_t i = 1; i < p.loss_history.size(); ++i) {
    EXPECT_LE(p.loss_history[i], p.loss_history[i - 1] + 1e-12);
  }
}

TEST(CalibrationTest, ZeroEpochsIsIdentity) {
  auto p = fit_platt_logits(DenseArray::from_rows({{1, 2}}), DenseArray::from_rows({{1, 0}}), 0, 0.1);
  EXPECT_EQ(p.a, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(p.b, (std::vector<double>{0.0, 0.0}));
}

TEST(CalibrationTest, FitPlattRequiresMixCem) {
  ModelConfig c;
  c.kind = ModelKind::kCem;
  c.input_width = 3;
  c.k = 2;
  c.m = 2;
  c.L = 4;
  c.backbone_widths = {4};
  Model cem = init_model(c);
  EXPECT_THROW(fit_platt(cem, DenseArray::matrix(2, 3), DenseArray::matrix(2, 2), 5), ValidationError);
}

TEST(CalibrationTest, PlattKeepsRankingAndWeightsFrozen) {
  ModelConfig c;
  c.kind = ModelKind::kMixCem;
  c.input_width = 3;
  c.k = 2;
  c.m = 2;
  c.L = 4;
  c.backbone_widths = {4};
  Model model = init_model(c);
  Rng rng(3);
  DenseArray x = DenseArray::matrix(200, 3), labels = DenseArray::matrix(200, 2);
  for (double& v : x.data()) v = standard_normal(rng);
  for (std::size_t r = 0; r < 200; ++r) {
    labels(r, 0) = x(r, 0) > 0 ? 1 : 0;
    labels(r, 1) = x(r, 1) + 0.5 * standard_normal(rng) > 0 ? 1 : 0;
  }
  auto p = fit_platt(model, x, labels, 30);
  Model cal = with_platt(model, p);
  for (const auto& [name, v] : model.params) {
    if (!is_platt_parameter(name)) {
      EXPECT_EQ(cal.param(name), v) << name;
    }
  }
  ForwardOptions on;
  on.calibrated = true;
  auto before = forward(model, x);
  auto after = forward(cal, x, on);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_GT(p.a[i], 0.0);
    std::vector<double> s0(200), s1(200), l(200);
    for (std::size_t r = 0; r < 200; ++r) {
      s0[r] = before.logits(r, i);
      s1[r] = after.logits(r, i);
      l[r] = labels(r, i);
    }
    EXPECT_NEAR(*concept_roc_auc(s0, l), *concept_roc_auc(s1, l), 1e-12);
  }
  EXPECT_THROW(with_platt(model, PlattParams::identity(3)), ShapeError);
}

}  // namespace
}  // namespace cbmlab
