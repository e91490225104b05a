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

#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "cbmlab/io.hpp"

namespace cbmlab {
namespace {

class IoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("cbmlab_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                       "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir);
  }
  void TearDown() override { fs::remove_all(dir); }
  fs::path dir;
};

ConceptDataset sample_dataset(bool spurious = false) {
  TaskSpec s;
  s.K = 4;
  s.k = 2;
  s.n = 5;
  s.L = 8;
  s.N = 50;
  s.sigma_x = 0.3;
  s.seed = 12;
  if (spurious) s.spurious = SpuriousSpec{2, 1.5};
  return printable_dataset(generate_task(s));
}

TEST_F(IoTest, DatasetRoundTripIsExact) {
  for (bool spurious : {false, true}) {
    auto d = sample_dataset(spurious);
    save_dataset(dir / "data", d, {"gen-data", "abc"}, "fp1");
    auto back = load_dataset(dir / "data", "fp1");
    EXPECT_EQ(back.x, d.x);
    EXPECT_EQ(back.c_star, d.c_star);
    EXPECT_EQ(back.c, d.c);
    EXPECT_EQ(back.y, d.y);
    EXPECT_EQ(back.split, d.split);
    EXPECT_EQ(back.feature_stats.min, d.feature_stats.min);
    EXPECT_EQ(back.feature_stats.max, d.feature_stats.max);
    EXPECT_EQ(back.spec.seed, d.spec.seed);
    EXPECT_EQ(back.spec.spurious.has_value(), spurious);
  }
}

TEST_F(IoTest, DatasetFilesCarryProvenanceHeader) {
  save_dataset(dir / "data", sample_dataset(), {"gen-data", "00ff"}, "fp1");
  const std::string x = read_file(dir / "data" / "x.csv");
  EXPECT_EQ(x.rfind("# stage=gen-data config_hash=00ff schema=1\n", 0), 0u);
  const json meta = read_json(dir / "data" / "meta.json");
  EXPECT_EQ(meta.at("config_hash"), "00ff");
  EXPECT_EQ(meta.at("stage"), "gen-data");
}

TEST_F(IoTest, StaleDatasetIsRejected) {
  save_dataset(dir / "data", sample_dataset(), {"gen-data", "abc"}, "fp1");
  try {
    load_dataset(dir / "data", "fp2");
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_EQ(e.path(), dir / "data" / "meta.json");
    EXPECT_NE(std::string(e.what()).find("stale"), std::string::npos);
  }
}

TEST_F(IoTest, MissingDatasetNamesPath) {
  try {
    load_dataset(dir / "nowhere");
    FAIL() << "expected ArtifactError";
  } catch (const ArtifactError& e) {
    EXPECT_NE(std::string(e.what()).find((dir / "nowhere" / "meta.json").string()), std::string::npos);
  }
}

TEST_F(IoTest, ModelRoundTripIsExact) {
  for (ModelKind kind : {ModelKind::kVanillaCbm, ModelKind::kHybridCbm, ModelKind::kCem, ModelKind::kMixCem}) {
    ModelConfig c;
    c.kind = kind;
    c.input_width = 5;
    c.k = 2;
    c.m = 3;
    c.L = 4;
    c.backbone_widths = {6, 4};
    c.k_prime = kind == ModelKind::kHybridCbm ? 2 : 0;
    c.cem_activation = EmbeddingActivation::kLinear;
    c.seed = 77;
    Model m = init_model(c);
    for (auto& [name, p] : m.params) {
      for (double& v : p.data()) v = v * 1.0000001 + 1e-300;  // full-precision values
    }
    const fs::path path = dir / (kind_name(kind) + ".model");
    save_model(path, m, {"train", "abc"}, "fp");
    auto back = load_model(path);
    EXPECT_EQ(back.model.params, m.params) << kind_name(kind);
    EXPECT_EQ(back.model.config.backbone_widths, c.backbone_widths);
    EXPECT_EQ(back.model.config.k_prime, c.k_prime);
    EXPECT_EQ(back.model.config.cem_activation, c.cem_activation);
    EXPECT_EQ(back.fingerprint, "fp");
    EXPECT_EQ(back.stage, "train");
  }
}

TEST_F(IoTest, CorruptModelsAreRejected) {
  ModelConfig c;
  c.kind = ModelKind::kVanillaCbm;
  c.input_width = 3;
  c.k = 2;
  c.L = 3;
  c.backbone_widths = {4};
  save_model(dir / "m.model", init_model(c), {"train", "h"}, "fp");
  std::string text = read_file(dir / "m.model");
  write_file(dir / "bad_tag.model", "# x\nnot-a-model\n");
  EXPECT_THROW(load_model(dir / "bad_tag.model"), ArtifactError);
  write_file(dir / "short.model", text.substr(0, text.size() / 2));
  EXPECT_THROW(load_model(dir / "short.model"), ArtifactError);
  const auto pos = text.find("param head.bias");
  write_file(dir / "missing.model", text.substr(0, pos));
  EXPECT_THROW(load_model(dir / "missing.model"), ArtifactError);
}

TEST_F(IoTest, CurveFilesRoundTrip) {
  InterventionCurve c;
  c.fractions = {0, 0.5, 1};
  c.accuracies = DenseArray::from_rows({{0.1, 0.2, 0.3}, {0.15, 0.25, 0.35}});
  detail::finish_curve(c);
  write_file(dir / "c.csv", curve_trials_csv(c, {"curve", "h"}));
  write_file(dir / "c_summary.csv", curve_summary_csv(c, {"curve", "h"}));
  write_file(dir / "c_auc.csv", curve_auc_csv(c, {"curve", "h"}));
  std::vector<double> fr;
  EXPECT_EQ(read_curve_trials(dir / "c.csv", &fr), c.accuracies);
  EXPECT_EQ(fr, c.fractions);
  auto s = read_curve_summary(dir / "c_summary.csv");
  EXPECT_EQ(s.mean, c.mean);
  EXPECT_EQ(s.std, c.std);
  EXPECT_EQ(read_curve_auc(dir / "c_auc.csv"), c.auc);
}

TEST(IoFormatTest, EvalRowLayout) {
  EvalReport r;
  r.sample_count = 10;
  r.task_accuracy = 0.5;
  r.per_concept_auc = {0.75, std::nullopt};
  r.excluded_concepts = 1;
  const std::string header = eval_csv_header(2);
  const std::string row = eval_csv_row("cem", "test", 0.1, r);
  EXPECT_EQ(split_csv(header.substr(0, header.size() - 1)).size(), split_csv(row.substr(0, row.size() - 1)).size());
  EXPECT_EQ(row.rfind("cem,test,0.1,10,0.5,", 0), 0u);
  EXPECT_EQ(row.substr(row.size() - 7), ",0.75,\n");
}

TEST(IoFormatTest, SplitCsvKeepsTrailingEmptyCell) {
  EXPECT_EQ(split_csv("a,,b,"), (std::vector<std::string>{"a", "", "b", ""}));
}

TEST(IoFormatTest, RoundToDigitsIsIdempotent) {
  DenseArray a = DenseArray::from_rows({{0.1234567891234, -2.0 / 3.0}});
  auto once = round_to_digits(a, 9);
  EXPECT_EQ(round_to_digits(once, 9), once);
  EXPECT_EQ(once(0, 0), 0.123456789);
}

}  // namespace
}  // namespace cbmlab
