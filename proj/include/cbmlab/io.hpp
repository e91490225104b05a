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

// Text serialization of datasets, models, histories, reports and curves.
// Every file starts with a comment row "# stage=... config_hash=... schema=...";
// readers skip lines starting with '#'.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbmlab/datagen.hpp"
#include "cbmlab/dense_array.hpp"
#include "cbmlab/interventions.hpp"
#include "cbmlab/metrics.hpp"
#include "cbmlab/models.hpp"
#include "cbmlab/training.hpp"

namespace cbmlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kModelFormatTag = "cbmlab-model-v1";

/// Missing, unreadable or stale upstream artifact.
class ArtifactError : public Error {
 public:
  ArtifactError(const fs::path& path, const std::string& what)
      : Error("artifact " + path.string() + ": " + what), path_(path) {}
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

struct Provenance {
  std::string stage;
  std::string config_hash;
};

inline std::string header_row(const Provenance& p) {
  return "# stage=" + p.stage + " config_hash=" + p.config_hash + " schema=" + std::to_string(kSchemaVersion) + "\n";
}

inline std::string format_double(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_file(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError(path, "cannot open for writing");
  out << body;
  if (!out) throw ArtifactError(path, "write failed");
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError(path, "missing or unreadable");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Non-comment, non-empty lines.
inline std::vector<std::string> data_lines(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const fs::path& path) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ArtifactError(path, "bad number '" + s + "'");
  }
  if (used != s.size()) throw ArtifactError(path, "bad number '" + s + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Matrices

inline std::string matrix_csv(const DenseArray& a, int digits) {
  std::string out;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    for (std::size_t c = 0; c < a.cols(); ++c) {
      if (c) out += ',';
      out += format_double(a(r, c), digits);
    }
    out += '\n';
  }
  return out;
}

inline DenseArray read_matrix_csv(const fs::path& path) {
  const auto lines = data_lines(path);
  if (lines.empty()) throw ArtifactError(path, "no data rows");
  std::vector<double> data;
  std::size_t cols = 0;
  for (const auto& line : lines) {
    const auto cells = split_csv(line);
    if (cols == 0) cols = cells.size();
    if (cells.size() != cols) throw ArtifactError(path, "ragged rows");
    for (const auto& c : cells) data.push_back(parse_double(c, path));
  }
  return DenseArray(Shape{lines.size(), cols}, std::move(data));
}

/// Rounds every entry to the given number of significant digits, so in-memory
/// values equal what a reader of the printed form sees.
inline DenseArray round_to_digits(const DenseArray& a, int digits) {
  DenseArray out = a;
  for (double& v : out.data()) v = std::strtod(format_double(v, digits).c_str(), nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

inline constexpr int kDatasetDigits = 9;

inline json task_spec_json(const TaskSpec& s) {
  json j = {{"K", s.K}, {"k", s.k}, {"n", s.n}, {"L", s.L}, {"N", s.N}, {"sigma_x", s.sigma_x},
            {"split", {s.split.train, s.split.val, s.split.test}}, {"seed", s.seed}};
  j["spurious"] = s.spurious ? json{{"n_s", s.spurious->n_s}, {"strength", s.spurious->strength}} : json(nullptr);
  return j;
}

inline TaskSpec task_spec_from_json(const json& j) {
  TaskSpec s;
  s.K = j.at("K").get<std::size_t>();
  s.k = j.at("k").get<std::size_t>();
  s.n = j.at("n").get<std::size_t>();
  s.L = j.at("L").get<std::size_t>();
  s.N = j.at("N").get<std::size_t>();
  s.sigma_x = j.at("sigma_x").get<double>();
  const auto& sp = j.at("split");
  s.split = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
  s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("spurious") && !j.at("spurious").is_null()) {
    s.spurious = SpuriousSpec{j["spurious"].at("n_s").get<std::size_t>(), j["spurious"].at("strength").get<double>()};
  }
  return s;
}

/// Makes a freshly generated dataset equal to its own saved-and-loaded form:
/// x is rounded to the printed precision and feature stats recomputed.
inline ConceptDataset printable_dataset(ConceptDataset d) {
  d.x = round_to_digits(d.x, kDatasetDigits);
  d.feature_stats = compute_feature_stats(d.x, d.split);
  return d;
}

inline void save_dataset(const fs::path& dir, const ConceptDataset& d, const Provenance& prov,
                         const std::string& fingerprint) {
  const std::string head = header_row(prov);
  write_file(dir / "x.csv", head + matrix_csv(d.x, kDatasetDigits));
  write_file(dir / "c_star.csv", head + matrix_csv(d.c_star, kDatasetDigits));
  write_file(dir / "c.csv", head + matrix_csv(d.c, kDatasetDigits));
  std::string y;
  for (std::size_t v : d.y) y += std::to_string(v) + "\n";
  write_file(dir / "y.csv", head + y);
  json meta = {{"stage", prov.stage},
               {"config_hash", prov.config_hash},
               {"schema_version", kSchemaVersion},
               {"fingerprint", fingerprint},
               {"spec", task_spec_json(d.spec)},
               {"seed", d.spec.seed}};
  json tags = json::array();
  for (Split s : d.split) tags.push_back(split_name(s));
  meta["split"] = tags;
  meta["feature_stats"] = {{"min", d.feature_stats.min}, {"max", d.feature_stats.max}};
  write_file(dir / "meta.json", meta.dump(1) + "\n");
}

inline json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ArtifactError(path, std::string("invalid JSON: ") + e.what());
  }
}

inline ConceptDataset load_dataset(const fs::path& dir, const std::string& expected_fingerprint = "") {
  const json meta = read_json(dir / "meta.json");
  if (!expected_fingerprint.empty() && meta.value("fingerprint", "") != expected_fingerprint) {
    throw ArtifactError(dir / "meta.json", "stale: produced by a different task configuration");
  }
  ConceptDataset d;
  try {
    d.spec = task_spec_from_json(meta.at("spec"));
    for (const auto& t : meta.at("split")) d.split.push_back(parse_split(t.get<std::string>()));
    d.feature_stats.min = meta.at("feature_stats").at("min").get<std::vector<double>>();
    d.feature_stats.max = meta.at("feature_stats").at("max").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ArtifactError(dir / "meta.json", std::string("malformed: ") + e.what());
  }
  d.x = read_matrix_csv(dir / "x.csv");
  d.c_star = read_matrix_csv(dir / "c_star.csv");
  d.c = read_matrix_csv(dir / "c.csv");
  for (const auto& line : data_lines(dir / "y.csv")) {
    d.y.push_back(static_cast<std::size_t>(parse_double(line, dir / "y.csv")));
  }
  const std::size_t N = d.y.size();
  if (d.x.rows() != N || d.c.rows() != N || d.c_star.rows() != N || d.split.size() != N) {
    throw ArtifactError(dir, "row counts of dataset files disagree");
  }
  return d;
}

// ---------------------------------------------------------------------------
// Models

inline json model_config_json(const ModelConfig& c) {
  return {{"kind", kind_name(c.kind)},
          {"input_width", c.input_width},
          {"k", c.k},
          {"m", c.m},
          {"L", c.L},
          {"backbone_widths", c.backbone_widths},
          {"k_prime", c.k_prime},
          {"cem_activation", c.cem_activation == EmbeddingActivation::kLinear ? "linear" : "leaky_relu"},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.kind = parse_kind(j.at("kind").get<std::string>());
  c.input_width = j.at("input_width").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.m = j.at("m").get<std::size_t>();
  c.L = j.at("L").get<std::size_t>();
  c.backbone_widths = j.at("backbone_widths").get<std::vector<std::size_t>>();
  c.k_prime = j.at("k_prime").get<std::size_t>();
  const std::string act = j.at("cem_activation").get<std::string>();
  if (act == "linear") {
    c.cem_activation = EmbeddingActivation::kLinear;
  } else if (act == "leaky_relu") {
    c.cem_activation = EmbeddingActivation::kLeakyRelu;
  } else {
    throw ValidationError("unknown cem_activation '" + act + "'");
  }
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline constexpr int kParamDigits = 17;

/// Layout: header row, format tag, one-line meta JSON, then per parameter a
/// line "param <name> <rows> <cols>" followed by its rows.
inline std::string model_text(const Model& m, const Provenance& prov, const std::string& fingerprint) {
  json meta = {{"kind", kind_name(m.config.kind)}, {"config", model_config_json(m.config)},
               {"fingerprint", fingerprint}, {"stage", prov.stage}};
  std::string out = header_row(prov);
  out += std::string(kModelFormatTag) + "\n";
  out += "meta " + meta.dump() + "\n";
  for (const auto& [name, a] : m.params) {
    out += "param " + name + " " + std::to_string(a.rows()) + " " + std::to_string(a.cols()) + "\n";
    out += matrix_csv(a, kParamDigits);
  }
  return out;
}

inline void save_model(const fs::path& path, const Model& m, const Provenance& prov, const std::string& fingerprint) {
  write_file(path, model_text(m, prov, fingerprint));
}

struct LoadedModel {
  Model model;
  std::string fingerprint;
  std::string stage;
};

inline LoadedModel load_model(const fs::path& path) {
  const auto lines = data_lines(path);
  if (lines.size() < 2 || lines[0] != kModelFormatTag) throw ArtifactError(path, "not a cbmlab-model-v1 file");
  if (lines[1].rfind("meta ", 0) != 0) throw ArtifactError(path, "missing meta line");
  LoadedModel out;
  try {
    const json meta = json::parse(lines[1].substr(5));
    out.model.config = model_config_from_json(meta.at("config"));
    out.fingerprint = meta.value("fingerprint", "");
    out.stage = meta.value("stage", "");
  } catch (const json::exception& e) {
    throw ArtifactError(path, std::string("malformed meta: ") + e.what());
  }
  std::size_t i = 2;
  while (i < lines.size()) {
    std::istringstream head(lines[i]);
    std::string tag, name;
    std::size_t rows = 0, cols = 0;
    if (!(head >> tag >> name >> rows >> cols) || tag != "param") throw ArtifactError(path, "bad param line");
    if (i + rows >= lines.size()) {
      throw ArtifactError(path, "truncated parameter '" + name + "'");
    }
    std::vector<double> data;
    for (std::size_t r = 0; r < rows; ++r) {
      const auto cells = split_csv(lines[i + 1 + r]);
      if (cells.size() != cols) throw ArtifactError(path, "parameter '" + name + "' has a ragged row");
      for (const auto& c : cells) data.push_back(parse_double(c, path));
    }
    out.model.params.emplace(name, DenseArray(Shape{rows, cols}, std::move(data)));
    i += 1 + rows;
  }
  const Model fresh = init_model(out.model.config);
  for (const auto& [name, a] : fresh.params) {
    auto it = out.model.params.find(name);
    if (it == out.model.params.end()) throw ArtifactError(path, "missing parameter '" + name + "'");
    if (it->second.shape() != a.shape()) throw ArtifactError(path, "parameter '" + name + "' has the wrong shape");
  }
  if (out.model.params.size() != fresh.params.size()) throw ArtifactError(path, "unexpected extra parameters");
  return out;
}

// ---------------------------------------------------------------------------
// Tables

inline std::string opt_cell(const std::optional<double>& v) { return v ? format_double(*v, 17) : ""; }

inline std::string history_csv(const TrainHistory& h, const Provenance& prov) {
  std::string out = header_row(prov) + "epoch,lr,total,task,bce,prior,val_loss,val_acc\n";
  for (const auto& e : h.epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.lr, 17) + "," + format_double(e.train.total, 17) + "," +
           format_double(e.train.task, 17) + "," + format_double(e.train.bce, 17) + "," +
           format_double(e.train.prior, 17) + "," + opt_cell(e.val_loss) + "," + opt_cell(e.val_acc) + "\n";
  }
  return out;
}

inline std::string eval_csv_header(std::size_t k) {
  std::string h = "model,split,shift_level,sample_count,task_accuracy,mean_concept_auc,excluded_concepts,mean_entropy";
  for (double q : kEntropyQuantiles) h += ",entropy_q" + std::to_string(static_cast<int>(q * 100 + 0.5));
  h += ",bottleneck_shift";
  for (std::size_t i = 0; i < k; ++i) h += ",auc_" + std::to_string(i);
  return h + "\n";
}

inline std::string eval_csv_row(const std::string& model, const std::string& split, double level,
                                const EvalReport& r) {
  std::string row = model + "," + split + "," + format_double(level, 9) + "," + std::to_string(r.sample_count) + "," +
                    format_double(r.task_accuracy, 17) + "," + format_double(r.mean_concept_auc, 17) + "," +
                    std::to_string(r.excluded_concepts) + "," + format_double(r.mean_entropy, 17);
  for (double q : r.entropy_quantiles) row += "," + format_double(q, 17);
  row += "," + opt_cell(r.bottleneck_shift);
  for (const auto& a : r.per_concept_auc) row += "," + opt_cell(a);
  return row + "\n";
}

inline std::string curve_trials_csv(const InterventionCurve& c, const Provenance& prov) {
  std::string out = header_row(prov) + "fraction,trial,accuracy\n";
  for (std::size_t f = 0; f < c.fractions.size(); ++f) {
    for (std::size_t t = 0; t < c.accuracies.rows(); ++t) {
      out += format_double(c.fractions[f], 17) + "," + std::to_string(t) + "," +
             format_double(c.accuracies(t, f), 17) + "\n";
    }
  }
  return out;
}

inline std::string curve_summary_csv(const InterventionCurve& c, const Provenance& prov) {
  std::string out = header_row(prov) + "fraction,mean,std\n";
  for (std::size_t f = 0; f < c.fractions.size(); ++f) {
    out += format_double(c.fractions[f], 17) + "," + format_double(c.mean[f], 17) + "," +
           format_double(c.std[f], 17) + "\n";
  }
  return out;
}

inline std::string curve_auc_csv(const InterventionCurve& c, const Provenance& prov) {
  return header_row(prov) + "auc\n" + format_double(c.auc, 17) + "\n";
}

struct CurveSummary {
  std::vector<double> fractions;
  std::vector<double> mean;
  std::vector<double> std;
};

inline CurveSummary read_curve_summary(const fs::path& path) {
  const auto lines = data_lines(path);
  if (lines.empty() || lines[0] != "fraction,mean,std") throw ArtifactError(path, "not a curve summary");
  CurveSummary s;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv(lines[i]);
    if (cells.size() != 3) throw ArtifactError(path, "bad summary row");
    s.fractions.push_back(parse_double(cells[0], path));
    s.mean.push_back(parse_double(cells[1], path));
    s.std.push_back(parse_double(cells[2], path));
  }
  return s;
}

inline double read_curve_auc(const fs::path& path) {
  const auto lines = data_lines(path);
  if (lines.size() != 2 || lines[0] != "auc") throw ArtifactError(path, "not an auc file");
  return parse_double(lines[1], path);
}

/// Trial matrix (trials x fractions) read back from a (fraction, trial, accuracy) file.
inline DenseArray read_curve_trials(const fs::path& path, std::vector<double>* fractions = nullptr) {
  const auto lines = data_lines(path);
  if (lines.empty() || lines[0] != "fraction,trial,accuracy") throw ArtifactError(path, "not a curve file");
  std::vector<double> fr;
  std::size_t trials = 0;
  std::vector<std::array<double, 3>> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv(lines[i]);
    if (cells.size() != 3) throw ArtifactError(path, "bad curve row");
    const double f = parse_double(cells[0], path);
    const double t = parse_double(cells[1], path);
    rows.push_back({f, t, parse_double(cells[2], path)});
    if (fr.empty() || fr.back() != f) fr.push_back(f);
    trials = std::max(trials, static_cast<std::size_t>(t) + 1);
  }
  if (fr.empty() || rows.size() != fr.size() * trials) throw ArtifactError(path, "incomplete trial matrix");
  DenseArray acc = DenseArray::matrix(trials, fr.size());
  for (std::size_t i = 0; i < rows.size(); ++i) acc(static_cast<std::size_t>(rows[i][1]), i / trials) = rows[i][2];
  if (fractions) *fractions = fr;
  return acc;
}

}  // namespace cbmlab
