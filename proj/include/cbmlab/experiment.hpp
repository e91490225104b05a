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

// Declarative experiments: a JSON config, a master seed fanned out to stage
// seeds by name, and the stages gen-data -> train -> calibrate -> evaluate ->
// curve -> report. Each stage reads its inputs from the artifact tree written
// by the previous ones, so running stages one by one gives the same files as
// a full run.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbmlab/calibration.hpp"
#include "cbmlab/datagen.hpp"
#include "cbmlab/interventions.hpp"
#include "cbmlab/io.hpp"
#include "cbmlab/metrics.hpp"
#include "cbmlab/models.hpp"
#include "cbmlab/plot.hpp"
#include "cbmlab/rng.hpp"
#include "cbmlab/training.hpp"

namespace cbmlab {

/// Config validation failure; the message names the offending field.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Failure inside a pipeline stage, prefixed with the stage name.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& what) : Error("stage " + stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct ModelSpec {
  ModelKind kind = ModelKind::kMixCem;
  std::size_t m = 16;
  std::vector<std::size_t> backbone_widths = {64};
  std::size_t k_prime = 0;
  EmbeddingActivation cem_activation = EmbeddingActivation::kLeakyRelu;
};

struct CalibrationConfig {
  std::size_t epochs = 30;
  double lr = 0.01;
};

struct InterventionStudy {
  std::vector<double> fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t trials = 5;
  std::vector<double> noise_levels = {0.0, 0.05, 0.1};  // 0 is the clean (ID) set
  std::vector<Split> splits = {Split::kTest};
};

struct BayesReferences {
  bool exact = true;
  bool masked = true;
  BayesApproxConfig approx;
};

/// Default task: six complete concepts of which three are annotated.
inline TaskSpec default_experiment_task() {
  TaskSpec t;
  t.K = 6;
  t.k = 3;
  t.n = 32;
  t.L = 16;
  t.N = 6000;
  t.sigma_x = 0.3;
  return t;
}

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;
  TaskSpec task = default_experiment_task();
  std::vector<ModelSpec> models;
  TrainConfig train;
  CalibrationConfig calibration;
  std::size_t mc_samples = 50;
  InterventionStudy interventions;
  BayesReferences bayes;
  std::string output_dir = "cbmlab-out";
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

// Typed, path-aware access to a JSON object; rejects unknown keys.
class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: field '" + display() + "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    out = convert<T>(key, j_.at(key));
  }

  template <class T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!has(key)) throw ConfigError("config: missing required field '" + full(key) + "'");
    return convert<T>(key, j_.at(key));
  }

  FieldReader child(const std::string& key) {
    seen_.insert(key);
    return FieldReader(has(key) ? j_.at(key) : empty(), full(key));
  }

  void mark(const std::string& key) { seen_.insert(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string full(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, v] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown field '" + full(key) + "'");
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  template <class T>
  T convert(const std::string& key, const json& v) const {
    const auto fail = [&](const char* what) -> T {
      throw ConfigError("config: field '" + full(key) + "' must be " + what);
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) return fail("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) return fail("a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) return fail("a number");
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
        return fail("a non-negative integer");
      }
      return v.get<T>();
    } else {
      // std::vector<Scalar>
      if (!v.is_array()) return fail("an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(key + "[" + std::to_string(i) + "]", v[i]));
      }
      return out;
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline EmbeddingActivation parse_activation(const std::string& s, const std::string& field) {
  if (s == "leaky_relu") return EmbeddingActivation::kLeakyRelu;
  if (s == "linear") return EmbeddingActivation::kLinear;
  throw ConfigError("config: field '" + field + "' must be 'leaky_relu' or 'linear'");
}

inline const char* activation_name(EmbeddingActivation a) {
  return a == EmbeddingActivation::kLinear ? "linear" : "leaky_relu";
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& root) {
  ExperimentConfig c;
  detail::FieldReader r(root, "");
  c.schema_version = r.require<int>("schema_version");
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("config: field 'schema_version' must be " + std::to_string(kSchemaVersion));
  }
  c.seed = r.require<std::uint64_t>("seed");
  r.get("output_dir", c.output_dir);

  {
    auto t = r.child("task");
    t.get("K", c.task.K);
    t.get("k", c.task.k);
    t.get("n", c.task.n);
    t.get("L", c.task.L);
    t.get("N", c.task.N);
    t.get("sigma_x", c.task.sigma_x);
    std::vector<double> split = {c.task.split.train, c.task.split.val, c.task.split.test};
    t.get("split", split);
    if (split.size() != 3) throw ConfigError("config: field 'task.split' must hold three fractions");
    c.task.split = {split[0], split[1], split[2]};
    if (t.has("spurious")) {
      auto sp = t.child("spurious");
      SpuriousSpec s;
      s.n_s = sp.require<std::size_t>("n_s");
      sp.get("strength", s.strength);
      sp.finish();
      c.task.spurious = s;
    } else {
      t.mark("spurious");
    }
    t.finish();
  }

  if (r.has("models")) {
    const json& arr = r.raw("models");
    if (!arr.is_array() || arr.empty()) throw ConfigError("config: field 'models' must be a non-empty array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      detail::FieldReader m(arr[i], "models[" + std::to_string(i) + "]");
      ModelSpec s;
      const std::string kind = m.require<std::string>("kind");
      try {
        s.kind = parse_kind(kind);
      } catch (const ValidationError&) {
        throw ConfigError("config: field '" + m.full("kind") + "' has unknown model kind '" + kind + "'");
      }
      m.get("m", s.m);
      m.get("backbone_widths", s.backbone_widths);
      m.get("k_prime", s.k_prime);
      std::string act = detail::activation_name(s.cem_activation);
      m.get("cem_activation", act);
      s.cem_activation = detail::parse_activation(act, m.full("cem_activation"));
      m.finish();
      for (const auto& prev : c.models) {
        if (prev.kind == s.kind) throw ConfigError("config: model kind '" + kind_name(s.kind) + "' listed twice");
      }
      c.models.push_back(s);
    }
  } else {
    r.mark("models");
    for (ModelKind k : {ModelKind::kVanillaCbm, ModelKind::kCem, ModelKind::kMixCem}) c.models.push_back({k});
  }

  {
    auto t = r.child("train");
    t.get("lambda_c", c.train.lambda_c);
    t.get("lambda_p", c.train.lambda_p);
    t.get("p_int", c.train.p_int);
    t.get("p_drop", c.train.p_drop);
    t.get("lr", c.train.lr);
    t.get("momentum", c.train.momentum);
    t.get("weight_decay", c.train.weight_decay);
    t.get("batch_size", c.train.batch_size);
    t.get("max_epochs", c.train.max_epochs);
    t.get("patience", c.train.patience);
    t.get("val_freq", c.train.val_freq);
    t.get("lr_decay_factor", c.train.lr_decay_factor);
    t.get("plateau_epochs", c.train.plateau_epochs);
    t.get("class_weighted_bce", c.train.class_weighted_bce);
    t.finish();
  }
  {
    auto t = r.child("calibration");
    t.get("epochs", c.calibration.epochs);
    t.get("lr", c.calibration.lr);
    t.finish();
  }
  {
    auto t = r.child("inference");
    t.get("mc_samples", c.mc_samples);
    t.finish();
  }
  {
    auto t = r.child("interventions");
    t.get("fractions", c.interventions.fractions);
    t.get("trials", c.interventions.trials);
    t.get("noise_levels", c.interventions.noise_levels);
    std::vector<std::string> splits;
    t.get("splits", splits);
    if (!splits.empty()) {
      c.interventions.splits.clear();
      for (const auto& s : splits) {
        try {
          c.interventions.splits.push_back(parse_split(s));
        } catch (const ValidationError&) {
          throw ConfigError("config: field 'interventions.splits' has unknown split '" + s + "'");
        }
      }
    }
    t.finish();
  }
  {
    auto t = r.child("bayes");
    t.get("exact", c.bayes.exact);
    t.get("masked", c.bayes.masked);
    t.get("hidden_widths", c.bayes.approx.hidden_widths);
    t.get("mask_prob", c.bayes.approx.mask_prob);
    t.get("mask_value", c.bayes.approx.mask_value);
    t.get("epochs", c.bayes.approx.epochs);
    t.get("lr", c.bayes.approx.lr);
    t.get("momentum", c.bayes.approx.momentum);
    t.get("batch_size", c.bayes.approx.batch_size);
    t.finish();
  }
  r.finish();
  return c;
}

/// Seeds of the stochastic stages, fanned out from the master seed by name.
inline void assign_stage_seeds(ExperimentConfig& c) {
  c.task.seed = derive_seed(c.seed, "gen-data");
  c.train.seed = derive_seed(c.seed, "train");
  c.bayes.approx.seed = derive_seed(c.seed, "bayes");
}

inline void validate(const ExperimentConfig& c) {
  auto wrap = [](const char* field, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("config: field '") + field + "': " + e.what());
    }
  };
  wrap("task", [&] { validate(c.task); });
  wrap("task.split", [&] { detail::split_counts(c.task.N, c.task.split); });
  wrap("train", [&] { validate(c.train); });
  wrap("bayes", [&] { validate(c.bayes.approx); });
  wrap("interventions.fractions", [&] { validate_fractions(c.interventions.fractions); });
  if (c.interventions.trials < 1) throw ConfigError("config: field 'interventions.trials' must be >= 1");
  for (double l : c.interventions.noise_levels) {
    if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("config: field 'interventions.noise_levels' must lie in [0, 1]");
  }
  if (c.mc_samples < 1) throw ConfigError("config: field 'inference.mc_samples' must be >= 1");
  if (!(c.calibration.lr > 0)) throw ConfigError("config: field 'calibration.lr' must be positive");
  for (std::size_t i = 0; i < c.models.size(); ++i) {
    wrap("models", [&] { validate(ModelConfig{c.models[i].kind, c.task.n + (c.task.spurious ? c.task.spurious->n_s : 0),
                                              c.task.k, c.models[i].m, c.task.L, c.models[i].backbone_widths,
                                              c.models[i].k_prime, c.models[i].cem_activation, 0}); });
  }
}

/// Canonical JSON of a parsed config (all defaults filled in).
inline json config_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  json task = task_spec_json(c.task);
  task.erase("seed");
  j["task"] = task;
  json models = json::array();
  for (const auto& m : c.models) {
    models.push_back({{"kind", kind_name(m.kind)}, {"m", m.m}, {"backbone_widths", m.backbone_widths},
                      {"k_prime", m.k_prime}, {"cem_activation", detail::activation_name(m.cem_activation)}});
  }
  j["models"] = models;
  const TrainConfig& t = c.train;
  j["train"] = {{"lambda_c", t.lambda_c}, {"lambda_p", t.lambda_p}, {"p_int", t.p_int}, {"p_drop", t.p_drop},
                {"lr", t.lr}, {"momentum", t.momentum}, {"weight_decay", t.weight_decay},
                {"batch_size", t.batch_size}, {"max_epochs", t.max_epochs}, {"patience", t.patience},
                {"val_freq", t.val_freq}, {"lr_decay_factor", t.lr_decay_factor},
                {"plateau_epochs", t.plateau_epochs}, {"class_weighted_bce", t.class_weighted_bce}};
  j["calibration"] = {{"epochs", c.calibration.epochs}, {"lr", c.calibration.lr}};
  j["inference"] = {{"mc_samples", c.mc_samples}};
  json splits = json::array();
  for (Split s : c.interventions.splits) splits.push_back(split_name(s));
  j["interventions"] = {{"fractions", c.interventions.fractions}, {"trials", c.interventions.trials},
                        {"noise_levels", c.interventions.noise_levels}, {"splits", splits}};
  const BayesApproxConfig& b = c.bayes.approx;
  j["bayes"] = {{"exact", c.bayes.exact}, {"masked", c.bayes.masked}, {"hidden_widths", b.hidden_widths},
                {"mask_prob", b.mask_prob}, {"mask_value", b.mask_value}, {"epochs", b.epochs}, {"lr", b.lr},
                {"momentum", b.momentum}, {"batch_size", b.batch_size}};
  return j;
}

inline std::string json_hash(const json& j) { return hex64(fnv1a64(j.dump())); }

/// Hash of everything that affects results; output_dir is excluded.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = config_json(c);
  j.erase("output_dir");
  return json_hash(j);
}

/// Parses, fills defaults, derives stage seeds and validates.
inline ExperimentConfig load_config_json(const json& j) {
  ExperimentConfig c = parse_config(j);
  assign_stage_seeds(c);
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return load_config_json(j);
}

// ---------------------------------------------------------------------------
// Artifact layout and fingerprints

struct ArtifactPaths {
  fs::path root;

  fs::path data() const { return root / "data"; }
  fs::path model(const std::string& name) const { return root / "models" / (name + ".model"); }
  fs::path history(const std::string& name) const { return root / "models" / (name + "_history.csv"); }
  fs::path calibrated(const std::string& name) const { return root / "models" / (name + "_calibrated.model"); }
  fs::path calibration_table() const { return root / "models" / "calibration.csv"; }
  fs::path eval_table() const { return root / "eval" / "eval.csv"; }
  fs::path curve_stem(const std::string& name, Split s, double level) const {
    return root / "curves" / (name + "_" + split_name(s) + "_noise" + format_double(level, 9));
  }
  fs::path bayes_stem(const std::string& name, Split s) const {
    return root / "curves" / (name + "_" + split_name(s));
  }
  fs::path report_table() const { return root / "report" / "summary.csv"; }
  fs::path bayes_table() const { return root / "report" / "bayes.csv"; }
  fs::path plot(Split s, double level) const {
    return root / "report" / (std::string("curves_") + split_name(s) + "_noise" + format_double(level, 9) + ".svg");
  }
};

inline std::string data_fingerprint(const ExperimentConfig& c) {
  return json_hash({{"task", task_spec_json(c.task)}});
}

inline json train_json(const TrainConfig& t) {
  return {{"lambda_c", t.lambda_c}, {"lambda_p", t.lambda_p}, {"p_int", t.p_int}, {"p_drop", t.p_drop},
          {"lr", t.lr}, {"momentum", t.momentum}, {"weight_decay", t.weight_decay}, {"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs}, {"patience", t.patience}, {"val_freq", t.val_freq},
          {"lr_decay_factor", t.lr_decay_factor}, {"plateau_epochs", t.plateau_epochs},
          {"class_weighted_bce", t.class_weighted_bce}, {"seed", t.seed}};
}

inline ModelConfig model_config(const ExperimentConfig& c, const ModelSpec& s) {
  ModelConfig mc;
  mc.kind = s.kind;
  mc.input_width = c.task.n + (c.task.spurious ? c.task.spurious->n_s : 0);
  mc.k = c.task.k;
  mc.m = s.m;
  mc.L = c.task.L;
  mc.backbone_widths = s.backbone_widths;
  mc.k_prime = s.k_prime;
  mc.cem_activation = s.cem_activation;
  mc.seed = derive_seed(c.seed, "init/" + kind_name(s.kind));
  return mc;
}

inline TrainConfig model_train_config(const ExperimentConfig& c, const ModelSpec& s) {
  TrainConfig t = c.train;
  t.seed = derive_seed(c.train.seed, kind_name(s.kind));
  return t;
}

inline std::string model_fingerprint(const ExperimentConfig& c, const ModelSpec& s) {
  return json_hash({{"data", data_fingerprint(c)},
                    {"model", model_config_json(model_config(c, s))},
                    {"train", train_json(model_train_config(c, s))}});
}

inline std::string calibrated_fingerprint(const ExperimentConfig& c, const ModelSpec& s) {
  return json_hash({{"model", model_fingerprint(c, s)},
                    {"calibration", {{"epochs", c.calibration.epochs}, {"lr", c.calibration.lr}}}});
}

/// Inference options shared by the evaluate and curve stages, so fraction 0 of
/// a curve equals the plain evaluation.
inline ForwardOptions inference_options(const ExperimentConfig& c, const Model& m) {
  ForwardOptions o;
  o.calibrated = m.config.kind == ModelKind::kMixCem;
  o.dropout_p = m.config.kind == ModelKind::kMixCem ? c.train.p_drop : 0.0;
  o.mc_samples = c.mc_samples;
  o.rng_seed = derive_seed(c.seed, "inference");
  return o;
}

inline std::optional<NoiseShift> noise_shift(const ExperimentConfig& c, double level) {
  if (level == 0.0) return std::nullopt;
  return NoiseShift{level, derive_seed(c.seed, "noise/" + format_double(level, 9))};
}

inline std::uint64_t curve_seed(const ExperimentConfig& c) { return derive_seed(c.seed, "curve"); }

// ---------------------------------------------------------------------------
// Stages

struct StageContext {
  ExperimentConfig config;
  ArtifactPaths paths;
  std::string hash;
  std::vector<std::string> only_models;  // empty: every configured model
  bool plots = true;

  Provenance prov(const std::string& stage) const { return {stage, hash}; }

  std::vector<ModelSpec> selected() const {
    if (only_models.empty()) return config.models;
    std::vector<ModelSpec> out;
    for (const auto& name : only_models) {
      const ModelKind k = parse_kind(name);
      auto it = std::find_if(config.models.begin(), config.models.end(),
                             [k](const ModelSpec& s) { return s.kind == k; });
      if (it == config.models.end()) throw ConfigError("model '" + name + "' is not in the config's models list");
      out.push_back(*it);
    }
    return out;
  }
};

inline StageContext make_context(ExperimentConfig config, const std::optional<std::string>& out_dir = std::nullopt) {
  if (out_dir) config.output_dir = *out_dir;
  StageContext ctx;
  ctx.hash = config_hash(config);
  ctx.paths.root = config.output_dir;
  ctx.config = std::move(config);
  return ctx;
}

namespace detail {

template <class F>
auto in_stage(const std::string& stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ArtifactError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

inline ConceptDataset load_stage_data(const StageContext& ctx) {
  return load_dataset(ctx.paths.data(), data_fingerprint(ctx.config));
}

inline Model load_checked_model(const fs::path& path, const std::string& fingerprint) {
  LoadedModel lm = load_model(path);
  if (lm.fingerprint != fingerprint) throw ArtifactError(path, "stale: produced by a different configuration");
  return lm.model;
}

}  // namespace detail

/// Model used for inference: the calibrated file for MixCEM, the trained one otherwise.
inline Model load_inference_model(const StageContext& ctx, const ModelSpec& s) {
  if (s.kind == ModelKind::kMixCem) {
    return detail::load_checked_model(ctx.paths.calibrated(kind_name(s.kind)), calibrated_fingerprint(ctx.config, s));
  }
  return detail::load_checked_model(ctx.paths.model(kind_name(s.kind)), model_fingerprint(ctx.config, s));
}

inline ConceptDataset stage_gen_data(const StageContext& ctx) {
  return detail::in_stage("gen-data", [&] {
    ConceptDataset d = printable_dataset(generate_task(ctx.config.task));
    save_dataset(ctx.paths.data(), d, ctx.prov("gen-data"), data_fingerprint(ctx.config));
    return d;
  });
}

struct TrainedModel {
  ModelSpec spec;
  Model model;
  TrainHistory history;
};

inline std::vector<TrainedModel> stage_train(const StageContext& ctx) {
  return detail::in_stage("train", [&] {
    const ConceptDataset data = detail::load_stage_data(ctx);
    std::vector<TrainedModel> out;
    for (const ModelSpec& s : ctx.selected()) {
      const std::string name = kind_name(s.kind);
      TrainResult r = train(init_model(model_config(ctx.config, s)), data, model_train_config(ctx.config, s));
      save_model(ctx.paths.model(name), r.model, ctx.prov("train"), model_fingerprint(ctx.config, s));
      write_file(ctx.paths.history(name), history_csv(r.history, ctx.prov("train")));
      out.push_back({s, std::move(r.model), std::move(r.history)});
    }
    return out;
  });
}

struct CalibrationOutcome {
  ModelSpec spec;
  PlattParams platt;
  std::vector<std::optional<double>> auc_before;
  std::vector<std::optional<double>> auc_after;
  double ece_before = 0.0;
  double ece_after = 0.0;
};

/// Fits Platt scaling for every selected MixCEM on the validation split.
inline std::vector<CalibrationOutcome> stage_calibrate(const StageContext& ctx) {
  return detail::in_stage("calibrate", [&] {
    const ConceptDataset data = detail::load_stage_data(ctx);
    const SplitView val = select_split(data, Split::kVal);
    std::vector<CalibrationOutcome> out;
    std::string table = header_row(ctx.prov("calibrate")) + "model,concept,a,b,auc_before,auc_after\n";
    std::string ece_rows;
    for (const ModelSpec& s : ctx.selected()) {
      if (s.kind != ModelKind::kMixCem) continue;
      const std::string name = kind_name(s.kind);
      const Model trained = detail::load_checked_model(ctx.paths.model(name), model_fingerprint(ctx.config, s));
      CalibrationOutcome o;
      o.spec = s;
      const DenseArray logits = concept_logits(trained, val.x);
      o.platt = fit_platt_logits(logits, val.c, ctx.config.calibration.epochs, ctx.config.calibration.lr);
      const Model cal = with_platt(trained, o.platt);
      ForwardOptions raw_opts, cal_opts;
      cal_opts.calibrated = true;
      const ForwardOutput before = forward(trained, val.x, raw_opts);
      const ForwardOutput after = forward(cal, val.x, cal_opts);
      EvalReport rb, ra;
      fill_concept_auc(rb, before.logits, val.c);
      fill_concept_auc(ra, after.logits, val.c);
      o.auc_before = rb.per_concept_auc;
      o.auc_after = ra.per_concept_auc;
      o.ece_before = expected_calibration_error(before.p_hat.data(), val.c.data());
      o.ece_after = expected_calibration_error(after.p_hat.data(), val.c.data());
      for (std::size_t i = 0; i < o.platt.a.size(); ++i) {
        table += name + "," + std::to_string(i) + "," + format_double(o.platt.a[i], 17) + "," +
                 format_double(o.platt.b[i], 17) + "," + opt_cell(o.auc_before[i]) + "," +
                 opt_cell(o.auc_after[i]) + "\n";
      }
      ece_rows += name + "," + format_double(o.ece_before, 17) + "," + format_double(o.ece_after, 17) + "\n";
      save_model(ctx.paths.calibrated(name), cal, ctx.prov("calibrate"), calibrated_fingerprint(ctx.config, s));
      out.push_back(std::move(o));
    }
    write_file(ctx.paths.calibration_table(), table);
    write_file(ctx.paths.root / "models" / "calibration_ece.csv",
               header_row(ctx.prov("calibrate")) + "model,val_ece_before,val_ece_after\n" + ece_rows);
    return out;
  });
}

struct EvalRow {
  std::string model;
  Split split;
  double level = 0.0;
  EvalReport report;
};

inline std::vector<EvalRow> stage_evaluate(const StageContext& ctx) {
  return detail::in_stage("evaluate", [&] {
    const ConceptDataset data = detail::load_stage_data(ctx);
    std::vector<EvalRow> rows;
    std::string table = header_row(ctx.prov("evaluate")) + eval_csv_header(ctx.config.task.k);
    for (const ModelSpec& s : ctx.selected()) {
      const Model m = load_inference_model(ctx, s);
      const ForwardOptions opts = inference_options(ctx.config, m);
      for (Split sp : ctx.config.interventions.splits) {
        const SplitView view = select_split(data, sp);
        for (double level : ctx.config.interventions.noise_levels) {
          EvalRow row{kind_name(s.kind), sp, level, evaluate(m, view, data.feature_stats, noise_shift(ctx.config, level), opts)};
          table += eval_csv_row(row.model, split_name(sp), level, row.report);
          rows.push_back(std::move(row));
        }
      }
    }
    write_file(ctx.paths.eval_table(), table);
    return rows;
  });
}

struct CurveRecord {
  std::string model;  // model kind, or bayes_exact / bayes_masked
  Split split;
  std::optional<double> level;  // empty for the shift-invariant Bayes references
  InterventionCurve curve;
};

struct CurveStageResult {
  std::vector<CurveRecord> curves;
  std::optional<MaskedBayesModel> masked_bayes;
};

inline void write_curve(const fs::path& stem, const InterventionCurve& c, const Provenance& prov) {
  write_file(stem.string() + ".csv", curve_trials_csv(c, prov));
  write_file(stem.string() + "_summary.csv", curve_summary_csv(c, prov));
  write_file(stem.string() + "_auc.csv", curve_auc_csv(c, prov));
}

inline CurveStageResult stage_curve(const StageContext& ctx) {
  return detail::in_stage("curve", [&] {
    const ConceptDataset data = detail::load_stage_data(ctx);
    const auto& iv = ctx.config.interventions;
    const std::uint64_t seed = curve_seed(ctx.config);
    CurveStageResult out;
    for (const ModelSpec& s : ctx.selected()) {
      const Model m = load_inference_model(ctx, s);
      const ForwardOptions opts = inference_options(ctx.config, m);
      for (Split sp : iv.splits) {
        const SplitView view = select_split(data, sp);
        for (double level : iv.noise_levels) {
          CurveRecord rec{kind_name(s.kind), sp, level,
                          intervention_curve(m, view, data.feature_stats, iv.fractions, iv.trials,
                                             noise_shift(ctx.config, level), seed, opts)};
          write_curve(ctx.paths.curve_stem(rec.model, sp, level), rec.curve, ctx.prov("curve"));
          out.curves.push_back(std::move(rec));
        }
      }
    }
    if (ctx.only_models.empty()) {
      if (ctx.config.bayes.masked) out.masked_bayes = train_masked_bayes(data, ctx.config.bayes.approx);
      for (Split sp : iv.splits) {
        const SplitView view = select_split(data, sp);
        if (ctx.config.bayes.exact) {
          CurveRecord rec{"bayes_exact", sp, std::nullopt,
                          exact_bayes_curve(data.spec, view, iv.fractions, iv.trials, seed)};
          write_curve(ctx.paths.bayes_stem(rec.model, sp), rec.curve, ctx.prov("curve"));
          out.curves.push_back(std::move(rec));
        }
        if (out.masked_bayes) {
          CurveRecord rec{"bayes_masked", sp, std::nullopt,
                          masked_bayes_curve(*out.masked_bayes, view, iv.fractions, iv.trials, seed)};
          write_curve(ctx.paths.bayes_stem(rec.model, sp), rec.curve, ctx.prov("curve"));
          out.curves.push_back(std::move(rec));
        }
      }
    }
    return out;
  });
}

struct ReportRow {
  std::string model;
  Split split;
  std::optional<double> level;
  CurveSummary summary;
  double auc = 0.0;
};

namespace detail {

inline std::string report_row(const ReportRow& r) {
  std::string row = r.model + "," + split_name(r.split) + "," + (r.level ? format_double(*r.level, 9) : "") + "," +
                    format_double(r.auc, 17);
  for (double v : r.summary.mean) row += "," + format_double(v, 17);
  return row + "\n";
}

inline std::string report_header(const std::vector<double>& fractions) {
  std::string h = "model,split,shift_level,auc";
  for (double f : fractions) h += ",mean_at_" + format_double(f, 9);
  return h + "\n";
}

inline ReportRow read_report_row(const fs::path& stem, std::string model, Split split, std::optional<double> level) {
  ReportRow r{std::move(model), split, level, read_curve_summary(stem.string() + "_summary.csv"),
              read_curve_auc(stem.string() + "_auc.csv")};
  return r;
}

}  // namespace detail

struct ReportResult {
  std::vector<ReportRow> rows;        // one per (model, split, shift level)
  std::vector<ReportRow> references;  // Bayes curves per split
};

/// Aggregates curve summaries into one table per kind of curve, plus SVG plots.
inline ReportResult stage_report(const StageContext& ctx) {
  return detail::in_stage("report", [&] {
    const auto& iv = ctx.config.interventions;
    ReportResult out;
    for (const ModelSpec& s : ctx.selected()) {
      for (Split sp : iv.splits) {
        for (double level : iv.noise_levels) {
          out.rows.push_back(detail::read_report_row(ctx.paths.curve_stem(kind_name(s.kind), sp, level),
                                                     kind_name(s.kind), sp, level));
        }
      }
    }
    for (Split sp : iv.splits) {
      if (ctx.config.bayes.exact) {
        const auto stem = ctx.paths.bayes_stem("bayes_exact", sp);
        if (ctx.only_models.empty() || fs::exists(stem.string() + "_summary.csv")) {
          out.references.push_back(detail::read_report_row(stem, "bayes_exact", sp, std::nullopt));
        }
      }
      if (ctx.config.bayes.masked) {
        const auto stem = ctx.paths.bayes_stem("bayes_masked", sp);
        if (ctx.only_models.empty() || fs::exists(stem.string() + "_summary.csv")) {
          out.references.push_back(detail::read_report_row(stem, "bayes_masked", sp, std::nullopt));
        }
      }
    }
    std::string table = header_row(ctx.prov("report")) + detail::report_header(iv.fractions);
    for (const auto& r : out.rows) table += detail::report_row(r);
    write_file(ctx.paths.report_table(), table);
    std::string refs = header_row(ctx.prov("report")) + detail::report_header(iv.fractions);
    for (const auto& r : out.references) refs += detail::report_row(r);
    write_file(ctx.paths.bayes_table(), refs);

    if (ctx.plots) {
      for (Split sp : iv.splits) {
        for (double level : iv.noise_levels) {
          std::vector<PlotSeries> series;
          for (const auto& r : out.rows) {
            if (r.split == sp && r.level == level) series.push_back({r.model, r.summary.fractions, r.summary.mean});
          }
          for (const auto& r : out.references) {
            if (r.split == sp) series.push_back({r.model, r.summary.fractions, r.summary.mean});
          }
          const std::string title = std::string("task accuracy under interventions, ") + split_name(sp) +
                                    " split, noise " + format_double(level, 9);
          write_file(ctx.paths.plot(sp, level), line_plot_svg(title, "fraction of concepts intervened",
                                                               "task accuracy", series, ctx.prov("report")));
        }
      }
    }
    return out;
  });
}

struct RunResult {
  ConceptDataset data;
  std::vector<TrainedModel> trained;
  std::vector<CalibrationOutcome> calibration;
  std::vector<EvalRow> evaluation;
  CurveStageResult curves;
  ReportResult report;
};

inline RunResult run_experiment(const StageContext& ctx) {
  RunResult r;
  r.data = stage_gen_data(ctx);
  r.trained = stage_train(ctx);
  r.calibration = stage_calibrate(ctx);
  r.evaluation = stage_evaluate(ctx);
  r.curves = stage_curve(ctx);
  r.report = stage_report(ctx);
  return r;
}

}  // namespace cbmlab
