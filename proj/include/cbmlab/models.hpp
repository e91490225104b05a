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

// Concept-based models: a jointly trained sigmoid CBM, a hybrid CBM with an
// extra unaligned bottleneck slice, a concept embedding model (CEM), and the
// mixture of concept embeddings model (MixCEM).
//
// MixCEM, per concept i and latent code h = psi(x):
//   r_i^{+/-}  = R_i^{+/-} h + b_i^{+/-}                 residual embeddings
//   z_i        = v_s . [cbar_i^+ + r_i^+, cbar_i^- + r_i^-]   (shared scorer)
//   p_i        = sigmoid(a_i z_i + b_i)  (Platt; identity unless calibrated)
//   c_i^{+/-}  = cbar_i^{+/-} + (1 - H(p_i)) d_i r_i^{+/-}     d_i ~ Bern(1 - p_drop)
//   chat_i     = q_i c_i^+ + (1 - q_i) c_i^-,  q_i = p_i or the intervened value
//   y          = softmax(W [chat_1 .. chat_k] + b), averaged over MC samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cbmlab/dense_array.hpp"
#include "cbmlab/graph.hpp"
#include "cbmlab/rng.hpp"

namespace cbmlab {

enum class ModelKind { kVanillaCbm, kHybridCbm, kCem, kMixCem };

inline std::string kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::kVanillaCbm: return "vanilla_cbm";
    case ModelKind::kHybridCbm: return "hybrid_cbm";
    case ModelKind::kCem: return "cem";
    case ModelKind::kMixCem: return "mixcem";
  }
  return "?";
}

inline ModelKind parse_kind(const std::string& s) {
  if (s == "vanilla_cbm" || s == "vanilla") return ModelKind::kVanillaCbm;
  if (s == "hybrid_cbm" || s == "hybrid") return ModelKind::kHybridCbm;
  if (s == "cem") return ModelKind::kCem;
  if (s == "mixcem") return ModelKind::kMixCem;
  throw ValidationError("unknown model kind '" + s + "'");
}

enum class EmbeddingActivation { kLeakyRelu, kLinear };

inline constexpr double kLeakySlope = 0.01;

struct ModelConfig {
  ModelKind kind = ModelKind::kMixCem;
  std::size_t input_width = 1;  // n
  std::size_t k = 1;
  std::size_t m = 16;           // embedding width; ignored by the sigmoid CBMs
  std::size_t L = 2;
  std::vector<std::size_t> backbone_widths = {64};
  std::size_t k_prime = 0;      // hybrid only
  EmbeddingActivation cem_activation = EmbeddingActivation::kLeakyRelu;
  std::uint64_t seed = 0;

  std::size_t latent_width() const {
    return backbone_widths.empty() ? input_width : backbone_widths.back();
  }
  bool embedding_model() const { return kind == ModelKind::kCem || kind == ModelKind::kMixCem; }
  std::size_t bottleneck_width() const {
    switch (kind) {
      case ModelKind::kVanillaCbm: return k;
      case ModelKind::kHybridCbm: return k + k_prime;
      default: return k * m;
    }
  }
};

inline void validate(const ModelConfig& c) {
  auto fail = [](const std::string& m) { throw ValidationError("ModelConfig: " + m); };
  if (c.input_width < 1) fail("input_width must be positive");
  if (c.k < 1) fail("k must be positive");
  if (c.m < 1) fail("m must be >= 1");
  if (c.L < 2) fail("L must be >= 2");
  for (std::size_t w : c.backbone_widths) {
    if (w < 1) fail("backbone widths must be positive");
  }
  if (c.k_prime > 0 && c.kind != ModelKind::kHybridCbm) fail("k_prime is only meaningful for hybrid_cbm");
}

using ParameterSet = std::map<std::string, DenseArray>;

struct Model {
  ModelConfig config;
  ParameterSet params;

  const DenseArray& param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("model has no parameter '" + name + "'");
    return it->second;
  }
  DenseArray& param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ValidationError("model has no parameter '" + name + "'");
    return it->second;
  }
  bool has_platt() const { return params.count("platt_a") > 0; }
};

inline std::size_t parameter_count(const Model& m) {
  std::size_t n = 0;
  for (const auto& [name, arr] : m.params) n += arr.size();
  return n;
}

/// Names of the Platt parameters; they are only ever fitted post-training.
inline bool is_platt_parameter(const std::string& name) { return name == "platt_a" || name == "platt_b"; }

/// Fresh parameters: weights ~ Normal(0, std = 1/sqrt(fan_in)), biases zero,
/// Platt at the identity (a = 1, b = 0). Deterministic given config.seed.
inline Model init_model(const ModelConfig& config) {
  validate(config);
  Model model{config, {}};
  Rng rng(derive_seed(config.seed, "init"));
  auto weight = [&](const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    DenseArray w = DenseArray::matrix(fan_in, fan_out);
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : w.data()) v = standard_normal(rng) * sd;
    model.params.emplace(name, std::move(w));
  };
  auto bias = [&](const std::string& name, std::size_t width) {
    model.params.emplace(name, DenseArray::matrix(1, width));
  };

  std::size_t width = config.input_width;
  for (std::size_t l = 0; l < config.backbone_widths.size(); ++l) {
    const std::string p = "psi." + std::to_string(l);
    weight(p + ".weight", width, config.backbone_widths[l]);
    bias(p + ".bias", config.backbone_widths[l]);
    width = config.backbone_widths[l];
  }
  const std::size_t a = width, k = config.k, m = config.m;

  switch (config.kind) {
    case ModelKind::kVanillaCbm:
    case ModelKind::kHybridCbm:
      weight("concept.weight", a, k);
      bias("concept.bias", k);
      if (config.k_prime > 0) {
        weight("extra.weight", a, config.k_prime);
        bias("extra.bias", config.k_prime);
      }
      break;
    case ModelKind::kCem:
      weight("gen_pos.weight", a, k * m);
      bias("gen_pos.bias", k * m);
      weight("gen_neg.weight", a, k * m);
      bias("gen_neg.bias", k * m);
      weight("scorer", 2 * m, 1);
      break;
    case ModelKind::kMixCem:
      weight("emb_pos", m, k);
      weight("emb_neg", m, k);
      weight("res_pos.weight", a, k * m);
      bias("res_pos.bias", k * m);
      weight("res_neg.weight", a, k * m);
      bias("res_neg.bias", k * m);
      weight("scorer", 2 * m, 1);
      model.params.emplace("platt_a", DenseArray(Shape{1, k}, 1.0));
      model.params.emplace("platt_b", DenseArray::matrix(1, k));
      break;
  }
  // The global embedding banks are drawn as m x k and laid out as 1 x (k*m)
  // rows so a concept's embedding is one contiguous column block.
  for (const char* name : {"emb_pos", "emb_neg"}) {
    auto it = model.params.find(name);
    if (it == model.params.end()) continue;
    DenseArray flat = DenseArray::matrix(1, k * m);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < m; ++j) flat(0, i * m + j) = it->second(j, i);
    }
    it->second = std::move(flat);
  }
  // scorer is stored as a 1 x 2m row: [v_pos | v_neg]
  if (auto it = model.params.find("scorer"); it != model.params.end()) {
    it->second = DenseArray(Shape{1, 2 * m}, it->second.data());
  }
  weight("head.weight", config.bottleneck_width(), config.L);
  bias("head.bias", config.L);
  return model;
}

/// Base-2 entropy of a Bernoulli(p), with 0 log 0 = 0.
inline double bernoulli_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("bernoulli_entropy: p outside [0, 1]");
  double h = 0.0;
  if (p > 0.0) h -= p * std::log2(p);
  if (p < 1.0) h -= (1.0 - p) * std::log2(1.0 - p);
  return h;
}

/// Concepts S (0-based) forced to the given 0/1 values. `values` has |S|
/// columns and either one row (shared by every input row) or one row per input.
struct InterventionMask {
  std::vector<std::size_t> concepts;
  DenseArray values;
};

struct ForwardOptions {
  std::optional<InterventionMask> intervention;
  double dropout_p = 0.0;
  std::size_t mc_samples = 1;
  std::uint64_t rng_seed = 0;
  bool calibrated = false;
  bool keep_samples = false;
  // Global index of the first input row; dropout draws are addressed by
  // (rng_seed, sample, row, concept) so results do not depend on batching.
  std::size_t row_offset = 0;
  // Replaces the entropy gate by 1 (MixCEM only). Used to relate MixCEM to CEM.
  bool force_unit_gate = false;
};

struct ForwardOutput {
  DenseArray logits;      // B x k concept logits (after Platt when calibrated)
  DenseArray p_hat;       // B x k
  DenseArray entropy;     // B x k, H(p_hat)
  DenseArray bottleneck;  // B x W, mean over MC samples
  DenseArray y_prob;      // B x L, mean of per-sample softmax outputs
  std::vector<DenseArray> per_sample_bottlenecks;  // M arrays of B x W when requested
};

// ---------------------------------------------------------------------------
// Graph construction shared by inference, training and calibration.

/// Per-batch constants controlling the mixing coefficients and residual dropout.
struct ConceptControls {
  std::optional<DenseArray> mix_mask;       // B x k, nonzero where q_i is overridden
  std::optional<DenseArray> mix_values;     // B x k override values
  std::optional<DenseArray> residual_keep;  // B x k, 0 drops the residual pair (MixCEM)
};

/// Emits a model's forward computation into a ValueGraph.
class ModelGraphBuilder {
 public:
  using TrainablePredicate = std::function<bool(const std::string&)>;

  ModelGraphBuilder(const Model& model, ValueGraph& graph, TrainablePredicate trainable)
      : model_(model), g_(graph) {
    for (const auto& [name, value] : model.params) {
      params_[name] = g_.parameter(name, value, trainable && trainable(name));
    }
  }

  ValueGraph& graph() { return g_; }
  const ModelConfig& config() const { return model_.config; }
  NodeId param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("model has no parameter '" + name + "'");
    return it->second;
  }

  NodeId backbone(NodeId x) {
    NodeId h = x;
    for (std::size_t l = 0; l < config().backbone_widths.size(); ++l) {
      const std::string p = "psi." + std::to_string(l);
      h = g_.leaky_relu(g_.add(g_.matmul(h, param(p + ".weight")), param(p + ".bias")), kLeakySlope);
    }
    return h;
  }

  /// Everything computed once per input batch, shared across MC samples.
  struct Scores {
    NodeId logits;   // B x k, after Platt when calibrated
    NodeId p_hat;    // B x k
    NodeId gate;     // B x k, 1 - H(p_hat) (MixCEM)
    std::vector<NodeId> pos;  // per concept B x m: residual (MixCEM) or embedding (CEM)
    std::vector<NodeId> neg;
    NodeId extra = 0;         // hybrid unaligned slice
    std::size_t rows = 0;
  };

  Scores scores(NodeId h, std::size_t rows, bool calibrated, bool force_unit_gate = false) {
    const ModelConfig& c = config();
    Scores s;
    s.rows = rows;
    switch (c.kind) {
      case ModelKind::kVanillaCbm:
      case ModelKind::kHybridCbm: {
        s.logits = g_.add(g_.matmul(h, param("concept.weight")), param("concept.bias"));
        s.p_hat = g_.sigmoid(s.logits);
        if (c.k_prime > 0) {
          s.extra = g_.leaky_relu(g_.add(g_.matmul(h, param("extra.weight")), param("extra.bias")),
                                  kLeakySlope);
        }
        return s;
      }
      case ModelKind::kCem: {
        NodeId gp = g_.add(g_.matmul(h, param("gen_pos.weight")), param("gen_pos.bias"));
        NodeId gn = g_.add(g_.matmul(h, param("gen_neg.weight")), param("gen_neg.bias"));
        if (c.cem_activation == EmbeddingActivation::kLeakyRelu) {
          gp = g_.leaky_relu(gp, kLeakySlope);
          gn = g_.leaky_relu(gn, kLeakySlope);
        }
        std::vector<NodeId> z;
        for (std::size_t i = 0; i < c.k; ++i) {
          s.pos.push_back(g_.slice(gp, i * c.m, (i + 1) * c.m));
          s.neg.push_back(g_.slice(gn, i * c.m, (i + 1) * c.m));
          z.push_back(score(s.pos[i], s.neg[i]));
        }
        s.logits = g_.concat(z);
        s.p_hat = g_.sigmoid(s.logits);
        return s;
      }
      case ModelKind::kMixCem: {
        NodeId rp = g_.add(g_.matmul(h, param("res_pos.weight")), param("res_pos.bias"));
        NodeId rn = g_.add(g_.matmul(h, param("res_neg.weight")), param("res_neg.bias"));
        std::vector<NodeId> z;
        for (std::size_t i = 0; i < c.k; ++i) {
          s.pos.push_back(g_.slice(rp, i * c.m, (i + 1) * c.m));
          s.neg.push_back(g_.slice(rn, i * c.m, (i + 1) * c.m));
          // The score sees the raw (ungated, never dropped) residuals.
          NodeId ep = g_.add(s.pos[i], global(true, i));
          NodeId en = g_.add(s.neg[i], global(false, i));
          z.push_back(score(ep, en));
        }
        NodeId raw = g_.concat(z);
        s.logits = calibrated ? g_.add(g_.mul(raw, param("platt_a")), param("platt_b")) : raw;
        s.p_hat = g_.sigmoid(s.logits);
        if (force_unit_gate) {
          s.gate = g_.constant(DenseArray::matrix(rows, c.k, 1.0));
        } else {
          // H in nats from the logit: softplus(z) - p z, with softplus(z) = -log sigmoid(-z).
          NodeId softplus = g_.neg(g_.log_sigmoid(g_.neg(s.logits)));
          NodeId h_nats = g_.add(softplus, g_.neg(g_.mul(s.p_hat, s.logits)));
          NodeId h_bits = g_.mul(h_nats, g_.constant(DenseArray(Shape{1, c.k}, 1.0 / std::numbers::ln2)));
          s.gate = g_.add(g_.constant(DenseArray::matrix(rows, c.k, 1.0)), g_.neg(h_bits));
        }
        return s;
      }
    }
    return s;
  }

  /// One bottleneck sample, B x W.
  NodeId bottleneck(const Scores& s, const ConceptControls& ctl) {
    const ModelConfig& c = config();
    NodeId q_all = s.p_hat;
    if (ctl.mix_mask) {
      q_all = g_.select(g_.constant(*ctl.mix_mask), g_.constant(*ctl.mix_values), s.p_hat);
    }
    switch (c.kind) {
      case ModelKind::kVanillaCbm:
        return q_all;
      case ModelKind::kHybridCbm:
        return c.k_prime > 0 ? g_.concat({q_all, s.extra}) : q_all;
      case ModelKind::kCem: {
        std::vector<NodeId> parts;
        for (std::size_t i = 0; i < c.k; ++i) {
          parts.push_back(mix(g_.slice(q_all, i, i + 1), s.pos[i], s.neg[i], s.rows));
        }
        return g_.concat(parts);
      }
      case ModelKind::kMixCem: {
        NodeId scale_all = s.gate;
        if (ctl.residual_keep) scale_all = g_.mul(s.gate, g_.constant(*ctl.residual_keep));
        std::vector<NodeId> parts;
        for (std::size_t i = 0; i < c.k; ++i) {
          NodeId scale = expand(g_.slice(scale_all, i, i + 1));
          NodeId cp = g_.add(g_.mul(scale, s.pos[i]), global(true, i));
          NodeId cn = g_.add(g_.mul(scale, s.neg[i]), global(false, i));
          parts.push_back(mix(g_.slice(q_all, i, i + 1), cp, cn, s.rows));
        }
        return g_.concat(parts);
      }
    }
    return q_all;
  }

  /// Global embeddings mixed by ground-truth concepts (MixCEM), B x (k*m).
  NodeId prior_bottleneck(NodeId concepts, std::size_t rows) {
    const ModelConfig& c = config();
    if (c.kind != ModelKind::kMixCem) throw ValidationError("prior_bottleneck requires a mixcem model");
    NodeId ones = g_.constant(DenseArray::matrix(rows, 1, 1.0));
    std::vector<NodeId> parts;
    for (std::size_t i = 0; i < c.k; ++i) {
      NodeId cp = g_.matmul(ones, global(true, i));
      NodeId cn = g_.matmul(ones, global(false, i));
      parts.push_back(mix(g_.slice(concepts, i, i + 1), cp, cn, rows));
    }
    return g_.concat(parts);
  }

  NodeId head(NodeId bottleneck) {
    return g_.add(g_.matmul(bottleneck, param("head.weight")), param("head.bias"));
  }

 private:
  NodeId global(bool positive, std::size_t i) {
    const std::size_t m = config().m;
    return g_.slice(param(positive ? "emb_pos" : "emb_neg"), i * m, (i + 1) * m);
  }

  NodeId score(NodeId pos, NodeId neg) { return g_.row_sum(g_.mul(g_.concat({pos, neg}), param("scorer"))); }

  // B x 1 -> B x m by an outer product with a ones row.
  NodeId expand(NodeId col) {
    auto& ones = ones_rows_;
    if (!ones) ones = g_.constant(DenseArray::matrix(1, config().m, 1.0));
    return g_.matmul(col, *ones);
  }

  NodeId mix(NodeId q, NodeId pos, NodeId neg, std::size_t rows) {
    NodeId one_minus_q = g_.add(g_.constant(DenseArray::matrix(rows, 1, 1.0)), g_.neg(q));
    return g_.add(g_.mul(expand(q), pos), g_.mul(expand(one_minus_q), neg));
  }

  const Model& model_;
  ValueGraph& g_;
  std::map<std::string, NodeId> params_;
  std::optional<NodeId> ones_rows_;
};

// ---------------------------------------------------------------------------
// Inference.

namespace detail {

inline constexpr std::size_t kForwardChunk = 256;

inline void check_intervention(const ModelConfig& c, const InterventionMask& mask, std::size_t rows) {
  std::set<std::size_t> seen;
  for (std::size_t i : mask.concepts) {
    if (i >= c.k) {
      if (c.kind == ModelKind::kHybridCbm && i < c.k + c.k_prime) {
        throw ValidationError("intervention on concept " + std::to_string(i) +
                              " targets the hybrid model's unaligned slice");
      }
      throw ValidationError("intervention index " + std::to_string(i) + " out of range (k = " +
                            std::to_string(c.k) + ")");
    }
    if (!seen.insert(i).second) throw ValidationError("intervention indices must be unique");
  }
  if (mask.concepts.empty()) return;
  if (mask.values.cols() != mask.concepts.size() || (mask.values.rows() != 1 && mask.values.rows() != rows)) {
    throw ShapeError("intervention values must be 1 x |S| or rows x |S|");
  }
  for (double v : mask.values.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError("intervention values must be binary");
  }
}

inline DenseArray keep_mask(std::uint64_t seed, std::size_t sample, std::size_t first_row, std::size_t rows,
                            std::size_t k, double dropout_p) {
  DenseArray keep = DenseArray::matrix(rows, k, 1.0);
  if (dropout_p <= 0.0) return keep;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      if (dropout_p >= 1.0 || counter_uniform(seed, sample, first_row + r, i) < dropout_p) keep(r, i) = 0.0;
    }
  }
  return keep;
}

inline ForwardOutput forward_chunk(const Model& model, const DenseArray& x, std::size_t begin, std::size_t end,
                                   const ForwardOptions& opts) {
  const ModelConfig& c = model.config;
  const std::size_t rows = end - begin;
  ValueGraph g;
  ModelGraphBuilder b(model, g, nullptr);
  NodeId xin = g.input("x");
  NodeId h = b.backbone(xin);
  const bool calibrated = opts.calibrated && c.kind == ModelKind::kMixCem;
  auto s = b.scores(h, rows, calibrated, opts.force_unit_gate);

  ConceptControls ctl;
  if (opts.intervention && !opts.intervention->concepts.empty()) {
    const auto& iv = *opts.intervention;
    DenseArray mask = DenseArray::matrix(rows, c.k);
    DenseArray vals = DenseArray::matrix(rows, c.k);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t src = iv.values.rows() == 1 ? 0 : begin + r;
      for (std::size_t t = 0; t < iv.concepts.size(); ++t) {
        mask(r, iv.concepts[t]) = 1.0;
        vals(r, iv.concepts[t]) = iv.values(src, t);
      }
    }
    ctl.mix_mask = std::move(mask);
    ctl.mix_values = std::move(vals);
  }

  const bool dropout = c.kind == ModelKind::kMixCem && opts.dropout_p > 0.0;
  // Every sample is identical at p = 0 or p = 1, so one is drawn.
  const bool stochastic = dropout && opts.dropout_p < 1.0;
  const std::size_t samples = stochastic ? opts.mc_samples : 1;
  std::vector<NodeId> bottlenecks, probs;
  for (std::size_t m = 0; m < samples; ++m) {
    ConceptControls sample_ctl = ctl;
    if (dropout) {
      sample_ctl.residual_keep = keep_mask(opts.rng_seed, m, opts.row_offset + begin, rows, c.k, opts.dropout_p);
    }
    NodeId bn = b.bottleneck(s, sample_ctl);
    bottlenecks.push_back(bn);
    probs.push_back(g.softmax(b.head(bn)));
  }
  g.run({{"x", take_rows(x, begin, end)}});

  ForwardOutput out;
  out.logits = g.value(s.logits);
  out.p_hat = g.value(s.p_hat);
  out.entropy = DenseArray(out.p_hat.shape());
  for (std::size_t i = 0; i < out.p_hat.size(); ++i) out.entropy[i] = bernoulli_entropy(out.p_hat[i]);
  if (samples == 1) {
    out.bottleneck = g.value(bottlenecks[0]);
    out.y_prob = g.value(probs[0]);
  } else {
    out.bottleneck = DenseArray(g.value(bottlenecks[0]).shape(), 0.0);
    out.y_prob = DenseArray(g.value(probs[0]).shape(), 0.0);
    for (std::size_t m = 0; m < samples; ++m) {
      const auto& bv = g.value(bottlenecks[m]);
      const auto& pv = g.value(probs[m]);
      for (std::size_t t = 0; t < bv.size(); ++t) out.bottleneck[t] += bv[t];
      for (std::size_t t = 0; t < pv.size(); ++t) out.y_prob[t] += pv[t];
    }
    const double inv = 1.0 / static_cast<double>(samples);
    for (double& v : out.bottleneck.data()) v *= inv;
    for (double& v : out.y_prob.data()) v *= inv;
  }
  if (opts.keep_samples) {
    for (std::size_t m = 0; m < opts.mc_samples; ++m) {
      out.per_sample_bottlenecks.push_back(g.value(bottlenecks[std::min(m, samples - 1)]));
    }
  }
  return out;
}

inline void append_rows(DenseArray& dst, const DenseArray& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  std::vector<double> data = std::move(dst.data());
  data.insert(data.end(), src.data().begin(), src.data().end());
  dst = DenseArray(Shape{dst.rows() + src.rows(), src.cols()}, std::move(data));
}

}  // namespace detail

/// Forward pass of any model kind over a batch of input rows.
inline ForwardOutput forward(const Model& model, const DenseArray& x, const ForwardOptions& opts = {}) {
  const ModelConfig& c = model.config;
  if (x.cols() != c.input_width) {
    throw ShapeError("input width " + std::to_string(x.cols()) + " does not match model input width " +
                     std::to_string(c.input_width));
  }
  if (opts.mc_samples < 1) throw ValidationError("mc_samples must be >= 1");
  if (!(opts.dropout_p >= 0.0 && opts.dropout_p <= 1.0)) throw ValidationError("dropout_p must lie in [0, 1]");
  if (opts.intervention) detail::check_intervention(c, *opts.intervention, x.rows());

  ForwardOutput out;
  for (std::size_t begin = 0; begin < x.rows(); begin += detail::kForwardChunk) {
    const std::size_t end = std::min(x.rows(), begin + detail::kForwardChunk);
    ForwardOutput part = detail::forward_chunk(model, x, begin, end, opts);
    detail::append_rows(out.logits, part.logits);
    detail::append_rows(out.p_hat, part.p_hat);
    detail::append_rows(out.entropy, part.entropy);
    detail::append_rows(out.bottleneck, part.bottleneck);
    detail::append_rows(out.y_prob, part.y_prob);
    if (out.per_sample_bottlenecks.empty()) {
      out.per_sample_bottlenecks = std::move(part.per_sample_bottlenecks);
    } else {
      for (std::size_t m = 0; m < part.per_sample_bottlenecks.size(); ++m) {
        detail::append_rows(out.per_sample_bottlenecks[m], part.per_sample_bottlenecks[m]);
      }
    }
  }
  return out;
}

inline ForwardOutput mixcem_forward(const Model& model, const DenseArray& x, const ForwardOptions& opts) {
  if (model.config.kind != ModelKind::kMixCem) throw ValidationError("mixcem_forward requires a mixcem model");
  return forward(model, x, opts);
}

inline ForwardOutput baseline_forward(const Model& model, const DenseArray& x, const ForwardOptions& opts) {
  if (model.config.kind == ModelKind::kMixCem) throw ValidationError("baseline_forward given a mixcem model");
  return forward(model, x, opts);
}

/// Global embeddings selected by binary concepts c (rows x k), rows x (k*m).
inline DenseArray prior_bottleneck(const Model& model, const DenseArray& c) {
  if (c.cols() != model.config.k) throw ShapeError("prior_bottleneck: concept width mismatch");
  for (double v : c.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError("prior_bottleneck: concepts must be binary");
  }
  ValueGraph g;
  ModelGraphBuilder b(model, g, nullptr);
  NodeId out = b.prior_bottleneck(g.input("c"), c.rows());
  g.run({{"c", c}});
  return g.value(out);
}

inline std::vector<std::size_t> argmax_rows(const DenseArray& probs) {
  std::vector<std::size_t> out(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    auto row = probs.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace cbmlab
