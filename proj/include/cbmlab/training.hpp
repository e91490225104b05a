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
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cbmlab/datagen.hpp"
#include "cbmlab/dense_array.hpp"
#include "cbmlab/graph.hpp"
#include "cbmlab/models.hpp"
#include "cbmlab/rng.hpp"

namespace cbmlab {

struct TrainConfig {
  double lambda_c = 1.0;
  double lambda_p = 1.0;
  double p_int = 0.25;
  double p_drop = 0.5;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 150;
  std::size_t patience = 5;
  std::size_t val_freq = 5;
  double lr_decay_factor = 0.1;
  std::size_t plateau_epochs = 10;
  bool class_weighted_bce = false;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& t) {
  auto fail = [](const std::string& m) { throw ValidationError("TrainConfig: " + m); };
  if (!(t.lambda_c >= 0)) fail("lambda_c must be >= 0");
  if (!(t.lambda_p >= 0)) fail("lambda_p must be >= 0");
  if (!(t.p_int >= 0 && t.p_int <= 1)) fail("p_int must lie in [0, 1]");
  if (!(t.p_drop >= 0 && t.p_drop <= 1)) fail("p_drop must lie in [0, 1]");
  if (!(t.lr > 0)) fail("lr must be positive");
  if (!(t.momentum >= 0 && t.momentum < 1)) fail("momentum must lie in [0, 1)");
  if (!(t.weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (t.batch_size < 1) fail("batch_size must be positive");
  if (t.val_freq < 1) fail("val_freq must be positive");
  if (!(t.lr_decay_factor > 0 && t.lr_decay_factor <= 1)) fail("lr_decay_factor must lie in (0, 1]");
  if (t.plateau_epochs < 1) fail("plateau_epochs must be positive");
}

class TrainingError : public Error {
 public:
  using Error::Error;
};

struct Batch {
  DenseArray x;
  DenseArray c;
  std::vector<std::size_t> y;
};

/// Stochastic choices for one loss evaluation, drawn up front so a loss graph
/// is a deterministic function of the parameters.
struct LossNoise {
  std::optional<DenseArray> randint_mask;   // B x k
  std::optional<DenseArray> residual_keep;  // B x k
};

struct LossTerms {
  double total = 0.0;
  double task = 0.0;
  double bce = 0.0;
  double prior = 0.0;
};

/// A built objective: graph plus the nodes of each term.
struct LossGraph {
  ValueGraph graph;
  NodeId total = 0;
  NodeId task = 0;
  NodeId bce = 0;
  NodeId prior = 0;
  NodeId task_logits = 0;
  bool has_prior = false;

  LossTerms terms() const {
    LossTerms t;
    t.total = graph.value(total)[0];
    t.task = graph.value(task)[0];
    t.bce = graph.value(bce)[0];
    t.prior = has_prior ? graph.value(prior)[0] : 0.0;
    return t;
  }
};

/// Positive-class weights n_neg / n_pos per concept over the training rows.
inline DenseArray concept_pos_weights(const DenseArray& c) {
  DenseArray w(Shape{1, c.cols()}, 1.0);
  for (std::size_t i = 0; i < c.cols(); ++i) {
    double pos = 0;
    for (std::size_t r = 0; r < c.rows(); ++r) pos += c(r, i);
    const double neg = static_cast<double>(c.rows()) - pos;
    if (pos > 0 && neg > 0) w(0, i) = neg / pos;
  }
  return w;
}

inline LossNoise draw_loss_noise(const ModelConfig& mc, const TrainConfig& cfg, std::size_t rows, Rng& rng) {
  LossNoise n;
  const bool embedding = mc.embedding_model();
  if (embedding && cfg.p_int > 0.0) {
    DenseArray m = DenseArray::matrix(rows, mc.k);
    for (double& v : m.data()) v = uniform01(rng) < cfg.p_int ? 1.0 : 0.0;
    n.randint_mask = std::move(m);
  }
  if (mc.kind == ModelKind::kMixCem && cfg.p_drop > 0.0) {
    DenseArray keep = DenseArray::matrix(rows, mc.k);
    for (double& v : keep.data()) v = uniform01(rng) < cfg.p_drop ? 0.0 : 1.0;
    n.residual_keep = std::move(keep);
  }
  return n;
}

namespace detail {

inline void check_batch(const Model& model, const Batch& b) {
  if (b.y.empty()) throw ValidationError("loss: empty batch");
  if (b.x.rows() != b.y.size() || b.c.rows() != b.y.size()) throw ShapeError("loss: batch row counts differ");
  if (b.c.cols() != model.config.k) throw ShapeError("loss: concept width does not match model k");
  for (double v : b.c.data()) {
    if (v != 0.0 && v != 1.0) throw ValidationError("loss: concept labels must be binary");
  }
  for (std::size_t y : b.y) {
    if (y >= model.config.L) throw ValidationError("loss: label out of range");
  }
}

inline DenseArray one_hot(const std::vector<std::size_t>& y, std::size_t L) {
  DenseArray oh = DenseArray::matrix(y.size(), L);
  for (std::size_t r = 0; r < y.size(); ++r) oh(r, y[r]) = 1.0;
  return oh;
}

// Mean categorical cross-entropy of softmax(logits) against one-hot targets.
inline NodeId cross_entropy(ValueGraph& g, NodeId logits, NodeId onehot) {
  return g.neg(g.mean(g.row_sum(g.mul(onehot, g.log_softmax(logits)))));
}

}  // namespace detail

/// Builds the training objective of any model kind:
///   mixcem:  CE(y, f(g(x))) + lambda_c BCE(c, p) + lambda_p CE(y, f(cbar(c)))
///   cem:     the same with lambda_p = 0, no gate and no residual dropout
///   vanilla/hybrid: CE + lambda_c BCE on the aligned slice.
/// RandInt and residual dropout come from `noise`; Platt parameters are never trainable here.
inline LossGraph build_loss(const Model& model, const Batch& batch, const TrainConfig& cfg,
                            const LossNoise& noise, const std::optional<DenseArray>& pos_weights = std::nullopt) {
  detail::check_batch(model, batch);
  const ModelConfig& mc = model.config;
  const std::size_t rows = batch.y.size();
  LossGraph lg;
  ValueGraph& g = lg.graph;
  ModelGraphBuilder b(model, g, [](const std::string& n) { return !is_platt_parameter(n); });

  NodeId x = g.input("x");
  NodeId c = g.constant(batch.c);
  NodeId onehot = g.constant(detail::one_hot(batch.y, mc.L));

  NodeId h = b.backbone(x);
  auto s = b.scores(h, rows, /*calibrated=*/false);

  ConceptControls ctl;
  if (mc.embedding_model() && noise.randint_mask) {
    ctl.mix_mask = noise.randint_mask;
    ctl.mix_values = batch.c;
  }
  if (mc.kind == ModelKind::kMixCem && noise.residual_keep) ctl.residual_keep = noise.residual_keep;
  lg.task_logits = g.name(b.head(b.bottleneck(s, ctl)), "task_logits");
  lg.task = g.name(detail::cross_entropy(g, lg.task_logits, onehot), "task");

  // BCE from logits: -(w c log s(z) + (1 - c) log s(-z)), averaged over rows and concepts.
  NodeId log_p = g.log_sigmoid(s.logits);
  NodeId log_q = g.log_sigmoid(g.neg(s.logits));
  if (pos_weights) log_p = g.mul(log_p, g.constant(*pos_weights));
  NodeId c_neg = g.constant([&] {
    DenseArray inv = batch.c;
    for (double& v : inv.data()) v = 1.0 - v;
    return inv;
  }());
  lg.bce = g.name(g.neg(g.mean(g.add(g.mul(c, log_p), g.mul(c_neg, log_q)))), "bce");

  NodeId total = g.add(lg.task, g.mul(lg.bce, g.constant(DenseArray::scalar(cfg.lambda_c))));
  if (mc.kind == ModelKind::kMixCem) {
    lg.has_prior = true;
    NodeId prior_logits = b.head(b.prior_bottleneck(c, rows));
    lg.prior = g.name(detail::cross_entropy(g, prior_logits, onehot), "prior");
    total = g.add(total, g.mul(lg.prior, g.constant(DenseArray::scalar(cfg.lambda_p))));
  }
  lg.total = g.name(total, "total");
  g.run({{"x", batch.x}});
  return lg;
}

/// MixCEM objective with noise drawn from `rng`.
inline LossGraph mixcem_loss(const Model& model, const Batch& batch, const TrainConfig& cfg, Rng& rng) {
  if (model.config.kind != ModelKind::kMixCem) throw ValidationError("mixcem_loss requires a mixcem model");
  return build_loss(model, batch, cfg, draw_loss_noise(model.config, cfg, batch.y.size(), rng));
}

/// Baseline objectives. CEM draws RandInt from `rng`; the sigmoid CBMs are deterministic.
inline LossGraph baseline_loss(const Model& model, const Batch& batch, const TrainConfig& cfg, Rng& rng) {
  if (model.config.kind == ModelKind::kMixCem) throw ValidationError("baseline_loss given a mixcem model");
  return build_loss(model, batch, cfg, draw_loss_noise(model.config, cfg, batch.y.size(), rng));
}

/// SGD with momentum and L2 weight decay: v = mu v + (g + wd p); p -= lr v.
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParameterSet& params, const std::map<std::string, DenseArray>& grads, double lr) {
    for (const auto& [name, grad] : grads) {
      DenseArray& p = params.at(name);
      auto [it, fresh] = velocity_.try_emplace(name, DenseArray(p.shape(), 0.0));
      DenseArray& v = it->second;
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = momentum_ * v[i] + grad[i] + weight_decay_ * p[i];
        p[i] -= lr * v[i];
      }
    }
  }

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, DenseArray> velocity_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossTerms train;
  std::optional<double> val_loss;
  std::optional<double> val_acc;
};

struct LrEvent {
  std::size_t epoch = 0;
  double old_lr = 0.0;
  double new_lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<LrEvent> lr_events;
  std::size_t stop_epoch = 0;
  std::string stop_reason = "none";
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

inline Batch batch_rows(const SplitView& v, std::span<const std::size_t> idx) {
  Batch b;
  b.x = gather_rows(v.x, idx);
  b.c = gather_rows(v.c, idx);
  for (std::size_t i : idx) b.y.push_back(v.y[i]);
  return b;
}

/// Objective and accuracy of the task head over a whole split, with noise drawn
/// from a fixed seed so repeated checkpoints are comparable.
inline std::pair<double, double> validation_loss(const Model& model, const SplitView& val, const TrainConfig& cfg,
                                                 std::uint64_t seed,
                                                 const std::optional<DenseArray>& pos_weights = std::nullopt) {
  Rng rng(seed);
  double loss = 0.0;
  std::size_t correct = 0;
  const std::size_t chunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < val.y.size(); begin += chunk) {
    const std::size_t end = std::min(val.y.size(), begin + chunk);
    idx.clear();
    for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
    Batch b = batch_rows(val, idx);
    auto lg = build_loss(model, b, cfg, draw_loss_noise(model.config, cfg, idx.size(), rng), pos_weights);
    loss += lg.terms().total * static_cast<double>(idx.size());
    auto pred = argmax_rows(lg.graph.value(lg.task_logits));
    for (std::size_t r = 0; r < idx.size(); ++r) correct += pred[r] == b.y[r] ? 1 : 0;
  }
  const double n = static_cast<double>(val.y.size());
  return {loss / n, static_cast<double>(correct) / n};
}

struct TrainResult {
  Model model;
  TrainHistory history;
};

/// Minibatch SGD with momentum; learning rate decays on train-loss plateaus and
/// training stops once validation loss has not improved for
/// patience * val_freq epochs. Returns the best-validation parameters.
inline TrainResult train(const Model& initial, const ConceptDataset& data, const TrainConfig& cfg) {
  validate(cfg);
  TrainResult result{initial, {}};
  if (cfg.max_epochs == 0) return result;

  const SplitView tr = select_split(data, Split::kTrain);
  const SplitView val = select_split(data, Split::kVal);
  if (tr.x.cols() != initial.config.input_width) throw ShapeError("train: dataset width does not match model");
  std::optional<DenseArray> pos_weights;
  if (cfg.class_weighted_bce) pos_weights = concept_pos_weights(tr.c);

  Model model = initial;
  Model best = initial;
  TrainHistory& hist = result.history;
  SgdMomentum opt(cfg.momentum, cfg.weight_decay);
  double lr = cfg.lr;
  double best_train = std::numeric_limits<double>::infinity();
  std::size_t since_train_improve = 0;
  std::size_t since_val_improve = 0;
  const std::uint64_t val_seed = derive_seed(cfg.seed, "validation");
  bool validated = false;

  std::vector<std::size_t> order(tr.y.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(derive_seed(derive_seed(cfg.seed, "epoch"), epoch));
    auto perm = permutation(rng, order.size());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    std::size_t seen = 0;
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < perm.size(); begin += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(perm.size(), begin + cfg.batch_size);
      std::span<const std::size_t> idx(perm.data() + begin, end - begin);
      Batch b = batch_rows(tr, idx);
      std::optional<LossGraph> lg;
      try {
        lg.emplace(build_loss(model, b, cfg, draw_loss_noise(model.config, cfg, idx.size(), rng), pos_weights));
      } catch (const NumericError& e) {
        hist.stop_epoch = epoch;
        hist.stop_reason = "non_finite";
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index) + ": " + e.what());
      }
      const LossTerms t = lg->terms();
      const double w = static_cast<double>(idx.size());
      rec.train.total += t.total * w;
      rec.train.task += t.task * w;
      rec.train.bce += t.bce * w;
      rec.train.prior += t.prior * w;
      seen += idx.size();
      auto grads = lg->graph.gradients(lg->total);
      opt.step(model.params, grads, lr);
    }
    const double inv = 1.0 / static_cast<double>(seen);
    rec.train.total *= inv;
    rec.train.task *= inv;
    rec.train.bce *= inv;
    rec.train.prior *= inv;

    if (rec.train.total < best_train * (1.0 - 1e-4)) {
      best_train = rec.train.total;
      since_train_improve = 0;
    } else if (++since_train_improve >= cfg.plateau_epochs) {
      hist.lr_events.push_back({epoch, lr, lr * cfg.lr_decay_factor});
      lr *= cfg.lr_decay_factor;
      since_train_improve = 0;
    }

    const bool last = epoch == cfg.max_epochs;
    bool stop = false;
    if (epoch % cfg.val_freq == 0 || (last && !validated)) {
      auto [vl, va] = validation_loss(model, val, cfg, val_seed, pos_weights);
      rec.val_loss = vl;
      rec.val_acc = va;
      validated = true;
      if (vl < hist.best_val_loss) {
        hist.best_val_loss = vl;
        hist.best_epoch = epoch;
        best = model;
        since_val_improve = 0;
      } else {
        since_val_improve += cfg.val_freq;
        if (since_val_improve >= cfg.patience * cfg.val_freq) stop = true;
      }
    }
    hist.epochs.push_back(rec);
    if (stop) {
      hist.stop_epoch = epoch;
      hist.stop_reason = "early_stop";
      break;
    }
    if (last) {
      hist.stop_epoch = epoch;
      hist.stop_reason = "max_epochs";
    }
  }
  result.model = std::move(best);
  return result;
}

}  // namespace cbmlab
