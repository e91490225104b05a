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

// Per-concept Platt scaling, P(c_i = 1 | z_i) = sigmoid(a_i z_i + b_i), fitted
// on validation data with every other weight frozen.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "cbmlab/dense_array.hpp"
#include "cbmlab/graph.hpp"
#include "cbmlab/models.hpp"

namespace cbmlab {

struct PlattParams {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> loss_history;  // mean BCE before each step, then after the last

  static PlattParams identity(std::size_t k) { return {std::vector<double>(k, 1.0), std::vector<double>(k, 0.0), {}}; }
};

inline double apply_platt(double z, double a, double b) { return detail::stable_sigmoid(a * z + b); }

/// Raw (uncalibrated) concept logits of a model over the given rows.
inline DenseArray concept_logits(const Model& model, const DenseArray& x) {
  ForwardOptions opts;
  opts.calibrated = false;
  return forward(model, x, opts).logits;
}

/// Full-batch gradient descent on the mean BCE over (a, b) only.
inline PlattParams fit_platt_logits(const DenseArray& logits, const DenseArray& labels, std::size_t epochs, double lr) {
  if (logits.rows() == 0 || labels.rows() != logits.rows() || labels.cols() != logits.cols()) {
    throw ValidationError("fit_platt: logits and labels must be non-empty and equally shaped");
  }
  const std::size_t k = logits.cols();
  PlattParams out = PlattParams::identity(k);
  if (epochs == 0) return out;

  ValueGraph g;
  NodeId a = g.parameter("platt_a", DenseArray(Shape{1, k}, 1.0));
  NodeId b = g.parameter("platt_b", DenseArray::matrix(1, k));
  NodeId z = g.constant(logits);
  NodeId c = g.constant(labels);
  DenseArray inv = labels;
  for (double& v : inv.data()) v = 1.0 - v;
  NodeId c_neg = g.constant(inv);
  NodeId s = g.add(g.mul(z, a), b);
  NodeId loss = g.neg(g.mean(g.add(g.mul(c, g.log_sigmoid(s)), g.mul(c_neg, g.log_sigmoid(g.neg(s))))));

  g.run({});
  for (std::size_t e = 0; e < epochs; ++e) {
    out.loss_history.push_back(g.value(loss)[0]);
    auto grads = g.gradients(loss);
    for (const char* name : {"platt_a", "platt_b"}) {
      DenseArray p = g.parameter_value(name);
      const DenseArray& gr = grads.at(name);
      for (std::size_t i = 0; i < k; ++i) p[i] -= lr * gr[i];
      g.set_parameter(name, std::move(p));
    }
    g.rerun();
  }
  out.loss_history.push_back(g.value(loss)[0]);
  out.a = g.parameter_value("platt_a").data();
  out.b = g.parameter_value("platt_b").data();
  return out;
}

/// Fits Platt parameters for a MixCEM on a validation split. The model is not modified.
inline PlattParams fit_platt(const Model& model, const DenseArray& val_x, const DenseArray& val_c,
                             std::size_t epochs, double lr = 0.01) {
  if (model.config.kind != ModelKind::kMixCem) throw ValidationError("fit_platt requires a mixcem model");
  if (val_x.rows() == 0 || val_x.empty()) throw ValidationError("fit_platt: empty validation split");
  return fit_platt_logits(concept_logits(model, val_x), val_c, epochs, lr);
}

/// Copy of the model carrying the given Platt parameters.
inline Model with_platt(Model model, const PlattParams& p) {
  const std::size_t k = model.config.k;
  if (p.a.size() != k || p.b.size() != k) throw ShapeError("with_platt: parameter length != k");
  model.param("platt_a") = DenseArray(Shape{1, k}, p.a);
  model.param("platt_b") = DenseArray(Shape{1, k}, p.b);
  return model;
}

/// Equal-width-bin expected calibration error of binary predictions.
inline double expected_calibration_error(std::span<const double> probs, std::span<const double> labels,
                                         std::size_t bins = 10) {
  if (probs.size() != labels.size()) throw ValidationError("ECE: probs and labels differ in length");
  if (bins < 1) throw ValidationError("ECE: bins must be >= 1");
  if (probs.empty()) return 0.0;
  std::vector<double> count(bins, 0.0), conf(bins, 0.0), acc(bins, 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("ECE: probability outside [0, 1]");
    auto bin = static_cast<std::size_t>(p * static_cast<double>(bins));
    bin = std::min(bin, bins - 1);
    count[bin] += 1.0;
    conf[bin] += p;
    acc[bin] += labels[i];
  }
  double ece = 0.0;
  const double n = static_cast<double>(probs.size());
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0.0) continue;
    ece += (count[b] / n) * std::abs(acc[b] / count[b] - conf[b] / count[b]);
  }
  return ece;
}

}  // namespace cbmlab
