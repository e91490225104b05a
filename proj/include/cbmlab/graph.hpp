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

// A small define-then-run computation graph over DenseArray values with
// reverse-mode differentiation. Nodes are appended in topological order; a
// graph is built once per batch, evaluated, and optionally differentiated
// with respect to its trainable parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cbmlab/dense_array.hpp"

namespace cbmlab {

using NodeId = std::size_t;
using Bindings = std::map<std::string, DenseArray>;

enum class OpKind {
  kInput,
  kParameter,
  kConstant,
  kMatMul,
  kAdd,
  kMul,
  kNeg,
  kExp,
  kLog,
  kSigmoid,
  kLogSigmoid,
  kLeakyRelu,
  kSoftmax,
  kLogSoftmax,
  kConcat,
  kRowSum,
  kMean,
  kSlice,
  kStopGradient,
  kSelect,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kInput: return "input";
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kNeg: return "neg";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLogSigmoid: return "log_sigmoid";
    case OpKind::kLeakyRelu: return "leaky_relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kConcat: return "concat";
    case OpKind::kRowSum: return "row_sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSlice: return "slice";
    case OpKind::kStopGradient: return "stop_gradient";
    case OpKind::kSelect: return "select";
  }
  return "?";
}

namespace detail {

inline double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

// log(sigmoid(z)) = -softplus(-z)
inline double stable_log_sigmoid(double z) {
  if (z >= 0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

}  // namespace detail

class ValueGraph {
 public:
  // --- leaves ---------------------------------------------------------

  /// Leaf whose value is supplied through bindings at evaluation time.
  NodeId input(const std::string& name) {
    NodeId id = push(OpKind::kInput, {});
    nodes_[id].label = name;
    return id;
  }

  NodeId parameter(const std::string& name, DenseArray value, bool trainable = true) {
    if (param_index_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
    NodeId id = push(OpKind::kParameter, {});
    nodes_[id].label = name;
    nodes_[id].trainable = trainable;
    nodes_[id].value = std::move(value);
    param_index_[name] = id;
    return id;
  }

  NodeId constant(DenseArray value) {
    NodeId id = push(OpKind::kConstant, {});
    nodes_[id].value = std::move(value);
    return id;
  }

  // --- primitives -----------------------------------------------------

  NodeId matmul(NodeId a, NodeId b) { return push(OpKind::kMatMul, {a, b}); }
  /// Elementwise sum; either operand may be a single row broadcast over the other's rows.
  NodeId add(NodeId a, NodeId b) { return push(OpKind::kAdd, {a, b}); }
  /// Elementwise product with the same leading-axis broadcast as add.
  NodeId mul(NodeId a, NodeId b) { return push(OpKind::kMul, {a, b}); }
  NodeId neg(NodeId a) { return push(OpKind::kNeg, {a}); }
  NodeId exp(NodeId a) { return push(OpKind::kExp, {a}); }
  NodeId log(NodeId a) { return push(OpKind::kLog, {a}); }
  NodeId sigmoid(NodeId a) { return push(OpKind::kSigmoid, {a}); }
  NodeId log_sigmoid(NodeId a) { return push(OpKind::kLogSigmoid, {a}); }
  NodeId leaky_relu(NodeId a, double slope = 0.01) {
    NodeId id = push(OpKind::kLeakyRelu, {a});
    nodes_[id].alpha = slope;
    return id;
  }
  NodeId softmax(NodeId a) { return push(OpKind::kSoftmax, {a}); }
  NodeId log_softmax(NodeId a) { return push(OpKind::kLogSoftmax, {a}); }
  NodeId concat(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ValidationError("concat of zero operands");
    return push(OpKind::kConcat, parts);
  }
  NodeId row_sum(NodeId a) { return push(OpKind::kRowSum, {a}); }
  NodeId mean(NodeId a) { return push(OpKind::kMean, {a}); }
  /// Columns [begin, end) of a.
  NodeId slice(NodeId a, std::size_t begin, std::size_t end) {
    if (end <= begin) throw ValidationError("slice: empty column range");
    NodeId id = push(OpKind::kSlice, {a});
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    return id;
  }
  NodeId stop_gradient(NodeId a) { return push(OpKind::kStopGradient, {a}); }
  /// mask ? on_true : on_false elementwise. The mask carries no gradient.
  NodeId select(NodeId mask, NodeId on_true, NodeId on_false) {
    return push(OpKind::kSelect, {mask, on_true, on_false});
  }

  // --- naming ---------------------------------------------------------

  /// Gives a node a result name, reported by evaluate() and in errors.
  NodeId name(NodeId id, const std::string& label) {
    check_id(id);
    nodes_[id].label = label;
    outputs_[label] = id;
    return id;
  }

  std::string label(NodeId id) const {
    check_id(id);
    const Node& n = nodes_[id];
    if (!n.label.empty()) return n.label;
    return std::string(op_name(n.op)) + "#" + std::to_string(id);
  }

  std::size_t size() const { return nodes_.size(); }
  OpKind op(NodeId id) const { return nodes_.at(id).op; }

  // --- parameters -----------------------------------------------------

  bool has_parameter(const std::string& name) const { return param_index_.count(name) > 0; }

  const DenseArray& parameter_value(const std::string& name) const {
    return nodes_[param_id(name)].value;
  }

  void set_parameter(const std::string& name, DenseArray value) {
    Node& n = nodes_[param_id(name)];
    if (n.value.shape() != value.shape()) {
      throw ShapeError("set_parameter '" + name + "': shape " + shape_string(value.shape()) +
                       " differs from " + shape_string(n.value.shape()));
    }
    n.value = std::move(value);
    evaluated_ = false;
  }

  /// Names of trainable parameters, in insertion order.
  std::vector<std::string> trainable_parameters() const {
    std::vector<std::string> out;
    for (const Node& n : nodes_) {
      if (n.op == OpKind::kParameter && n.trainable) out.push_back(n.label);
    }
    return out;
  }

  // --- evaluation -----------------------------------------------------

  /// Computes every node. Throws ShapeError / NumericError naming the node.
  void run(const Bindings& bindings) {
    bindings_ = bindings;
    rerun();
  }

  /// Re-evaluates with the bindings of the last run().
  void rerun() {
    evaluated_ = false;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      forward(id);
      if (!nodes_[id].value.all_finite()) {
        throw NumericError("node '" + label(id) + "': non-finite value");
      }
    }
    evaluated_ = true;
  }

  bool evaluated() const { return evaluated_; }

  const DenseArray& value(NodeId id) const {
    check_id(id);
    if (!evaluated_ && nodes_[id].op != OpKind::kParameter && nodes_[id].op != OpKind::kConstant) {
      throw ValidationError("graph has not been evaluated");
    }
    return nodes_[id].value;
  }

  /// Values of all named nodes.
  std::map<std::string, DenseArray> named_values() const {
    std::map<std::string, DenseArray> out;
    for (const auto& [k, id] : outputs_) out.emplace(k, value(id));
    return out;
  }

  /// Gradient of a scalar node with respect to each trainable parameter.
  std::map<std::string, DenseArray> gradients(NodeId loss) {
    check_id(loss);
    if (!evaluated_) throw ValidationError("backward: graph has not been evaluated");
    if (nodes_[loss].value.size() != 1) {
      throw ShapeError("backward: loss node '" + label(loss) + "' is not scalar (shape " +
                       shape_string(nodes_[loss].value.shape()) + ")");
    }
    std::vector<bool> live = grad_reachable();
    std::vector<std::optional<DenseArray>> grads(nodes_.size());
    grads[loss] = DenseArray(nodes_[loss].value.shape(), 1.0);
    for (NodeId id = loss + 1; id-- > 0;) {
      if (!grads[id] || !live[id]) continue;
      propagate(id, *grads[id], grads, live);
    }
    std::map<std::string, DenseArray> out;
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (n.op != OpKind::kParameter || !n.trainable) continue;
      out.emplace(n.label, grads[id] ? std::move(*grads[id]) : DenseArray(n.value.shape(), 0.0));
    }
    return out;
  }

 private:
  struct Node {
    OpKind op;
    std::vector<NodeId> inputs;
    std::string label;
    DenseArray value;
    bool trainable = false;
    double alpha = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
  };

  NodeId push(OpKind op, std::vector<NodeId> inputs) {
    for (NodeId in : inputs) check_id(in);
    nodes_.push_back(Node{op, std::move(inputs), {}, {}, false, 0.0, 0, 0});
    evaluated_ = false;
    return nodes_.size() - 1;
  }

  void check_id(NodeId id) const {
    if (id >= nodes_.size()) throw ValidationError("unknown node id " + std::to_string(id));
  }

  NodeId param_id(const std::string& name) const {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }

  [[noreturn]] void shape_fail(NodeId id, const std::string& what) const {
    throw ShapeError("node '" + label(id) + "': " + what);
  }

  const DenseArray& in(NodeId id, std::size_t i) const { return nodes_[nodes_[id].inputs[i]].value; }

  // Broadcast rule shared by add/mul: equal shapes, or one side is 1 x C.
  enum class Bcast { kNone, kLeft, kRight };
  Bcast broadcast_kind(NodeId id, const DenseArray& a, const DenseArray& b) const {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::kNone;
    if (a.cols() == b.cols() && a.rows() == 1) return Bcast::kLeft;
    if (a.cols() == b.cols() && b.rows() == 1) return Bcast::kRight;
    shape_fail(id, "operand shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                       " do not broadcast");
  }

  void forward(NodeId id) {
    Node& n = nodes_[id];
    switch (n.op) {
      case OpKind::kInput: {
        auto it = bindings_.find(n.label);
        if (it == bindings_.end()) throw ValidationError("input '" + n.label + "' is not bound");
        n.value = it->second;
        return;
      }
      case OpKind::kParameter:
      case OpKind::kConstant:
        return;
      case OpKind::kMatMul: {
        const DenseArray& a = in(id, 0);
        const DenseArray& b = in(id, 1);
        if (a.cols() != b.rows()) {
          shape_fail(id, "matmul " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
        }
        const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
        DenseArray out = DenseArray::matrix(r, c);
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* po = out.data().data();
        for (std::size_t i = 0; i < r; ++i) {
          double* orow = po + i * c;
          for (std::size_t t = 0; t < k; ++t) {
            const double av = pa[i * k + t];
            const double* brow = pb + t * c;
            for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
          }
        }
        n.value = std::move(out);
        return;
      }
      case OpKind::kAdd:
      case OpKind::kMul: {
        const DenseArray& a = in(id, 0);
        const DenseArray& b = in(id, 1);
        Bcast bc = broadcast_kind(id, a, b);
        const std::size_t r = std::max(a.rows(), b.rows()), c = a.cols();
        DenseArray out = DenseArray::matrix(r, c);
        const bool is_add = n.op == OpKind::kAdd;
        double* po = out.data().data();
        for (std::size_t i = 0; i < r; ++i) {
          const double* ra = a.data().data() + (bc == Bcast::kLeft ? 0 : i) * c;
          const double* rb = b.data().data() + (bc == Bcast::kRight ? 0 : i) * c;
          double* ro = po + i * c;
          if (is_add) {
            for (std::size_t j = 0; j < c; ++j) ro[j] = ra[j] + rb[j];
          } else {
            for (std::size_t j = 0; j < c; ++j) ro[j] = ra[j] * rb[j];
          }
        }
        n.value = std::move(out);
        return;
      }
      case OpKind::kNeg: unary(id, [](double v) { return -v; }); return;
      case OpKind::kExp: unary(id, [](double v) { return std::exp(v); }); return;
      case OpKind::kLog: unary(id, [](double v) { return std::log(v); }); return;
      case OpKind::kSigmoid: unary(id, detail::stable_sigmoid); return;
      case OpKind::kLogSigmoid: unary(id, detail::stable_log_sigmoid); return;
      case OpKind::kLeakyRelu: {
        const double s = n.alpha;
        unary(id, [s](double v) { return v > 0 ? v : s * v; });
        return;
      }
      case OpKind::kSoftmax:
      case OpKind::kLogSoftmax: {
        const DenseArray& a = in(id, 0);
        DenseArray out = DenseArray::matrix(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          auto src = a.row(i);
          double mx = *std::max_element(src.begin(), src.end());
          double z = 0.0;
          for (double v : src) z += std::exp(v - mx);
          const double logz = std::log(z) + mx;
          for (std::size_t j = 0; j < a.cols(); ++j) {
            out(i, j) = n.op == OpKind::kSoftmax ? std::exp(src[j] - logz) : src[j] - logz;
          }
        }
        n.value = std::move(out);
        return;
      }
      case OpKind::kConcat: {
        const std::size_t r = in(id, 0).rows();
        std::size_t c = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          if (in(id, p).rows() != r) shape_fail(id, "concat operands differ in row count");
          c += in(id, p).cols();
        }
        DenseArray out = DenseArray::matrix(r, c);
        for (std::size_t i = 0; i < r; ++i) {
          std::size_t off = 0;
          for (std::size_t p = 0; p < n.inputs.size(); ++p) {
            auto src = in(id, p).row(i);
            std::copy(src.begin(), src.end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(off));
            off += src.size();
          }
        }
        n.value = std::move(out);
        return;
      }
      case OpKind::kRowSum: {
        const DenseArray& a = in(id, 0);
        DenseArray out = DenseArray::matrix(a.rows(), 1);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          double s = 0.0;
          for (double v : a.row(i)) s += v;
          out(i, 0) = s;
        }
        n.value = std::move(out);
        return;
      }
      case OpKind::kMean: {
        const DenseArray& a = in(id, 0);
        double s = 0.0;
        for (double v : a.data()) s += v;
        n.value = DenseArray::scalar(s / static_cast<double>(a.size()));
        return;
      }
      case OpKind::kSlice: {
        const DenseArray& a = in(id, 0);
        if (n.end > a.cols()) {
          shape_fail(id, "slice [" + std::to_string(n.begin) + "," + std::to_string(n.end) +
                             ") out of range for " + shape_string(a.shape()));
        }
        DenseArray out = DenseArray::matrix(a.rows(), n.end - n.begin);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = n.begin; j < n.end; ++j) out(i, j - n.begin) = a(i, j);
        }
        n.value = std::move(out);
        return;
      }
      case OpKind::kStopGradient:
        n.value = in(id, 0);
        return;
      case OpKind::kSelect: {
        const DenseArray& m = in(id, 0);
        const DenseArray& a = in(id, 1);
        const DenseArray& b = in(id, 2);
        if (m.shape() != a.shape() || a.shape() != b.shape()) {
          shape_fail(id, "select operands must share one shape");
        }
        DenseArray out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = m[i] != 0.0 ? a[i] : b[i];
        n.value = std::move(out);
        return;
      }
    }
  }

  template <class F>
  void unary(NodeId id, F f) {
    const DenseArray& a = in(id, 0);
    DenseArray out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    nodes_[id].value = std::move(out);
  }

  std::vector<bool> grad_reachable() const {
    std::vector<bool> live(nodes_.size(), false);
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      switch (n.op) {
        case OpKind::kParameter: live[id] = n.trainable; break;
        case OpKind::kInput:
        case OpKind::kConstant:
        case OpKind::kStopGradient: live[id] = false; break;
        case OpKind::kSelect: live[id] = live[n.inputs[1]] || live[n.inputs[2]]; break;
        default:
          for (NodeId p : n.inputs) live[id] = live[id] || live[p];
      }
    }
    return live;
  }

  static void accumulate(std::optional<DenseArray>& slot, DenseArray g) {
    if (!slot) {
      slot = std::move(g);
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
  }

  // Reduces a gradient of the broadcast result to the shape of a 1 x C operand.
  static DenseArray reduce_rows(const DenseArray& g) {
    DenseArray out = DenseArray::matrix(1, g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) out(0, j) += g(i, j);
    }
    return out;
  }

  static DenseArray reshape_like(DenseArray g, const DenseArray& like) {
    if (g.shape() == like.shape()) return g;
    return DenseArray(like.shape(), std::move(g.data()));
  }

  void propagate(NodeId id, const DenseArray& g, std::vector<std::optional<DenseArray>>& grads,
                 const std::vector<bool>& live) {
    const Node& n = nodes_[id];
    auto want = [&](std::size_t i) { return live[n.inputs[i]]; };
    auto send = [&](std::size_t i, DenseArray d) {
      accumulate(grads[n.inputs[i]], reshape_like(std::move(d), in(id, i)));
    };
    const DenseArray& out = n.value;
    switch (n.op) {
      case OpKind::kInput:
      case OpKind::kParameter:
      case OpKind::kConstant:
      case OpKind::kStopGradient:
        return;
      case OpKind::kMatMul: {
        const DenseArray& a = in(id, 0);
        const DenseArray& b = in(id, 1);
        const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
        if (want(0)) {
          // da = g b^T, accumulated row by row against a transposed copy of b.
          std::vector<double> bt(c * k);
          for (std::size_t t = 0; t < k; ++t) {
            for (std::size_t j = 0; j < c; ++j) bt[j * k + t] = b(t, j);
          }
          DenseArray da = DenseArray::matrix(r, k);
          const double* pg = g.data().data();
          double* pd = da.data().data();
          for (std::size_t i = 0; i < r; ++i) {
            double* drow = pd + i * k;
            for (std::size_t j = 0; j < c; ++j) {
              const double gv = pg[i * c + j];
              if (gv == 0.0) continue;
              const double* brow = bt.data() + j * k;
              for (std::size_t t = 0; t < k; ++t) drow[t] += gv * brow[t];
            }
          }
          send(0, std::move(da));
        }
        if (want(1)) {
          DenseArray db = DenseArray::matrix(k, c);
          const double* pa = a.data().data();
          const double* pg = g.data().data();
          double* pd = db.data().data();
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t t = 0; t < k; ++t) {
              const double av = pa[i * k + t];
              if (av == 0.0) continue;
              double* drow = pd + t * c;
              const double* grow = pg + i * c;
              for (std::size_t j = 0; j < c; ++j) drow[j] += av * grow[j];
            }
          }
          send(1, std::move(db));
        }
        return;
      }
      case OpKind::kAdd:
      case OpKind::kMul: {
        const DenseArray& a = in(id, 0);
        const DenseArray& b = in(id, 1);
        Bcast bc = broadcast_kind(id, a, b);
        const bool is_add = n.op == OpKind::kAdd;
        for (std::size_t side = 0; side < 2; ++side) {
          if (!want(side)) continue;
          const DenseArray& other = side == 0 ? b : a;
          const bool other_bcast = (side == 0 && bc == Bcast::kRight) || (side == 1 && bc == Bcast::kLeft);
          DenseArray d = is_add ? g : DenseArray::matrix(g.rows(), g.cols());
          if (!is_add) {
            const std::size_t c = g.cols();
            for (std::size_t i = 0; i < g.rows(); ++i) {
              const double* rg = g.data().data() + i * c;
              const double* ro = other.data().data() + (other_bcast ? 0 : i) * c;
              double* rd = d.data().data() + i * c;
              for (std::size_t j = 0; j < c; ++j) rd[j] = rg[j] * ro[j];
            }
          }
          const bool self_bcast = (side == 0 && bc == Bcast::kLeft) || (side == 1 && bc == Bcast::kRight);
          send(side, self_bcast ? reduce_rows(d) : std::move(d));
        }
        return;
      }
      case OpKind::kNeg:
        send(0, map2(g, out, [](double gv, double) { return -gv; }));
        return;
      case OpKind::kExp:
        send(0, map2(g, out, [](double gv, double o) { return gv * o; }));
        return;
      case OpKind::kLog:
        send(0, map2(g, in(id, 0), [](double gv, double a) { return gv / a; }));
        return;
      case OpKind::kSigmoid:
        send(0, map2(g, out, [](double gv, double s) { return gv * s * (1.0 - s); }));
        return;
      case OpKind::kLogSigmoid:
        send(0, map2(g, in(id, 0), [](double gv, double a) { return gv * detail::stable_sigmoid(-a); }));
        return;
      case OpKind::kLeakyRelu: {
        const double s = n.alpha;
        send(0, map2(g, in(id, 0), [s](double gv, double a) { return a > 0 ? gv : s * gv; }));
        return;
      }
      case OpKind::kSoftmax: {
        DenseArray d = DenseArray::matrix(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * out(i, j);
          for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = out(i, j) * (g(i, j) - dot);
        }
        send(0, std::move(d));
        return;
      }
      case OpKind::kLogSoftmax: {
        DenseArray d = DenseArray::matrix(g.rows(), g.cols());
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double gs = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) gs += g(i, j);
          for (std::size_t j = 0; j < g.cols(); ++j) d(i, j) = g(i, j) - std::exp(out(i, j)) * gs;
        }
        send(0, std::move(d));
        return;
      }
      case OpKind::kConcat: {
        std::size_t off = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
          const std::size_t c = in(id, p).cols();
          if (want(p)) {
            DenseArray d = DenseArray::matrix(g.rows(), c);
            for (std::size_t i = 0; i < g.rows(); ++i) {
              for (std::size_t j = 0; j < c; ++j) d(i, j) = g(i, off + j);
            }
            send(p, std::move(d));
          }
          off += c;
        }
        return;
      }
      case OpKind::kRowSum: {
        const DenseArray& a = in(id, 0);
        DenseArray d = DenseArray::matrix(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = 0; j < a.cols(); ++j) d(i, j) = g(i, 0);
        }
        send(0, std::move(d));
        return;
      }
      case OpKind::kMean: {
        const DenseArray& a = in(id, 0);
        DenseArray d(a.shape(), g[0] / static_cast<double>(a.size()));
        send(0, std::move(d));
        return;
      }
      case OpKind::kSlice: {
        const DenseArray& a = in(id, 0);
        DenseArray d = DenseArray::matrix(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = n.begin; j < n.end; ++j) d(i, j) = g(i, j - n.begin);
        }
        send(0, std::move(d));
        return;
      }
      case OpKind::kSelect: {
        const DenseArray& m = in(id, 0);
        for (std::size_t side = 1; side <= 2; ++side) {
          if (!want(side)) continue;
          DenseArray d(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) {
            const bool on = m[i] != 0.0;
            d[i] = (side == 1) == on ? g[i] : 0.0;
          }
          send(side, std::move(d));
        }
        return;
      }
    }
  }

  template <class F>
  static DenseArray map2(const DenseArray& g, const DenseArray& ref, F f) {
    DenseArray d(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = f(g[i], ref[i]);
    return d;
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> param_index_;
  std::map<std::string, NodeId> outputs_;
  Bindings bindings_;
  bool evaluated_ = false;
};

/// Evaluates the graph and returns the values of its named nodes.
inline std::map<std::string, DenseArray> evaluate(ValueGraph& graph, const Bindings& bindings) {
  graph.run(bindings);
  return graph.named_values();
}

/// d(loss)/d(p) for every trainable parameter p. The graph must already be evaluated.
inline std::map<std::string, DenseArray> backward(ValueGraph& graph, NodeId loss) {
  return graph.gradients(loss);
}

/// Central finite-difference check of backward() over every trainable
/// coordinate. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. Returns the worst coordinate's error.
inline double check_gradients(ValueGraph& graph, NodeId loss, double epsilon) {
  if (!(epsilon > 0.0)) throw ValidationError("check_gradients: epsilon must be positive");
  graph.rerun();
  auto analytic = graph.gradients(loss);
  double worst = 0.0;
  for (const auto& name : graph.trainable_parameters()) {
    const DenseArray original = graph.parameter_value(name);
    const DenseArray& grad = analytic.at(name);
    for (std::size_t i = 0; i < original.size(); ++i) {
      DenseArray probe = original;
      probe[i] = original[i] + epsilon;
      graph.set_parameter(name, probe);
      double up;
      double down;
      try {
        graph.rerun();
        up = graph.value(loss)[0];
        probe[i] = original[i] - epsilon;
        graph.set_parameter(name, probe);
        graph.rerun();
        down = graph.value(loss)[0];
      } catch (const NumericError& e) {
        graph.set_parameter(name, original);
        throw NumericError(std::string("check_gradients: non-finite loss under perturbation of '") +
                           name + "': " + e.what());
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(grad[i] - numeric) / denom);
    }
    graph.set_parameter(name, original);
  }
  graph.rerun();
  return worst;
}

}  // namespace cbmlab
