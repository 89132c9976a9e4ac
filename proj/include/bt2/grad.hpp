#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bt2/errors.hpp"
#include "bt2/linalg.hpp"
#include "bt2/random.hpp"

namespace bt2::grad {

using Tensor = linalg::DenseMatrix;
using NamedTensors = std::map<std::string, Tensor>;
using NodeId = std::size_t;

// Tensors are matrices whose columns are independent samples. Every primitive
// acts column-wise, so a minibatch of B samples is a (features x B) matrix and
// a per-sample scalar is a (1 x B) row.
enum class OpKind {
  input,
  parameter,
  matmul,
  add,
  scale,
  relu,
  l2_normalize,
  concat,
  slice,
  dot,
  exp,
  log,
  softmax_cross_entropy,
  matrix_exp_skew,
};

inline constexpr double kNormFloor = 1e-12;

/// Reverse-mode tape over a closed primitive set. Nodes are appended in
/// creation order, which is a topological order; backward walks it in reverse.
class Graph {
 public:
  NodeId input(std::string name, std::size_t rows, std::size_t cols) {
    Node n = make(OpKind::input, rows, cols);
    n.name = std::move(name);
    return push(std::move(n));
  }

  /// An input node that is bound once at creation and never rebound.
  NodeId constant(Tensor value) {
    Node n = make(OpKind::input, value.rows(), value.cols());
    n.value = std::move(value);
    n.bound = true;
    return push(std::move(n));
  }

  NodeId parameter(std::string name, Tensor value) {
    if (param_index_.contains(name)) throw GraphError("duplicate parameter '" + name + "'");
    Node n = make(OpKind::parameter, value.rows(), value.cols());
    n.name = name;
    n.value = std::move(value);
    n.bound = true;
    const NodeId id = push(std::move(n));
    param_index_[name] = id;
    return id;
  }

  NodeId matmul(NodeId a, NodeId b) {
    if (node(a).cols != node(b).rows) shape_fail("matmul", a, b);
    return push_op(OpKind::matmul, {a, b}, node(a).rows, node(b).cols);
  }

  NodeId add(NodeId a, NodeId b) {
    if (node(a).rows != node(b).rows || node(a).cols != node(b).cols) shape_fail("add", a, b);
    return push_op(OpKind::add, {a, b}, node(a).rows, node(a).cols);
  }

  NodeId scale(NodeId a, double c) {
    const NodeId id = push_op(OpKind::scale, {a}, node(a).rows, node(a).cols);
    nodes_[id].scalar = c;
    return id;
  }

  NodeId relu(NodeId a) { return push_op(OpKind::relu, {a}, node(a).rows, node(a).cols); }

  /// Column-wise x / max(||x||, 1e-12).
  NodeId l2_normalize(NodeId a) { return push_op(OpKind::l2_normalize, {a}, node(a).rows, node(a).cols); }

  /// Stacks rows of `top` above rows of `bottom`.
  NodeId concat(NodeId top, NodeId bottom) {
    if (node(top).cols != node(bottom).cols) shape_fail("concat", top, bottom);
    return push_op(OpKind::concat, {top, bottom}, node(top).rows + node(bottom).rows, node(top).cols);
  }

  /// Rows [begin, end).
  NodeId slice(NodeId a, std::size_t begin, std::size_t end) {
    if (begin > end || end > node(a).rows) {
      throw GraphError("slice: rows [" + std::to_string(begin) + ", " + std::to_string(end) +
                       ") out of range for " + std::to_string(node(a).rows) + " rows");
    }
    const NodeId id = push_op(OpKind::slice, {a}, end - begin, node(a).cols);
    nodes_[id].begin = begin;
    return id;
  }

  /// Column-wise inner product; returns a (1 x cols) row.
  NodeId dot(NodeId a, NodeId b) {
    if (node(a).rows != node(b).rows || node(a).cols != node(b).cols) shape_fail("dot", a, b);
    return push_op(OpKind::dot, {a, b}, 1, node(a).cols);
  }

  NodeId exp(NodeId a) { return push_op(OpKind::exp, {a}, node(a).rows, node(a).cols); }
  NodeId log(NodeId a) { return push_op(OpKind::log, {a}, node(a).rows, node(a).cols); }

  /// Per-column softmax cross-entropy of logits (classes x B) against labels; (1 x B).
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
    const Node& l = node(logits);
    if (labels.size() != l.cols) throw GraphError("softmax_cross_entropy: label count does not match columns");
    for (std::size_t y : labels) {
      if (y >= l.rows) {
        throw DomainError("softmax_cross_entropy: label " + std::to_string(y) + " out of range for " +
                          std::to_string(l.rows) + " classes");
      }
    }
    const NodeId id = push_op(OpKind::softmax_cross_entropy, {logits}, 1, l.cols);
    nodes_[id].labels = std::move(labels);
    return id;
  }

  /// e^{A(theta)} for a (dim(dim-1)/2 x 1) theta node; returns the (dim x dim) matrix.
  NodeId matrix_exp_skew(NodeId theta, std::size_t dim) {
    const Node& t = node(theta);
    if (t.cols != 1 || t.rows != linalg::SkewParams::param_count(dim)) {
      throw GraphError("matrix_exp_skew: theta must be a column of length " +
                       std::to_string(linalg::SkewParams::param_count(dim)));
    }
    const NodeId id = push_op(OpKind::matrix_exp_skew, {theta}, dim, dim);
    nodes_[id].begin = dim;
    return id;
  }

  // -------------------------------------------------------------------------

  /// Binds named inputs (bindings persist across calls) and evaluates every node.
  void forward(const NamedTensors& inputs = {}) {
    for (const auto& [name, value] : inputs) {
      bool found = false;
      for (Node& n : nodes_) {
        if (n.kind != OpKind::input || n.name != name) continue;
        if (value.rows() != n.rows || value.cols() != n.cols) {
          throw GraphError("input '" + name + "' bound with wrong shape");
        }
        n.value = value;
        n.bound = true;
        found = true;
      }
      if (!found) throw GraphError("no input named '" + name + "'");
    }
    for (NodeId id = 0; id < nodes_.size(); ++id) evaluate(id);
    evaluated_ = true;
  }

  const Tensor& value(NodeId id) const {
    if (!evaluated_) throw GraphError("value requested before forward");
    return node(id).value;
  }

  double scalar(NodeId id) const {
    const Tensor& v = value(id);
    if (v.rows() != 1 || v.cols() != 1) throw GraphError("node is not scalar");
    return v(0, 0);
  }

  /// Gradient of a scalar loss with respect to every parameter, keyed by name.
  NamedTensors backward(NodeId loss) {
    if (!evaluated_) throw GraphError("backward before forward");
    const Node& l = node(loss);
    if (l.rows != 1 || l.cols != 1) throw GraphError("backward: loss node is not scalar");
    for (Node& n : nodes_) n.grad = Tensor();
    nodes_[loss].grad = Tensor(1, 1, 1.0);
    for (NodeId id = loss + 1; id-- > 0;) {
      if (nodes_[id].grad.size() == 0) continue;
      propagate(id);
    }
    NamedTensors out;
    for (const auto& [name, id] : param_index_) {
      const Node& p = nodes_[id];
      out[name] = p.grad.size() == 0 ? Tensor(p.rows, p.cols) : p.grad;
    }
    return out;
  }

  /// Accumulated gradient of any node after backward (zero matrix if unreached).
  Tensor grad(NodeId id) const {
    const Node& n = node(id);
    return n.grad.size() == 0 ? Tensor(n.rows, n.cols) : n.grad;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (const auto& [name, id] : param_index_) out.push_back(name);
    return out;
  }

  bool has_parameter(const std::string& name) const { return param_index_.contains(name); }

  NodeId parameter_node(const std::string& name) const {
    auto it = param_index_.find(name);
    if (it == param_index_.end()) throw GraphError("no parameter named '" + name + "'");
    return it->second;
  }

  const Tensor& parameter_value(const std::string& name) const { return nodes_[parameter_node(name)].value; }

  void set_parameter(const std::string& name, Tensor value) {
    Node& n = nodes_[parameter_node(name)];
    if (value.rows() != n.rows || value.cols() != n.cols) throw GraphError("set_parameter: shape mismatch");
    n.value = std::move(value);
  }

  OpKind kind(NodeId id) const { return node(id).kind; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t rows(NodeId id) const { return node(id).rows; }
  std::size_t cols(NodeId id) const { return node(id).cols; }

 private:
  struct Node {
    OpKind kind = OpKind::input;
    std::vector<NodeId> parents;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::string name;
    double scalar = 0.0;
    std::size_t begin = 0;
    std::vector<std::size_t> labels;
    bool bound = false;
    Tensor value;
    Tensor grad;
    Tensor aux;  // cached intermediate (softmax probabilities, skew A, column norms)
  };

  static Node make(OpKind kind, std::size_t rows, std::size_t cols) {
    Node n;
    n.kind = kind;
    n.rows = rows;
    n.cols = cols;
    return n;
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return nodes_.size() - 1;
  }

  NodeId push_op(OpKind kind, std::vector<NodeId> parents, std::size_t rows, std::size_t cols) {
    Node n = make(kind, rows, cols);
    n.parents = std::move(parents);
    return push(std::move(n));
  }

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw GraphError("unknown node id " + std::to_string(id));
    return nodes_[id];
  }

  [[noreturn]] void shape_fail(const char* op, NodeId a, NodeId b) const {
    throw GraphError(std::string(op) + ": incompatible shapes " + std::to_string(node(a).rows) + "x" +
                     std::to_string(node(a).cols) + " and " + std::to_string(node(b).rows) + "x" +
                     std::to_string(node(b).cols));
  }

  const Tensor& pv(const Node& n, std::size_t k) const { return nodes_[n.parents[k]].value; }

  void evaluate(NodeId id) {
    Node& n = nodes_[id];
    switch (n.kind) {
      case OpKind::input:
        if (!n.bound) throw GraphError("input '" + n.name + "' is not bound");
        return;
      case OpKind::parameter:
        return;
      case OpKind::matmul:
        n.value = linalg::matmul(pv(n, 0), pv(n, 1));
        break;
      case OpKind::add:
        n.value = pv(n, 0) + pv(n, 1);
        break;
      case OpKind::scale:
        n.value = n.scalar * pv(n, 0);
        break;
      case OpKind::relu: {
        n.value = pv(n, 0);
        for (double& v : n.value.data()) v = v > 0.0 ? v : 0.0;
        break;
      }
      case OpKind::l2_normalize: {
        const Tensor& x = pv(n, 0);
        n.value = x;
        n.aux = Tensor(1, x.cols());
        for (std::size_t j = 0; j < x.cols(); ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < x.rows(); ++i) s += x(i, j) * x(i, j);
          const double norm = std::max(std::sqrt(s), kNormFloor);
          n.aux(0, j) = norm;
          for (std::size_t i = 0; i < x.rows(); ++i) n.value(i, j) = x(i, j) / norm;
        }
        break;
      }
      case OpKind::concat: {
        const Tensor& a = pv(n, 0);
        const Tensor& b = pv(n, 1);
        n.value = Tensor(n.rows, n.cols);
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < n.cols; ++j) n.value(i, j) = a(i, j);
        for (std::size_t i = 0; i < b.rows(); ++i)
          for (std::size_t j = 0; j < n.cols; ++j) n.value(a.rows() + i, j) = b(i, j);
        break;
      }
      case OpKind::slice: {
        const Tensor& a = pv(n, 0);
        n.value = Tensor(n.rows, n.cols);
        for (std::size_t i = 0; i < n.rows; ++i)
          for (std::size_t j = 0; j < n.cols; ++j) n.value(i, j) = a(n.begin + i, j);
        break;
      }
      case OpKind::dot: {
        const Tensor& a = pv(n, 0);
        const Tensor& b = pv(n, 1);
        n.value = Tensor(1, n.cols);
        for (std::size_t j = 0; j < n.cols; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, j) * b(i, j);
          n.value(0, j) = s;
        }
        break;
      }
      case OpKind::exp:
        n.value = pv(n, 0);
        for (double& v : n.value.data()) v = std::exp(v);
        break;
      case OpKind::log:
        n.value = pv(n, 0);
        for (double& v : n.value.data()) v = std::log(v);
        break;
      case OpKind::softmax_cross_entropy: {
        const Tensor& z = pv(n, 0);
        n.value = Tensor(1, n.cols);
        n.aux = Tensor(z.rows(), z.cols());
        for (std::size_t j = 0; j < z.cols(); ++j) {
          double zmax = -std::numeric_limits<double>::infinity();
          for (std::size_t i = 0; i < z.rows(); ++i) zmax = std::max(zmax, z(i, j));
          double sum = 0.0;
          for (std::size_t i = 0; i < z.rows(); ++i) sum += std::exp(z(i, j) - zmax);
          const double lse = zmax + std::log(sum);
          for (std::size_t i = 0; i < z.rows(); ++i) n.aux(i, j) = std::exp(z(i, j) - lse);
          n.value(0, j) = lse - z(n.labels[j], j);
        }
        break;
      }
      case OpKind::matrix_exp_skew: {
        const Tensor& theta = pv(n, 0);
        linalg::SkewParams params{n.begin, std::vector<double>(theta.data().begin(), theta.data().end())};
        n.aux = linalg::build_skew(params);
        n.value = linalg::expm_skew(n.aux).matrix();
        break;
      }
    }
    if (!n.value.all_finite()) throw DivergenceError("non-finite value produced at node " + std::to_string(id));
  }

  void accumulate(NodeId target, const Tensor& g) {
    Node& t = nodes_[target];
    if (t.grad.size() == 0) {
      t.grad = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) t.grad.data()[i] += g.data()[i];
    }
  }

  void propagate(NodeId id) {
    const Node& n = nodes_[id];
    const Tensor& g = n.grad;
    switch (n.kind) {
      case OpKind::input:
      case OpKind::parameter:
        return;
      case OpKind::matmul:
        accumulate(n.parents[0], linalg::matmul(g, linalg::transpose(pv(n, 1))));
        accumulate(n.parents[1], linalg::matmul(linalg::transpose(pv(n, 0)), g));
        return;
      case OpKind::add:
        accumulate(n.parents[0], g);
        accumulate(n.parents[1], g);
        return;
      case OpKind::scale:
        accumulate(n.parents[0], n.scalar * g);
        return;
      case OpKind::relu: {
        Tensor out = g;
        const Tensor& x = pv(n, 0);
        for (std::size_t i = 0; i < out.size(); ++i)
          if (!(x.data()[i] > 0.0)) out.data()[i] = 0.0;
        accumulate(n.parents[0], out);
        return;
      }
      case OpKind::l2_normalize: {
        const Tensor& x = pv(n, 0);
        Tensor out(x.rows(), x.cols());
        for (std::size_t j = 0; j < x.cols(); ++j) {
          const double norm = n.aux(0, j);
          if (norm > kNormFloor) {
            double yg = 0.0;
            for (std::size_t i = 0; i < x.rows(); ++i) yg += n.value(i, j) * g(i, j);
            for (std::size_t i = 0; i < x.rows(); ++i) out(i, j) = (g(i, j) - n.value(i, j) * yg) / norm;
          } else {
            for (std::size_t i = 0; i < x.rows(); ++i) out(i, j) = g(i, j) / kNormFloor;
          }
        }
        accumulate(n.parents[0], out);
        return;
      }
      case OpKind::concat: {
        const std::size_t top = nodes_[n.parents[0]].rows;
        Tensor a(top, n.cols);
        Tensor b(n.rows - top, n.cols);
        for (std::size_t i = 0; i < top; ++i)
          for (std::size_t j = 0; j < n.cols; ++j) a(i, j) = g(i, j);
        for (std::size_t i = top; i < n.rows; ++i)
          for (std::size_t j = 0; j < n.cols; ++j) b(i - top, j) = g(i, j);
        accumulate(n.parents[0], a);
        accumulate(n.parents[1], b);
        return;
      }
      case OpKind::slice: {
        const Node& p = nodes_[n.parents[0]];
        Tensor out(p.rows, p.cols);
        for (std::size_t i = 0; i < n.rows; ++i)
          for (std::size_t j = 0; j < n.cols; ++j) out(n.begin + i, j) = g(i, j);
        accumulate(n.parents[0], out);
        return;
      }
      case OpKind::dot: {
        const Tensor& a = pv(n, 0);
        const Tensor& b = pv(n, 1);
        Tensor ga(a.rows(), a.cols());
        Tensor gb(b.rows(), b.cols());
        for (std::size_t j = 0; j < n.cols; ++j) {
          for (std::size_t i = 0; i < a.rows(); ++i) {
            ga(i, j) = g(0, j) * b(i, j);
            gb(i, j) = g(0, j) * a(i, j);
          }
        }
        accumulate(n.parents[0], ga);
        accumulate(n.parents[1], gb);
        return;
      }
      case OpKind::exp: {
        Tensor out = g;
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= n.value.data()[i];
        accumulate(n.parents[0], out);
        return;
      }
      case OpKind::log: {
        Tensor out = g;
        const Tensor& x = pv(n, 0);
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] /= x.data()[i];
        accumulate(n.parents[0], out);
        return;
      }
      case OpKind::softmax_cross_entropy: {
        Tensor out = n.aux;
        for (std::size_t j = 0; j < n.cols; ++j) {
          out(n.labels[j], j) -= 1.0;
          for (std::size_t i = 0; i < out.rows(); ++i) out(i, j) *= g(0, j);
        }
        accumulate(n.parents[0], out);
        return;
      }
      case OpKind::matrix_exp_skew: {
        const Tensor grad_a = linalg::expm_frechet_adjoint(n.aux, g);
        const std::vector<double> gt = linalg::project_skew_gradient(grad_a);
        accumulate(n.parents[0], Tensor(gt.size(), 1, gt));
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> param_index_;
  bool evaluated_ = false;
};

// ---------------------------------------------------------------------------
// Convenience builders over the primitive set

/// Row of ones; used for bias broadcast and batch reductions.
inline NodeId ones(Graph& g, std::size_t rows, std::size_t cols, double fill = 1.0) {
  return g.constant(Tensor(rows, cols, fill));
}

/// W x + b 1^T for a batch x of `batch` columns.
inline NodeId affine(Graph& g, NodeId weight, NodeId bias, NodeId x) {
  const NodeId wx = g.matmul(weight, x);
  const NodeId b = g.matmul(bias, ones(g, 1, g.cols(x)));
  return g.add(wx, b);
}

/// Mean of a (1 x B) row as a (1 x 1) node.
inline NodeId batch_mean(Graph& g, NodeId row) {
  const std::size_t b = g.cols(row);
  return g.matmul(row, ones(g, b, 1, 1.0 / static_cast<double>(b)));
}

/// Sum of a (1 x B) row scaled by `factor`, as (1 x 1).
inline NodeId batch_sum(Graph& g, NodeId row, double factor = 1.0) {
  return g.matmul(row, ones(g, g.cols(row), 1, factor));
}

/// a + c for a scalar constant c (broadcast over the shape of a).
inline NodeId add_constant(Graph& g, NodeId a, double c) {
  return g.add(a, g.constant(Tensor(g.rows(a), g.cols(a), c)));
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd_momentum, adaptive_moments };

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::adaptive_moments;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // beta1 for adaptive moments
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerSettings settings = {}) : settings_(settings) {}

  /// One update of every tensor in `params` that has a gradient in `grads`.
  void step(NamedTensors& params, const NamedTensors& grads) {
    for (const auto& [name, g] : grads) {
      if (!g.all_finite()) throw DivergenceError("non-finite gradient for '" + name + "'");
      auto it = params.find(name);
      if (it == params.end()) throw GraphError("optimizer: gradient for unknown parameter '" + name + "'");
      linalg::require_same_shape(it->second, g, "optimizer step");
    }
    ++step_count_;
    const auto& s = settings_;
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      Tensor& m = buffer(first_, name, p);
      if (s.kind == OptimizerKind::sgd_momentum) {
        for (std::size_t i = 0; i < p.size(); ++i) {
          m.data()[i] = s.momentum * m.data()[i] + g.data()[i];
          p.data()[i] -= s.learning_rate * m.data()[i];
        }
      } else {
        Tensor& v = buffer(second_, name, p);
        const double c1 = 1.0 - std::pow(s.momentum, static_cast<double>(step_count_));
        const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < p.size(); ++i) {
          const double gi = g.data()[i];
          m.data()[i] = s.momentum * m.data()[i] + (1.0 - s.momentum) * gi;
          v.data()[i] = s.beta2 * v.data()[i] + (1.0 - s.beta2) * gi * gi;
          const double mhat = m.data()[i] / c1;
          const double vhat = v.data()[i] / c2;
          p.data()[i] -= s.learning_rate * mhat / (std::sqrt(vhat) + s.eps);
        }
      }
      if (!p.all_finite()) throw DivergenceError("parameter '" + name + "' became non-finite");
    }
  }

  std::uint64_t step_count() const noexcept { return step_count_; }
  const OptimizerSettings& settings() const noexcept { return settings_; }

 private:
  static Tensor& buffer(NamedTensors& store, const std::string& name, const Tensor& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor(like.rows(), like.cols())).first;
    return it->second;
  }

  OptimizerSettings settings_;
  std::uint64_t step_count_ = 0;
  NamedTensors first_;
  NamedTensors second_;
};

// ---------------------------------------------------------------------------
// Finite-difference validation

inline constexpr std::size_t kMaxCheckedCoordinates = 200;
inline constexpr double kAbsoluteErrorBelow = 1e-8;

/// Compares backward() against central differences. Every coordinate of each
/// parameter is checked, or a random subsample of 200 when a parameter is larger.
/// Error is relative, or absolute where the analytic derivative is below 1e-8.
inline double finite_diff_check(Graph& g, NodeId loss, double step, std::uint64_t seed = 0) {
  g.forward();
  const NamedTensors analytic = g.backward(loss);
  Rng rng(seed);
  double worst = 0.0;
  for (const auto& name : g.parameter_names()) {
    const Tensor original = g.parameter_value(name);
    std::vector<std::size_t> coords(original.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > kMaxCheckedCoordinates) {
      rng.shuffle(coords);
      coords.resize(kMaxCheckedCoordinates);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      Tensor perturbed = original;
      perturbed.data()[c] = original.data()[c] + step;
      g.set_parameter(name, perturbed);
      g.forward();
      const double up = g.scalar(loss);
      perturbed.data()[c] = original.data()[c] - step;
      g.set_parameter(name, perturbed);
      g.forward();
      const double down = g.scalar(loss);
      g.set_parameter(name, original);

      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.at(name).data()[c];
      const double err = std::abs(a) < kAbsoluteErrorBelow ? std::abs(a - numeric)
                                                            : std::abs(a - numeric) / std::abs(a);
      worst = std::max(worst, err);
    }
  }
  g.forward();
  return worst;
}

}  // namespace bt2::grad
