#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bt2/errors.hpp"
#include "bt2/grad.hpp"
#include "bt2/linalg.hpp"
#include "bt2/random.hpp"

namespace bt2::model {

using grad::Graph;
using grad::NamedTensors;
using grad::NodeId;
using linalg::DenseMatrix;

/// Training recipes that produce an embedding model.
enum class Method { old, new_independent, bct, bct_pad, contrast, bt2, upper_bound };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::old: return "old";
    case Method::new_independent: return "new-independent";
    case Method::bct: return "bct";
    case Method::bct_pad: return "bct-pad";
    case Method::contrast: return "contrast";
    case Method::bt2: return "bt2";
    case Method::upper_bound: return "upper-bound";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::old, Method::new_independent, Method::bct, Method::bct_pad, Method::contrast,
                   Method::bt2, Method::upper_bound}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Configuration

/// Dimensions of the basis-transformation architecture.
///   m: dimension of the independently trained new embedding
///   n: dimension of the old embedding
///   d: extra dimensions; the output has m + d entries
struct Bt2Config {
  std::size_t m = 16;
  std::size_t n = 16;
  std::size_t d = 4;
  double c_scale = 2.0;
  bool cls_on_final = false;

  std::size_t output_dim() const { return m + d; }

  void validate() const {
    if (d < 1) throw ConfigError("bt2: d must be >= 1");
    if (d > n) throw ConfigError("bt2: d must not exceed n (n - d >= 0)");
    if (m < n - d) throw ConfigError("bt2: m must be >= n - d");
    if (m < 1) throw ConfigError("bt2: m must be >= 1");
    if (!(c_scale > 0.0) || !std::isfinite(c_scale)) throw ConfigError("bt2: C must be positive");
  }
};

struct UpperBoundConfig {
  double c = 2.0;

  void validate() const {
    if (!(c > 0.0) || !std::isfinite(c)) throw ConfigError("upper-bound: c must be positive");
  }
};

// ---------------------------------------------------------------------------
// Typed parameter blocks

struct Affine {
  DenseMatrix weight;  // out x in
  DenseMatrix bias;    // out x 1

  /// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], bias zero.
  static Affine init(std::size_t in, std::size_t out, Rng& rng) {
    Affine a{DenseMatrix(out, in), DenseMatrix(out, 1)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& w : a.weight.data()) w = rng.uniform(-bound, bound);
    return a;
  }
};

/// One hidden relu layer followed by a linear output layer.
struct Mlp {
  Affine hidden;
  Affine output;

  std::size_t input_dim() const { return hidden.weight.cols(); }
  std::size_t output_dim() const { return output.weight.rows(); }

  static Mlp init(std::size_t in, std::size_t hidden_width, std::size_t out, Rng& rng) {
    Affine h = Affine::init(in, hidden_width, rng);
    Affine o = Affine::init(hidden_width, out, rng);
    return {std::move(h), std::move(o)};
  }
};

struct ClassifierHead {
  DenseMatrix weight;  // classes x embed-dim
  bool frozen = false;

  std::size_t num_classes() const { return weight.rows(); }
  std::size_t input_dim() const { return weight.cols(); }

  static ClassifierHead init(std::size_t classes, std::size_t dim, Rng& rng) {
    return {Affine::init(dim, classes, rng).weight, false};
  }
};

/// Unnormalized MLP output for a single feature vector.
inline std::vector<double> backbone_forward(const Mlp& mlp, std::span<const double> x) {
  if (x.size() != mlp.input_dim()) {
    throw ShapeError("backbone_forward: input has " + std::to_string(x.size()) + " features, expected " +
                     std::to_string(mlp.input_dim()));
  }
  std::vector<double> h = linalg::apply(mlp.hidden.weight, x);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = std::max(0.0, h[i] + mlp.hidden.bias(i, 0));
  std::vector<double> out = linalg::apply(mlp.output.weight, h);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += mlp.output.bias(i, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Basis-transformation model

struct Bt2Model {
  Bt2Config config;
  Mlp backbone;            // input -> m + n
  Affine projection;       // m + n -> d
  linalg::SkewParams b1;   // m x m
  linalg::SkewParams b2;   // n x n
  ClassifierHead head;     // over phi3 (or phi_new when cls_on_final)

  static Bt2Model init(const Bt2Config& cfg, std::size_t input_dim, std::size_t hidden, std::size_t classes,
                       Rng& rng) {
    cfg.validate();
    Bt2Model model;
    model.config = cfg;
    model.backbone = Mlp::init(input_dim, hidden, cfg.m + cfg.n, rng);
    model.projection = Affine::init(cfg.m + cfg.n, cfg.d, rng);
    model.b1 = linalg::SkewParams::zeros(cfg.m);
    model.b2 = linalg::SkewParams::zeros(cfg.n);
    model.head = ClassifierHead::init(classes, cfg.cls_on_final ? cfg.output_dim() : cfg.m, rng);
    return model;
  }
};

/// Intermediate values of one forward pass through the basis-transformation model.
struct ForwardTrace {
  std::vector<double> phi1;     // m + n, backbone output
  std::vector<double> phi2;     // d, unit
  std::vector<double> phi3;     // m, unit
  std::vector<double> phi4;     // m, norm C
  std::vector<double> phi5;     // n, old-compatible block
  std::vector<double> phi_new;  // m + d
};

inline ForwardTrace bt2_forward(const Bt2Model& model, std::span<const double> x) {
  const Bt2Config& cfg = model.config;
  cfg.validate();
  if (model.backbone.output_dim() != cfg.m + cfg.n) throw ConfigError("bt2_forward: backbone width != m + n");
  ForwardTrace t;
  t.phi1 = backbone_forward(model.backbone, x);

  std::vector<double> p2 = linalg::apply(model.projection.weight, t.phi1);
  for (std::size_t i = 0; i < p2.size(); ++i) p2[i] += model.projection.bias(i, 0);
  t.phi2 = linalg::normalized(p2);

  t.phi3 = linalg::normalized(std::span<const double>(t.phi1).first(cfg.m));

  const DenseMatrix b1 = linalg::expm_skew(linalg::build_skew(model.b1)).matrix();
  t.phi4 = linalg::apply(b1, t.phi3);
  for (double& v : t.phi4) v *= cfg.c_scale;

  const std::size_t keep = cfg.n - cfg.d;
  std::vector<double> mixed = t.phi2;
  mixed.insert(mixed.end(), t.phi4.begin(), t.phi4.begin() + static_cast<std::ptrdiff_t>(keep));
  const DenseMatrix b2 = linalg::expm_skew(linalg::build_skew(model.b2)).matrix();
  t.phi5 = linalg::apply(b2, mixed);

  t.phi_new = t.phi5;
  t.phi_new.insert(t.phi_new.end(), t.phi4.begin() + static_cast<std::ptrdiff_t>(keep), t.phi4.end());
  return t;
}

/// First n entries of a new embedding (the block compared against old embeddings).
inline std::vector<double> truncate_for_old(std::span<const double> phi_new, std::size_t n) {
  if (phi_new.size() < n) {
    throw ShapeError("truncate_for_old: vector has " + std::to_string(phi_new.size()) + " entries, need " +
                     std::to_string(n));
  }
  return {phi_new.begin(), phi_new.begin() + static_cast<std::ptrdiff_t>(n)};
}

inline constexpr double kUnitTolerance = 1e-6;

/// [phi_old' ; c * phi_new'].
inline std::vector<double> upper_bound_embed(std::span<const double> phi_old_prime,
                                             std::span<const double> phi_new_prime, const UpperBoundConfig& cfg) {
  cfg.validate();
  if (std::abs(linalg::norm(phi_old_prime) - 1.0) > kUnitTolerance ||
      std::abs(linalg::norm(phi_new_prime) - 1.0) > kUnitTolerance) {
    throw DomainError("upper_bound_embed: inputs must be unit vectors");
  }
  std::vector<double> out(phi_old_prime.begin(), phi_old_prime.end());
  for (double v : phi_new_prime) out.push_back(cfg.c * v);
  return out;
}

/// Appends zero columns so a head over n dims accepts new_dim-dim embeddings.
inline ClassifierHead pad_old_head(const ClassifierHead& head, std::size_t new_dim) {
  const std::size_t n = head.input_dim();
  if (new_dim < n) {
    throw ConfigError("pad_old_head: new_dim " + std::to_string(new_dim) + " is smaller than head width " +
                      std::to_string(n));
  }
  ClassifierHead out{DenseMatrix(head.num_classes(), new_dim), head.frozen};
  for (std::size_t i = 0; i < head.num_classes(); ++i)
    for (std::size_t j = 0; j < n; ++j) out.weight(i, j) = head.weight(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Named-tensor form (checkpoints, optimizer state, graph binding)

inline constexpr std::size_t kDefaultHidden = 64;

inline void put_mlp(NamedTensors& t, const std::string& prefix, const Mlp& mlp) {
  t[prefix + "w1"] = mlp.hidden.weight;
  t[prefix + "b1"] = mlp.hidden.bias;
  t[prefix + "w2"] = mlp.output.weight;
  t[prefix + "b2"] = mlp.output.bias;
}

inline const DenseMatrix& require(const NamedTensors& t, const std::string& name) {
  auto it = t.find(name);
  if (it == t.end()) throw ConfigError("model is missing tensor '" + name + "'");
  return it->second;
}

inline Mlp get_mlp(const NamedTensors& t, const std::string& prefix) {
  return {{require(t, prefix + "w1"), require(t, prefix + "b1")}, {require(t, prefix + "w2"), require(t, prefix + "b2")}};
}

/// A trained or initialized model in named-tensor form.
struct Model {
  Method method = Method::old;
  NamedTensors tensors;

  bool is_bt2() const { return method == Method::bt2; }
  bool is_upper_bound() const { return method == Method::upper_bound; }

  Bt2Config bt2_config() const {
    const DenseMatrix& c = require(tensors, "config");
    if (c.size() != 5) throw ConfigError("bt2 config tensor must have 5 entries");
    for (std::size_t i = 0; i < 3; ++i) {
      const double v = c.data()[i];
      if (!(v >= 0.0 && v <= 1e6) || v != std::floor(v)) throw ConfigError("bt2 config holds a bad dimension");
    }
    return {static_cast<std::size_t>(c.data()[0]), static_cast<std::size_t>(c.data()[1]),
            static_cast<std::size_t>(c.data()[2]), c.data()[3], c.data()[4] != 0.0};
  }

  std::size_t embedding_dim() const {
    if (is_bt2()) return bt2_config().output_dim();
    if (is_upper_bound()) return require(tensors, "old.backbone.w2").rows() + require(tensors, "new.backbone.w2").rows();
    return require(tensors, "backbone.w2").rows();
  }

  std::size_t input_dim() const {
    if (is_upper_bound()) return require(tensors, "old.backbone.w1").cols();
    return require(tensors, "backbone.w1").cols();
  }

  /// The model's trainable classifier head, frozen copy.
  ClassifierHead frozen_head() const { return {require(tensors, "head.weight"), true}; }
};

inline Model make_embedding_model(Method method, const Mlp& backbone, const ClassifierHead& head) {
  Model m{method, {}};
  put_mlp(m.tensors, "backbone.", backbone);
  m.tensors["head.weight"] = head.weight;
  return m;
}

inline Model to_model(const Bt2Model& b) {
  Model m{Method::bt2, {}};
  put_mlp(m.tensors, "backbone.", b.backbone);
  m.tensors["proj.weight"] = b.projection.weight;
  m.tensors["proj.bias"] = b.projection.bias;
  m.tensors["b1.theta"] = DenseMatrix::column(b.b1.theta);
  m.tensors["b2.theta"] = DenseMatrix::column(b.b2.theta);
  m.tensors["head.weight"] = b.head.weight;
  const Bt2Config& c = b.config;
  m.tensors["config"] = DenseMatrix(5, 1, {static_cast<double>(c.m), static_cast<double>(c.n),
                                           static_cast<double>(c.d), c.c_scale, c.cls_on_final ? 1.0 : 0.0});
  return m;
}

inline Bt2Model to_bt2(const Model& m) {
  if (!m.is_bt2()) throw ConfigError("model is not a bt2 model");
  Bt2Model b;
  b.config = m.bt2_config();
  b.backbone = get_mlp(m.tensors, "backbone.");
  b.projection = {require(m.tensors, "proj.weight"), require(m.tensors, "proj.bias")};
  const auto& t1 = require(m.tensors, "b1.theta");
  const auto& t2 = require(m.tensors, "b2.theta");
  b.b1 = {b.config.m, {t1.data().begin(), t1.data().end()}};
  b.b2 = {b.config.n, {t2.data().begin(), t2.data().end()}};
  b.head = {require(m.tensors, "head.weight"), false};
  return b;
}

/// Composes two frozen models into the concatenating upper-bound embedder.
inline Model make_upper_bound(const Model& old_model, const Model& new_model, const UpperBoundConfig& cfg) {
  cfg.validate();
  if (old_model.is_bt2() || old_model.is_upper_bound() || new_model.is_bt2() || new_model.is_upper_bound()) {
    throw ConfigError("upper-bound composes two plain embedding models");
  }
  if (old_model.input_dim() != new_model.input_dim()) throw ConfigError("upper-bound: input dims differ");
  Model m{Method::upper_bound, {}};
  for (const auto& [name, t] : old_model.tensors) m.tensors["old." + name] = t;
  for (const auto& [name, t] : new_model.tensors) m.tensors["new." + name] = t;
  m.tensors["config"] = DenseMatrix(1, 1, cfg.c);
  return m;
}

// ---------------------------------------------------------------------------
// Graph construction

/// Inserts named model tensors into a graph as trainable parameters or frozen constants.
class Binder {
 public:
  Binder(Graph& g, const NamedTensors& tensors, bool trainable, std::string prefix = "")
      : g_(g), tensors_(tensors), trainable_(trainable), prefix_(std::move(prefix)) {}

  NodeId operator()(const std::string& name) {
    const std::string key = prefix_ + name;
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const DenseMatrix& value = require(tensors_, key);
    const NodeId id = trainable_ ? g_.parameter(key, value) : g_.constant(value);
    cache_[key] = id;
    return id;
  }

  Binder with_prefix(const std::string& p) const { return Binder(g_, tensors_, trainable_, prefix_ + p); }

  Graph& graph() { return g_; }
  bool trainable() const { return trainable_; }

 private:
  Graph& g_;
  const NamedTensors& tensors_;
  bool trainable_;
  std::string prefix_;
  std::map<std::string, NodeId> cache_;
};

inline NodeId mlp_nodes(Binder& bind, NodeId x) {
  Graph& g = bind.graph();
  const NodeId h = g.relu(grad::affine(g, bind("backbone.w1"), bind("backbone.b1"), x));
  return grad::affine(g, bind("backbone.w2"), bind("backbone.b2"), h);
}

struct Bt2Nodes {
  NodeId phi1, phi2, phi3, phi4, phi5, phi_new;
};

inline Bt2Nodes bt2_nodes(Binder& bind, const Bt2Config& cfg, NodeId x) {
  cfg.validate();
  Graph& g = bind.graph();
  Bt2Nodes n{};
  n.phi1 = mlp_nodes(bind, x);
  n.phi2 = g.l2_normalize(grad::affine(g, bind("proj.weight"), bind("proj.bias"), n.phi1));
  n.phi3 = g.l2_normalize(g.slice(n.phi1, 0, cfg.m));
  const NodeId b1 = g.matrix_exp_skew(bind("b1.theta"), cfg.m);
  n.phi4 = g.scale(g.matmul(b1, n.phi3), cfg.c_scale);
  const std::size_t keep = cfg.n - cfg.d;
  const NodeId mixed = keep == 0 ? n.phi2 : g.concat(n.phi2, g.slice(n.phi4, 0, keep));
  const NodeId b2 = g.matrix_exp_skew(bind("b2.theta"), cfg.n);
  n.phi5 = g.matmul(b2, mixed);
  n.phi_new = keep == cfg.m ? n.phi5 : g.concat(n.phi5, g.slice(n.phi4, keep, cfg.m));
  return n;
}

/// Embedding node for any model kind (unnormalized; upper-bound parts are unit by construction).
inline NodeId embedding_nodes(Binder& bind, const Model& model, NodeId x) {
  Graph& g = bind.graph();
  switch (model.method) {
    case Method::bt2:
      return bt2_nodes(bind, model.bt2_config(), x).phi_new;
    case Method::upper_bound: {
      Binder old_bind = bind.with_prefix("old.");
      Binder new_bind = bind.with_prefix("new.");
      const NodeId old_part = g.l2_normalize(mlp_nodes(old_bind, x));
      const NodeId new_part = g.l2_normalize(mlp_nodes(new_bind, x));
      const double c = require(model.tensors, "config").data()[0];
      return g.concat(old_part, g.scale(new_part, c));
    }
    default:
      return mlp_nodes(bind, x);
  }
}

/// Embeds the columns of `x` (features x samples); returns (embed-dim x samples).
inline DenseMatrix embed_batch(const Model& model, const DenseMatrix& x) {
  Graph g;
  Binder bind(g, model.tensors, false);
  const NodeId in = g.constant(x);
  const NodeId out = embedding_nodes(bind, model, in);
  g.forward();
  return g.value(out);
}

}  // namespace bt2::model
