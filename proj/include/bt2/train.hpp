#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "bt2/data.hpp"
#include "bt2/errors.hpp"
#include "bt2/grad.hpp"
#include "bt2/losses.hpp"
#include "bt2/model.hpp"
#include "bt2/random.hpp"
#include "bt2/retrieval.hpp"

// Training loops for every method plus embedding export.
namespace bt2::train {

using grad::Graph;
using grad::NodeId;
using grad::Tensor;
using model::Method;
using model::Model;

struct TrainSettings {
  grad::OptimizerSettings optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t hidden = model::kDefaultHidden;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (hidden < 1) throw ConfigError("hidden width must be >= 1");
    if (!(optimizer.learning_rate > 0.0) || !std::isfinite(optimizer.learning_rate)) {
      throw ConfigError("learning rate must be > 0");
    }
  }
};

/// Everything a training run needs besides the data.
struct MethodConfig {
  Method method = Method::old;
  TrainSettings train;
  losses::LossConfig loss;
  model::Bt2Config bt2;
  model::UpperBoundConfig upper_bound;
};

struct TrainResult {
  Model model;
  std::vector<double> epoch_loss;
  std::optional<std::string> divergence;  // set when training stopped on non-finite values
};

inline bool requires_old(Method m) {
  return m == Method::bct || m == Method::bct_pad || m == Method::contrast || m == Method::bt2 ||
         m == Method::upper_bound;
}

inline bool requires_new_independent(Method m) { return m == Method::bt2 || m == Method::upper_bound; }

/// Embeds every sample of `ds` (columns) in chunks.
inline Tensor embed_matrix(const Model& m, const data::Dataset& ds) {
  constexpr std::size_t kChunk = 512;
  Tensor out(m.embedding_dim(), ds.size());
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    const std::size_t end = std::min(ds.size(), start + kChunk);
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const Tensor e = model::embed_batch(m, ds.columns(idx));
    for (std::size_t c = 0; c < idx.size(); ++c)
      for (std::size_t r = 0; r < e.rows(); ++r) out(r, start + c) = e(r, c);
  }
  return out;
}

inline std::vector<retrieval::EmbeddingRecord> embed_records(const Model& m, const data::Dataset& ds,
                                                             const std::string& tag) {
  const Tensor e = embed_matrix(m, ds);
  std::vector<retrieval::EmbeddingRecord> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out.push_back({i, ds.samples[i].label, e.column_values(i), tag});
  }
  return out;
}

namespace detail {

inline Tensor normalized_columns(Tensor t) {
  for (std::size_t j = 0; j < t.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i) s += t(i, j) * t(i, j);
    const double n = std::max(std::sqrt(s), grad::kNormFloor);
    for (std::size_t i = 0; i < t.rows(); ++i) t(i, j) /= n;
  }
  return t;
}

inline Tensor pick_columns(const Tensor& t, std::span<const std::size_t> idx) {
  Tensor out(t.rows(), idx.size());
  for (std::size_t c = 0; c < idx.size(); ++c)
    for (std::size_t r = 0; r < t.rows(); ++r) out(r, c) = t(r, idx[c]);
  return out;
}

// The frozen classifier head an old model contributes to influence-style terms.
inline std::optional<model::ClassifierHead> old_head_of(const Model& old) {
  if (old.is_upper_bound()) return std::nullopt;
  model::ClassifierHead h = old.frozen_head();
  if (h.input_dim() != old.embedding_dim()) return std::nullopt;
  return h;
}

}  // namespace detail

/// Fresh parameters for `cfg.method`. Dimensions follow the method:
/// old -> n, new-independent -> m, bct/contrast -> n, bct-pad -> n + d, bt2 -> m + d.
inline Model initial_model(const MethodConfig& cfg, std::size_t input_dim, std::size_t classes) {
  Rng rng(cfg.train.seed);
  const auto& b = cfg.bt2;
  auto plain = [&](std::size_t dim) {
    const model::Mlp mlp = model::Mlp::init(input_dim, cfg.train.hidden, dim, rng);
    const model::ClassifierHead head = model::ClassifierHead::init(classes, dim, rng);
    return model::make_embedding_model(cfg.method, mlp, head);
  };
  switch (cfg.method) {
    case Method::old:
    case Method::bct:
    case Method::contrast:
      return plain(b.n);
    case Method::new_independent:
      return plain(b.m);
    case Method::bct_pad:
      return plain(b.n + b.d);
    case Method::bt2:
      return model::to_model(model::Bt2Model::init(b, input_dim, cfg.train.hidden, classes, rng));
    case Method::upper_bound:
      break;
  }
  throw ConfigError("upper-bound has no trainable initialization");
}

/// Builds the minibatch objective for `cfg.method` into `g`; returns the scalar loss node.
struct BatchContext {
  const Tensor* old_targets = nullptr;  // unit old embeddings (n x N)
  const Tensor* new_targets = nullptr;  // unit independent-new embeddings (m x N)
  std::optional<model::ClassifierHead> old_head;
};

inline NodeId build_objective(Graph& g, model::Binder& bind, const Model& current, const MethodConfig& cfg,
                              const data::Dataset& ds, std::span<const std::size_t> idx, const BatchContext& ctx) {
  const NodeId x = g.constant(ds.columns(idx));
  const std::vector<std::size_t> labels = ds.labels(idx);
  const NodeId head = bind("head.weight");
  switch (cfg.method) {
    case Method::old:
    case Method::new_independent:
      return losses::cross_entropy(g, head, model::mlp_nodes(bind, x), labels);
    case Method::bct:
    case Method::bct_pad: {
      const NodeId phi = model::mlp_nodes(bind, x);
      if (!ctx.old_head) throw ConfigError("bct requires an old model with a classifier head over its embedding");
      const model::ClassifierHead old_head = cfg.method == Method::bct_pad
                                                 ? model::pad_old_head(*ctx.old_head, g.rows(phi))
                                                 : *ctx.old_head;
      return losses::bct_loss(g, phi, head, old_head, labels, cfg.loss);
    }
    case Method::contrast: {
      const NodeId phi = model::mlp_nodes(bind, x);
      const NodeId ce = losses::cross_entropy(g, head, phi, labels);
      if (idx.size() < 2 || cfg.loss.lambda == 0.0) return ce;
      const NodeId reg = losses::contrast_loss(g, g.l2_normalize(phi), detail::pick_columns(*ctx.old_targets, idx),
                                               labels, cfg.loss);
      return g.add(ce, g.scale(reg, cfg.loss.lambda));
    }
    case Method::bt2: {
      const model::Bt2Config bc = current.bt2_config();
      const model::Bt2Nodes n = model::bt2_nodes(bind, bc, x);
      std::optional<NodeId> classify_on;
      if (bc.cls_on_final) classify_on = n.phi_new;
      const NodeId new_part = losses::bt2_new_loss(g, n.phi3, head, detail::pick_columns(*ctx.new_targets, idx),
                                                   labels, cfg.loss, classify_on);
      losses::LossConfig lc = cfg.loss;
      model::ClassifierHead old_head;
      if (ctx.old_head) {
        old_head = *ctx.old_head;
      } else {
        if (lc.lambda2 != 0.0) {
          throw ConfigError("old model has no classifier head over its full embedding; set lambda2 = 0");
        }
        old_head = {Tensor(1, bc.n), true};
      }
      const NodeId old_part =
          losses::bt2_old_loss(g, n.phi5, old_head, detail::pick_columns(*ctx.old_targets, idx), labels, lc);
      return g.add(new_part, old_part);
    }
    case Method::upper_bound:
      break;
  }
  throw ConfigError("method has no training objective");
}

/// Trains `cfg.method` on `ds`. Old and independent-new models are used frozen.
inline TrainResult train(const MethodConfig& cfg, const data::Dataset& ds, const Model* old_model = nullptr,
                         const Model* new_independent = nullptr) {
  cfg.train.validate();
  cfg.loss.validate();
  if (requires_old(cfg.method) && old_model == nullptr) {
    throw ConfigError("method " + std::string(model::to_string(cfg.method)) + " requires an old model");
  }
  if (requires_new_independent(cfg.method) && new_independent == nullptr) {
    throw ConfigError("method " + std::string(model::to_string(cfg.method)) + " requires a new-independent model");
  }

  if (cfg.method == Method::upper_bound) {
    return {model::make_upper_bound(*old_model, *new_independent, cfg.upper_bound), {}, std::nullopt};
  }

  if (ds.size() == 0) throw ConfigError("training data is empty");

  MethodConfig resolved = cfg;
  if (old_model) resolved.bt2.n = old_model->embedding_dim();
  if (new_independent) resolved.bt2.m = new_independent->embedding_dim();
  if (cfg.method == Method::bt2) resolved.bt2.validate();
  if (old_model && old_model->input_dim() != ds.feature_dim()) throw ConfigError("old model input dim != data dim");

  TrainResult result;
  result.model = initial_model(resolved, ds.feature_dim(), ds.class_count);

  Tensor old_targets, new_targets;
  BatchContext ctx;
  if (old_model) {
    old_targets = detail::normalized_columns(embed_matrix(*old_model, ds));
    ctx.old_targets = &old_targets;
    ctx.old_head = detail::old_head_of(*old_model);
  }
  if (new_independent) {
    new_targets = detail::normalized_columns(embed_matrix(*new_independent, ds));
    ctx.new_targets = &new_targets;
  }

  grad::Optimizer opt(resolved.train.optimizer);
  Rng order_rng = Rng::derived(resolved.train.seed, 0xBA7C4);
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < resolved.train.epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += resolved.train.batch_size) {
      const std::size_t end = std::min(order.size(), start + resolved.train.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      try {
        Graph g;
        model::Binder bind(g, result.model.tensors, true);
        const NodeId loss = build_objective(g, bind, result.model, resolved, ds, idx, ctx);
        g.forward();
        const double value = g.scalar(loss);
        if (!std::isfinite(value)) throw DivergenceError("non-finite loss");
        grad::NamedTensors grads = g.backward(loss);
        grad::NamedTensors next = result.model.tensors;
        opt.step(next, grads);
        result.model.tensors = std::move(next);
        total += value;
        ++batches;
      } catch (const DivergenceError& e) {
        result.divergence = "epoch " + std::to_string(epoch) + ": " + e.what();
        return result;
      }
    }
    result.epoch_loss.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  return result;
}

/// Classification accuracy of the model's own head on `ds` (argmax of head * normalize(embedding)).
inline double head_accuracy(const Model& m, const data::Dataset& ds) {
  Tensor e = detail::normalized_columns(embed_matrix(m, ds));
  const Tensor& w = model::require(m.tensors, "head.weight");
  if (w.cols() != e.rows()) throw ConfigError("head does not match embedding");
  const Tensor logits = linalg::matmul(w, e);
  std::size_t correct = 0;
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.rows(); ++i)
      if (logits(i, j) > logits(best, j)) best = i;
    if (best == ds.samples[j].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace bt2::train
