#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "bt2/errors.hpp"
#include "bt2/grad.hpp"
#include "bt2/model.hpp"

// Training objectives. All functions append nodes to a graph whose columns are
// minibatch samples and return a (1 x 1) node holding the batch-mean loss.
// Classification logits are head * normalize(embedding) with no bias.
namespace bt2::losses {

using grad::Graph;
using grad::NodeId;
using grad::Tensor;
using model::ClassifierHead;

struct LossConfig {
  double lambda = 1.0;   // BCT influence / contrast weight
  double lambda1 = 1.0;  // phi3 vs independent-new cosine term
  double lambda2 = 1.0;  // phi5 through the frozen old head
  double lambda3 = 1.0;  // phi5 vs old cosine term
  double tau = 0.07;

  void validate() const {
    for (double w : {lambda, lambda1, lambda2, lambda3}) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
    }
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be > 0");
  }
};

/// Per-sample cross-entropy row (1 x B) of head * normalize(phi).
inline NodeId cross_entropy_rows(Graph& g, NodeId head, NodeId phi, const std::vector<std::size_t>& labels) {
  if (g.cols(head) != g.rows(phi)) {
    throw ShapeError("cross_entropy: head expects " + std::to_string(g.cols(head)) + " dims, embedding has " +
                     std::to_string(g.rows(phi)));
  }
  const NodeId logits = g.matmul(head, g.l2_normalize(phi));
  return g.softmax_cross_entropy(logits, labels);
}

inline NodeId cross_entropy(Graph& g, NodeId head, NodeId phi, const std::vector<std::size_t>& labels) {
  return grad::batch_mean(g, cross_entropy_rows(g, head, phi, labels));
}

namespace detail {

inline void require_frozen(const ClassifierHead& head) {
  if (!head.frozen) throw ConfigError("the old classifier head must be frozen");
}

// Cross-entropy through a frozen head with fewer classes than the batch labels
// span: samples whose label the head does not know contribute zero. Returns the
// sum over known samples divided by the full batch size, or nullopt when none.
inline std::optional<NodeId> frozen_head_term(Graph& g, const ClassifierHead& head, NodeId phi,
                                              const std::vector<std::size_t>& labels) {
  const std::size_t batch = labels.size();
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < batch; ++j)
    if (labels[j] < head.num_classes()) keep.push_back(j);
  if (keep.empty()) return std::nullopt;
  const NodeId w = g.constant(head.weight);
  NodeId selected = phi;
  std::vector<std::size_t> kept_labels;
  for (std::size_t j : keep) kept_labels.push_back(labels[j]);
  if (keep.size() != batch) {
    Tensor pick(batch, keep.size());
    for (std::size_t c = 0; c < keep.size(); ++c) pick(keep[c], c) = 1.0;
    selected = g.matmul(phi, g.constant(pick));
  }
  const NodeId rows = cross_entropy_rows(g, w, selected, kept_labels);
  return grad::batch_sum(g, rows, 1.0 / static_cast<double>(batch));
}

// lambda * (1 - mean_j <a_j, target_j>)
inline NodeId cosine_term(Graph& g, NodeId unit_phi, const Tensor& targets, double lambda) {
  if (targets.rows() != g.rows(unit_phi) || targets.cols() != g.cols(unit_phi)) {
    throw ShapeError("cosine target has shape " + std::to_string(targets.rows()) + "x" +
                     std::to_string(targets.cols()) + ", expected " + std::to_string(g.rows(unit_phi)) + "x" +
                     std::to_string(g.cols(unit_phi)));
  }
  const NodeId mean_cos = grad::batch_mean(g, g.dot(unit_phi, g.constant(targets)));
  return grad::add_constant(g, g.scale(mean_cos, -lambda), lambda);
}

}  // namespace detail

/// L(w_new, phi) + lambda * L(w_old, phi); the old head is inserted as a constant.
inline NodeId bct_loss(Graph& g, NodeId phi, NodeId head_new, const ClassifierHead& head_old,
                       const std::vector<std::size_t>& labels, const LossConfig& cfg) {
  cfg.validate();
  detail::require_frozen(head_old);
  if (head_old.input_dim() != g.rows(phi)) {
    throw ShapeError("bct_loss: old head expects " + std::to_string(head_old.input_dim()) +
                     " dims; pad it first for expanded embeddings");
  }
  const NodeId main = cross_entropy(g, head_new, phi, labels);
  if (cfg.lambda == 0.0) return main;
  const auto influence = detail::frozen_head_term(g, head_old, phi, labels);
  if (!influence) return main;
  return g.add(main, g.scale(*influence, cfg.lambda));
}

/// Regression-alleviating compatibility term, averaged over the batch:
///   log(1 + sum_{k not in p(x)} e^{a_k/tau} / e^{a_x/tau} + sum_{k not in p(x)} e^{b_k/tau} / e^{a_x/tau})
/// with a_k = phi_new(k).phi_old(k) and b_k = phi_new(k).phi_new(k), both unit-normalized.
/// Exponents are shifted by 1/tau (the largest value a unit dot product can take).
inline NodeId contrast_loss(Graph& g, NodeId phi_new_unit, const Tensor& phi_old_targets,
                            const std::vector<std::size_t>& labels, const LossConfig& cfg) {
  cfg.validate();
  const std::size_t batch = labels.size();
  if (batch < 2) throw DomainError("contrast_loss: batch must hold at least 2 samples");
  if (g.cols(phi_new_unit) != batch) throw ShapeError("contrast_loss: label count != batch columns");
  if (phi_old_targets.rows() != g.rows(phi_new_unit) || phi_old_targets.cols() != batch) {
    throw ShapeError("contrast_loss: old targets do not match new embedding shape");
  }
  const double inv_tau = 1.0 / cfg.tau;

  Tensor negatives(batch, batch);  // [k][x] = 1 when k is outside p(x)
  for (std::size_t k = 0; k < batch; ++k)
    for (std::size_t x = 0; x < batch; ++x) negatives(k, x) = labels[k] != labels[x] ? 1.0 : 0.0;
  const NodeId mask = g.constant(negatives);

  const NodeId cross = g.dot(phi_new_unit, g.constant(phi_old_targets));  // a
  const NodeId self = g.dot(phi_new_unit, phi_new_unit);                  // b
  const NodeId cross_exp = g.exp(grad::add_constant(g, g.scale(cross, inv_tau), -inv_tau));
  const NodeId self_exp = g.exp(grad::add_constant(g, g.scale(self, inv_tau), -inv_tau));
  const NodeId sums = g.add(g.matmul(cross_exp, mask), g.matmul(self_exp, mask));
  const NodeId anchor = g.exp(grad::add_constant(g, g.scale(cross, -inv_tau), inv_tau));
  const NodeId ratio = g.dot(sums, anchor);  // column-wise product of two rows
  const NodeId per_sample = g.log(grad::add_constant(g, ratio, 1.0));
  return grad::batch_mean(g, per_sample);
}

/// CE(w_phi3, phi3) + lambda1 * (1 - phi3 . phi_new'). With cls_on_final the CE
/// term reads `classify_on` (phi_new) instead of phi3.
inline NodeId bt2_new_loss(Graph& g, NodeId phi3_unit, NodeId head_phi3, const Tensor& phi_new_prime_targets,
                           const std::vector<std::size_t>& labels, const LossConfig& cfg,
                           std::optional<NodeId> classify_on = std::nullopt) {
  cfg.validate();
  if (phi_new_prime_targets.rows() != g.rows(phi3_unit)) {
    throw ShapeError("bt2_new_loss: target dim " + std::to_string(phi_new_prime_targets.rows()) + " != m = " +
                     std::to_string(g.rows(phi3_unit)));
  }
  const NodeId ce = cross_entropy(g, head_phi3, classify_on.value_or(phi3_unit), labels);
  if (cfg.lambda1 == 0.0) return ce;
  return g.add(ce, detail::cosine_term(g, phi3_unit, phi_new_prime_targets, cfg.lambda1));
}

/// lambda2 * CE(w_old, phi5) + lambda3 * (1 - normalize(phi5) . phi_old).
inline NodeId bt2_old_loss(Graph& g, NodeId phi5, const ClassifierHead& head_old, const Tensor& phi_old_targets,
                           const std::vector<std::size_t>& labels, const LossConfig& cfg) {
  cfg.validate();
  detail::require_frozen(head_old);
  if (phi_old_targets.rows() != g.rows(phi5)) {
    throw ShapeError("bt2_old_loss: target dim " + std::to_string(phi_old_targets.rows()) + " != n = " +
                     std::to_string(g.rows(phi5)));
  }
  std::optional<NodeId> total;
  auto accumulate = [&](NodeId term) { total = total ? g.add(*total, term) : term; };
  if (cfg.lambda2 != 0.0) {
    if (head_old.input_dim() != g.rows(phi5)) throw ShapeError("bt2_old_loss: old head width != n");
    if (auto ce = detail::frozen_head_term(g, head_old, phi5, labels)) accumulate(g.scale(*ce, cfg.lambda2));
  }
  if (cfg.lambda3 != 0.0) {
    accumulate(detail::cosine_term(g, g.l2_normalize(phi5), phi_old_targets, cfg.lambda3));
  }
  return total ? *total : g.constant(Tensor(1, 1, 0.0));
}

}  // namespace bt2::losses
