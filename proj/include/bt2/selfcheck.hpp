#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bt2/analysis.hpp"
#include "bt2/checkpoint.hpp"
#include "bt2/data.hpp"
#include "bt2/grad.hpp"
#include "bt2/linalg.hpp"
#include "bt2/losses.hpp"
#include "bt2/model.hpp"
#include "bt2/random.hpp"
#include "bt2/retrieval.hpp"

namespace bt2::selfcheck {

struct Options {
  std::uint64_t seed = 1;
  bool inject_skew_fault = false;  // test hook: mirror entries get the wrong sign
};

struct CheckLine {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline constexpr double kGradTolerance = 1e-5;
inline constexpr double kGradStep = 1e-6;

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline linalg::SkewParams random_skew(std::size_t dim, double scale, Rng& rng) {
  linalg::SkewParams p = linalg::SkewParams::zeros(dim);
  for (double& t : p.theta) t = scale * rng.normal();
  return p;
}

inline grad::Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  grad::Tensor t(rows, cols);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

inline std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::size_t> out(n);
  for (auto& l : out) l = rng.below(classes);
  return out;
}

inline CheckLine orthonormality(const Options& opt) {
  Rng rng = Rng::derived(opt.seed, 1);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t dim = 1 + rng.below(32);
    const auto p = random_skew(dim, 1.0, rng);
    const double sign = opt.inject_skew_fault ? 1.0 : -1.0;
    const linalg::DenseMatrix a = linalg::detail::build_skew_signed(p, sign);
    worst = std::max(worst, linalg::orthonormality_defect(linalg::expm(a)));
  }
  return {"orthonormality", worst <= linalg::kOrthonormalTolerance, "max defect " + num(worst)};
}

inline CheckLine dot_preservation(const Options& opt) {
  Rng rng = Rng::derived(opt.seed, 2);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t dim = 2 + rng.below(15);
    const auto p = linalg::expm_skew(linalg::build_skew(random_skew(dim, 1.0, rng)));
    const auto u = rng.normal_vector(dim);
    const auto v = rng.normal_vector(dim);
    const double before = linalg::dot(u, v);
    const double after = linalg::dot(linalg::apply(p.matrix(), u), linalg::apply(p.matrix(), v));
    worst = std::max(worst, std::abs(before - after));
  }
  return {"dot-preservation", worst <= 1e-9, "max |u.v - Pu.Pv| " + num(worst)};
}

inline CheckLine gradient(const std::string& name, const Options& opt, std::uint64_t stream,
                          const std::function<grad::NodeId(grad::Graph&, Rng&)>& build) {
  Rng rng = Rng::derived(opt.seed, stream);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    grad::Graph g;
    const grad::NodeId loss = build(g, rng);
    worst = std::max(worst, grad::finite_diff_check(g, loss, kGradStep, rng.next()));
  }
  return {"gradient/" + name, worst <= kGradTolerance, "max rel err " + num(worst)};
}

inline model::ClassifierHead frozen_head(std::size_t classes, std::size_t dim, Rng& rng) {
  auto h = model::ClassifierHead::init(classes, dim, rng);
  h.frozen = true;
  return h;
}

inline grad::Tensor unit_columns(grad::Tensor t) {
  for (std::size_t j = 0; j < t.cols(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.rows(); ++i) s += t(i, j) * t(i, j);
    s = std::sqrt(s);
    for (std::size_t i = 0; i < t.rows(); ++i) t(i, j) /= s;
  }
  return t;
}

inline std::vector<CheckLine> gradients(const Options& opt) {
  const losses::LossConfig lc;
  constexpr std::size_t batch = 5, dim = 6, classes = 4;
  std::vector<CheckLine> out;

  out.push_back(gradient("cross-entropy", opt, 10, [&](grad::Graph& g, Rng& rng) {
    const auto phi = g.parameter("phi", random_tensor(dim, batch, rng));
    const auto head = g.parameter("head", random_tensor(classes, dim, rng));
    return losses::cross_entropy(g, head, phi, random_labels(batch, classes, rng));
  }));
  out.push_back(gradient("bct", opt, 11, [&](grad::Graph& g, Rng& rng) {
    const auto phi = g.parameter("phi", random_tensor(dim, batch, rng));
    const auto head = g.parameter("head", random_tensor(classes, dim, rng));
    return losses::bct_loss(g, phi, head, frozen_head(2, dim, rng), random_labels(batch, classes, rng), lc);
  }));
  out.push_back(gradient("contrast", opt, 12, [&](grad::Graph& g, Rng& rng) {
    const auto phi = g.l2_normalize(g.parameter("phi", random_tensor(dim, batch, rng)));
    return losses::contrast_loss(g, phi, unit_columns(random_tensor(dim, batch, rng)),
                                 random_labels(batch, 3, rng), lc);
  }));
  out.push_back(gradient("matrix-exp", opt, 13, [&](grad::Graph& g, Rng& rng) {
    const auto theta = g.parameter("theta", random_tensor(linalg::SkewParams::param_count(dim), 1, rng));
    const auto p = g.matrix_exp_skew(theta, dim);
    const auto y = g.matmul(p, g.constant(random_tensor(dim, batch, rng)));
    return grad::batch_mean(g, g.dot(y, g.constant(random_tensor(dim, batch, rng))));
  }));
  auto bt2_graph = [&](grad::Graph& g, Rng& rng, bool old_side) {
    const model::Bt2Config cfg{dim, dim, 2, 2.0, false};
    Rng init = Rng::derived(rng.next(), 0);
    model::Bt2Model bm = model::Bt2Model::init(cfg, 5, 7, classes, init);
    for (double& t : bm.b1.theta) t = 0.3 * rng.normal();
    for (double& t : bm.b2.theta) t = 0.3 * rng.normal();
    const model::Model m = model::to_model(bm);
    model::Binder bind(g, m.tensors, true);
    const auto nodes = model::bt2_nodes(bind, cfg, g.constant(random_tensor(5, batch, rng)));
    const auto labels = random_labels(batch, classes, rng);
    if (old_side) {
      return losses::bt2_old_loss(g, nodes.phi5, frozen_head(2, dim, rng), unit_columns(random_tensor(dim, batch, rng)),
                                  labels, lc);
    }
    return losses::bt2_new_loss(g, nodes.phi3, bind("head.weight"), unit_columns(random_tensor(dim, batch, rng)),
                                labels, lc);
  };
  out.push_back(gradient("bt2-new", opt, 14, [&](grad::Graph& g, Rng& rng) { return bt2_graph(g, rng, false); }));
  out.push_back(gradient("bt2-old", opt, 15, [&](grad::Graph& g, Rng& rng) { return bt2_graph(g, rng, true); }));
  return out;
}

/// Brute-force CMC@k and mAP, recomputing every similarity from scratch.
inline std::pair<double, double> brute_metrics(const std::vector<retrieval::EmbeddingRecord>& q,
                                               const std::vector<retrieval::EmbeddingRecord>& gal, std::size_t k) {
  std::size_t hits = 0, evaluated = 0;
  double ap_sum = 0.0;
  for (const auto& qq : q) {
    std::vector<std::pair<double, std::uint64_t>> scored;
    std::vector<std::uint32_t> labels;
    for (const auto& gg : gal) {
      if (gg.id == qq.id) continue;
      scored.emplace_back(retrieval::distance(qq.vector, gg.vector), gg.id);
    }
    std::sort(scored.begin(), scored.end());
    for (const auto& [d, id] : scored) {
      for (const auto& gg : gal)
        if (gg.id == id) labels.push_back(gg.label);
    }
    bool hit = false;
    for (std::size_t i = 0; i < std::min(k, labels.size()); ++i) hit = hit || labels[i] == qq.label;
    hits += hit;
    std::size_t found = 0;
    long double s = 0.0L;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != qq.label) continue;
      ++found;
      s += static_cast<long double>(found) / static_cast<long double>(i + 1);
    }
    if (found) {
      ap_sum += static_cast<double>(s / static_cast<long double>(found));
      ++evaluated;
    }
  }
  return {q.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(q.size()),
          evaluated ? ap_sum / static_cast<double>(evaluated) : 0.0};
}

inline CheckLine metric_oracles(const Options& opt) {
  Rng rng = Rng::derived(opt.seed, 3);
  bool ok = retrieval::average_precision({true, false, true}) == 5.0 / 6.0;
  for (int t = 0; t < 20 && ok; ++t) {
    const std::size_t n = 2 + rng.below(60), dim = 1 + rng.below(6), classes = 1 + rng.below(5);
    std::vector<retrieval::EmbeddingRecord> recs;
    for (std::size_t i = 0; i < n; ++i) {
      recs.push_back({i, static_cast<std::uint32_t>(rng.below(classes)), rng.unit_vector(dim), "t"});
    }
    const auto gal = retrieval::to_gallery(recs);
    const std::size_t k = 1 + rng.below(5);
    const auto [cmc, map] = brute_metrics(recs, recs, k);
    ok = retrieval::cmc_at_k(recs, gal, k) == cmc && retrieval::mean_average_precision(recs, gal).value == map;
  }
  return {"metric-oracles", ok, ok ? "20 galleries exact" : "mismatch against brute force"};
}

inline CheckLine lemma1(const Options&) {
  const auto r = analysis::lemma1_search(0.05, 100000, 7);
  const bool ok = !r.inconclusive && r.violations == 0;
  return {"angular-bound", ok,
          "eps 0.05: " + std::to_string(r.violations) + " violations, worst cos " + num(r.worst_cosine) +
              " vs bound " + num(r.bound)};
}

inline CheckLine round_trips(const Options& opt) {
  Rng rng = Rng::derived(opt.seed, 4);
  std::vector<retrieval::EmbeddingRecord> recs;
  for (std::uint64_t i = 0; i < 20; ++i) {
    std::vector<double> v(7);
    for (double& x : v) x = static_cast<double>(static_cast<float>(rng.normal()));
    recs.push_back({i * 3 + 1, static_cast<std::uint32_t>(i % 4), v, "rt"});
  }
  const auto emb = data::encode_embeddings("rt", recs);
  bool ok = data::encode_embeddings("rt", data::decode_embeddings(emb).records()) == emb;

  data::SyntheticSpec spec;
  spec.per_class = 5;
  const auto ds = data::gen_synthetic(spec).train;
  const auto dset = data::encode_dataset("rt", ds);
  ok = ok && data::encode_dataset("rt", data::decode_dataset(dset)) == dset;

  Rng init = Rng::derived(opt.seed, 5);
  const auto m = model::to_model(model::Bt2Model::init(model::Bt2Config{}, 32, 8, 10, init));
  const auto ck = checkpoint::encode(m);
  ok = ok && checkpoint::encode(checkpoint::decode(ck)) == ck;
  return {"file-round-trips", ok, ok ? "embeddings, dataset, checkpoint bit-exact" : "round trip changed bytes"};
}

inline CheckLine upper_bound_truncation(const Options& opt) {
  Rng rng = Rng::derived(opt.seed, 6);
  Rng i1 = Rng::derived(opt.seed, 7), i2 = Rng::derived(opt.seed, 8);
  const auto old_m =
      model::make_embedding_model(model::Method::old, model::Mlp::init(4, 6, 5, i1), model::ClassifierHead::init(3, 5, i1));
  const auto new_m = model::make_embedding_model(model::Method::new_independent, model::Mlp::init(4, 6, 7, i2),
                                                 model::ClassifierHead::init(3, 7, i2));
  const auto ub = model::make_upper_bound(old_m, new_m, {});
  data::Dataset ds;
  ds.class_count = 3;
  for (std::size_t i = 0; i < 30; ++i) ds.samples.push_back({rng.normal_vector(4), static_cast<std::uint32_t>(i % 3)});
  const auto old_recs = train::embed_records(old_m, ds, "old");
  const auto gal = retrieval::to_gallery(old_recs);
  const auto direct = retrieval::evaluate("q/old", old_recs, gal);
  const auto via_ub = retrieval::evaluate("q/old", train::embed_records(ub, ds, "ub"), gal);
  const bool ok = direct == via_ub;
  return {"upper-bound-truncation", ok, ok ? "reports identical" : "reports differ"};
}

inline CheckLine forward_invariants(const Options& opt) {
  Rng rng = Rng::derived(opt.seed, 9);
  const model::Bt2Config cfg{8, 8, 2, 2.0, false};
  const auto bm = [&] {
    auto b = model::Bt2Model::init(cfg, 5, 9, 3, rng);
    for (double& t : b.b1.theta) t = rng.normal();
    for (double& t : b.b2.theta) t = rng.normal();
    return b;
  }();
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto t = model::bt2_forward(bm, rng.normal_vector(5));
    worst = std::max({worst, std::abs(linalg::norm(t.phi3) - 1.0), std::abs(linalg::norm(t.phi4) - cfg.c_scale),
                      std::abs(linalg::dot(t.phi_new, t.phi_new) - (1.0 + cfg.c_scale * cfg.c_scale))});
  }
  return {"forward-invariants", worst <= 1e-8, "max norm deviation " + num(worst)};
}

}  // namespace detail

inline std::vector<CheckLine> run(const Options& opt = {}) {
  std::vector<CheckLine> out;
  out.push_back(detail::orthonormality(opt));
  out.push_back(detail::dot_preservation(opt));
  for (auto& line : detail::gradients(opt)) out.push_back(std::move(line));
  out.push_back(detail::metric_oracles(opt));
  out.push_back(detail::lemma1(opt));
  out.push_back(detail::round_trips(opt));
  out.push_back(detail::upper_bound_truncation(opt));
  out.push_back(detail::forward_invariants(opt));
  return out;
}

inline bool all_passed(const std::vector<CheckLine>& lines) {
  return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.passed; });
}

}  // namespace bt2::selfcheck
