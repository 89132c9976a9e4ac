#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bt2/data.hpp"
#include "bt2/errors.hpp"
#include "bt2/linalg.hpp"
#include "bt2/model.hpp"
#include "bt2/random.hpp"
#include "bt2/retrieval.hpp"
#include "bt2/train.hpp"

namespace bt2::analysis {

using model::Method;
using retrieval::EvalReport;

// ---------------------------------------------------------------------------
// Angular bound for a query near the cone of two same-class gallery items

/// (1 - eps^2) * (1 - (1 - sqrt(1 - eps^2)) / sqrt(1 - eps^2))
inline double lemma1_bound(double eps) {
  if (!(eps >= 0.0) || !(eps < 1.0)) throw DomainError("lemma1_bound: eps must lie in [0, 1)");
  const double s = std::sqrt(1.0 - eps * eps);
  return (1.0 - eps * eps) * (1.0 - (1.0 - s) / s);
}

/// Two same-class gallery embeddings and an old query embedding
/// a*x1 + b*x2 plus an off-plane component of norm eps.
struct CounterexampleInstance {
  double eps = 0.0;
  std::vector<double> phi_old_x1;
  std::vector<double> phi_old_x2;
  std::vector<double> phi_old_xbar;
};

namespace detail {

inline std::vector<double> cross3(std::span<const double> a, std::span<const double> b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

}  // namespace detail

/// Random instance in dimension 3.
inline CounterexampleInstance sample_instance(double eps, Rng& rng) {
  CounterexampleInstance inst;
  inst.eps = eps;
  std::vector<double> normal;
  for (;;) {
    inst.phi_old_x1 = rng.unit_vector(3);
    inst.phi_old_x2 = rng.unit_vector(3);
    normal = detail::cross3(inst.phi_old_x1, inst.phi_old_x2);
    if (linalg::norm(normal) > 1e-3) break;
  }
  normal = linalg::normalized(normal);
  if (rng.uniform() < 0.5)
    for (double& v : normal) v = -v;
  double a = 0.0, b = 0.0;
  while (a <= 0.0) a = rng.uniform();
  while (b <= 0.0) b = rng.uniform();
  std::vector<double> in_plane(3);
  for (int i = 0; i < 3; ++i) in_plane[i] = a * inst.phi_old_x1[i] + b * inst.phi_old_x2[i];
  in_plane = linalg::normalized(in_plane);
  const double planar = std::sqrt(1.0 - eps * eps);
  inst.phi_old_xbar.resize(3);
  for (int i = 0; i < 3; ++i) inst.phi_old_xbar[i] = planar * in_plane[i] + eps * normal[i];
  return inst;
}

/// Both compatibility inequalities: the candidate is at least as close (cosine)
/// to each gallery item as the old query embedding.
inline bool satisfies_compatibility(const CounterexampleInstance& inst, std::span<const double> phi_new_xbar) {
  return linalg::dot(phi_new_xbar, inst.phi_old_x1) >= linalg::dot(inst.phi_old_xbar, inst.phi_old_x1) &&
         linalg::dot(phi_new_xbar, inst.phi_old_x2) >= linalg::dot(inst.phi_old_xbar, inst.phi_old_x2);
}

struct Lemma1Result {
  double eps = 0.0;
  std::size_t trials = 0;
  std::size_t kept = 0;
  double worst_cosine = 1.0;
  std::size_t violations = 0;
  double bound = 1.0;
  bool inconclusive = false;
  std::vector<double> worst_candidate;  // the kept candidate with the smallest cosine
  CounterexampleInstance worst_instance;
};

inline constexpr double kLemma1Tolerance = 1e-9;

/// Rejection search: per trial draw an instance and one candidate phi_new(xbar)
/// (uniform on the sphere for even trials, a Gaussian perturbation of
/// phi_old(xbar) with scale 3*eps for odd trials), keep it if compatible, and
/// compare its cosine to phi_old(xbar) against the closed-form bound.
inline Lemma1Result lemma1_search(double eps, std::size_t trials, std::uint64_t seed) {
  if (trials < 1) throw ConfigError("lemma1_search: trials must be >= 1");
  Lemma1Result out;
  out.eps = eps;
  out.trials = trials;
  out.bound = lemma1_bound(eps);
  const double spread = std::max(3.0 * eps, 1e-3);
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = Rng::derived(seed, t);
    const CounterexampleInstance inst = sample_instance(eps, rng);
    std::vector<double> cand;
    if (t % 2 == 0) {
      cand = rng.unit_vector(3);
    } else {
      cand = inst.phi_old_xbar;
      for (double& v : cand) v += spread * rng.normal();
      if (linalg::norm(cand) < 1e-12) continue;
      cand = linalg::normalized(cand);
    }
    if (!satisfies_compatibility(inst, cand)) continue;
    ++out.kept;
    const double c = linalg::dot(cand, inst.phi_old_xbar);
    if (c < out.worst_cosine || out.worst_candidate.empty()) {
      out.worst_cosine = c;
      out.worst_candidate = cand;
      out.worst_instance = inst;
    }
    if (c < out.bound - kLemma1Tolerance) ++out.violations;
  }
  out.inconclusive = out.kept == 0;
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end pipeline on synthetic data

struct PipelineConfig {
  data::SyntheticSpec data;
  double old_fraction = 0.5;
  train::TrainSettings train;
  losses::LossConfig loss;
  model::Bt2Config bt2;
  model::UpperBoundConfig upper_bound;
  std::vector<Method> methods{Method::bct, Method::bct_pad, Method::contrast, Method::bt2, Method::upper_bound};
};

struct PipelineResult {
  std::vector<EvalReport> reports;
  std::map<std::string, model::Model> models;

  const EvalReport& report(const std::string& case_name) const {
    for (const auto& r : reports)
      if (r.case_name == case_name) return r;
    throw InputError("no report for case '" + case_name + "'");
  }
};

inline std::uint64_t model_seed(std::uint64_t seed, Method m) {
  return Rng::derived(seed, static_cast<std::uint64_t>(m) + 1).next();
}

inline train::MethodConfig method_config(const PipelineConfig& cfg, Method m, std::uint64_t seed) {
  train::MethodConfig mc;
  mc.method = m;
  mc.train = cfg.train;
  mc.train.seed = model_seed(seed, m);
  mc.loss = cfg.loss;
  mc.bt2 = cfg.bt2;
  mc.upper_bound = cfg.upper_bound;
  return mc;
}

inline model::Model train_or_throw(const train::MethodConfig& mc, const data::Dataset& ds, const model::Model* old,
                                   const model::Model* indep) {
  auto r = train::train(mc, ds, old, indep);
  if (r.divergence) throw DivergenceError(std::string(model::to_string(mc.method)) + ": " + *r.divergence);
  return std::move(r.model);
}

/// Trains old (on the old split) and new-independent, then every requested
/// method; evaluates "X/X" and "X/old" on the validation split for each.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, std::uint64_t seed) {
  const data::SplitData split = data::gen_synthetic(cfg.data);
  const auto [old_train, full_train] = data::split_old_new(split.train, cfg.old_fraction);
  const data::Dataset& val = split.validation;

  PipelineResult result;
  const model::Model old = train_or_throw(method_config(cfg, Method::old, seed), old_train, nullptr, nullptr);
  const model::Model indep =
      train_or_throw(method_config(cfg, Method::new_independent, seed), full_train, nullptr, nullptr);
  result.models.emplace("old", old);
  result.models.emplace("new-independent", indep);

  const auto old_records = train::embed_records(old, val, "old");
  const auto old_gallery = retrieval::to_gallery(old_records);
  const auto indep_records = train::embed_records(indep, val, "new-independent");
  result.reports.push_back(retrieval::evaluate("old/old", old_records, old_gallery));
  result.reports.push_back(
      retrieval::evaluate("new-independent/new-independent", indep_records, retrieval::to_gallery(indep_records)));
  result.reports.push_back(retrieval::evaluate("new-independent/old", indep_records, old_gallery));

  for (Method m : cfg.methods) {
    if (m == Method::old || m == Method::new_independent) continue;
    const model::Model trained = train_or_throw(method_config(cfg, m, seed), full_train, &old, &indep);
    const std::string tag(model::to_string(m));
    const auto recs = train::embed_records(trained, val, tag);
    result.reports.push_back(retrieval::evaluate(tag + "/" + tag, recs, retrieval::to_gallery(recs)));
    result.reports.push_back(retrieval::evaluate(tag + "/old", recs, old_gallery));
    result.models.emplace(tag, trained);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dimension ablation

struct AblationRow {
  std::size_t d = 0;
  std::size_t embedding_dim = 0;
  EvalReport new_new;
  EvalReport new_old;
  std::optional<std::string> error;
};

/// One basis-transformation model per extra-dimension count, sharing the old and
/// independent models and the seed.
inline std::vector<AblationRow> run_ablation(const std::vector<std::size_t>& dims, const PipelineConfig& base,
                                             std::uint64_t seed) {
  if (dims.empty()) throw ConfigError("ablation: no dimensions given");
  const data::SplitData split = data::gen_synthetic(base.data);
  const auto [old_train, full_train] = data::split_old_new(split.train, base.old_fraction);
  const data::Dataset& val = split.validation;
  const model::Model old = train_or_throw(method_config(base, Method::old, seed), old_train, nullptr, nullptr);
  const model::Model indep =
      train_or_throw(method_config(base, Method::new_independent, seed), full_train, nullptr, nullptr);
  const auto old_records = train::embed_records(old, val, "old");
  const auto old_gallery = retrieval::to_gallery(old_records);

  std::vector<AblationRow> rows;
  for (std::size_t d : dims) {
    AblationRow row;
    row.d = d;
    try {
      train::MethodConfig mc = method_config(base, Method::bt2, seed);
      mc.bt2.d = d;
      const model::Model m = train_or_throw(mc, full_train, &old, &indep);
      row.embedding_dim = m.embedding_dim();
      const std::string tag = "bt2+" + std::to_string(d);
      const auto recs = train::embed_records(m, val, tag);
      row.new_new = retrieval::evaluate(tag + "/" + tag, recs, retrieval::to_gallery(recs));
      row.new_old = retrieval::evaluate(tag + "/old", recs, old_gallery);
    } catch (const Error& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Series of model updates

struct SeriesStage {
  Method method = Method::bt2;  // bt2 or bct for stages after the first
  std::size_t d = 4;            // extra dimensions added by a bt2 stage
};

struct SeriesPlan {
  std::vector<SeriesStage> stages;  // stages[0] is the initial old model (method ignored)
};

struct SeriesResult {
  std::vector<std::size_t> stage_dims;
  std::vector<EvalReport> reports;  // query stage i >= gallery stage j
  std::optional<std::string> error;

  const EvalReport& report(std::size_t query_stage, std::size_t gallery_stage) const {
    const std::string name = "stage" + std::to_string(query_stage) + "/stage" + std::to_string(gallery_stage);
    for (const auto& r : reports)
      if (r.case_name == name) return r;
    throw InputError("no report for " + name);
  }
};

/// Stage 0 is an old model of dimension base.bt2.n trained on the old split.
/// Stage k trains against stage k-1's full embedding as its old model: a bt2
/// stage uses n = m = dim(k-1) and adds d; a bct stage keeps dim(k-1). Stages
/// classify on their final embedding so the next stage has a head to match.
inline SeriesResult run_series(const SeriesPlan& plan, const PipelineConfig& base, std::uint64_t seed) {
  if (plan.stages.size() < 2) throw ConfigError("series: need at least 2 stages");
  const data::SplitData split = data::gen_synthetic(base.data);
  const auto [old_train, full_train] = data::split_old_new(split.train, base.old_fraction);
  const data::Dataset& val = split.validation;

  SeriesResult result;
  std::vector<model::Model> stages;
  std::vector<std::vector<retrieval::EmbeddingRecord>> records;
  try {
    for (std::size_t k = 0; k < plan.stages.size(); ++k) {
      const std::uint64_t stage_seed = Rng::derived(seed, 1000 + k).next();
      if (k == 0) {
        stages.push_back(train_or_throw(method_config(base, Method::old, stage_seed), old_train, nullptr, nullptr));
      } else {
        const model::Model& prev = stages.back();
        const std::size_t prev_dim = prev.embedding_dim();
        const SeriesStage& st = plan.stages[k];
        if (st.method == Method::bt2) {
          train::MethodConfig indep_cfg = method_config(base, Method::new_independent, stage_seed);
          indep_cfg.bt2.m = prev_dim;
          const model::Model indep = train_or_throw(indep_cfg, full_train, nullptr, nullptr);
          train::MethodConfig mc = method_config(base, Method::bt2, stage_seed);
          mc.bt2.n = prev_dim;
          mc.bt2.m = prev_dim;
          mc.bt2.d = st.d;
          mc.bt2.cls_on_final = true;
          stages.push_back(train_or_throw(mc, full_train, &prev, &indep));
        } else if (st.method == Method::bct) {
          train::MethodConfig mc = method_config(base, Method::bct, stage_seed);
          mc.bt2.n = prev_dim;
          stages.push_back(train_or_throw(mc, full_train, &prev, nullptr));
        } else {
          throw ConfigError("series stages after the first must be bt2 or bct");
        }
      }
      result.stage_dims.push_back(stages.back().embedding_dim());
      records.push_back(train::embed_records(stages.back(), val, "stage" + std::to_string(k)));
      for (std::size_t j = 0; j <= k; ++j) {
        const std::string name = "stage" + std::to_string(k) + "/stage" + std::to_string(j);
        result.reports.push_back(retrieval::evaluate(name, records[k], retrieval::to_gallery(records[j])));
      }
    }
  } catch (const Error& e) {
    result.error = e.what();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Multi-seed statistics

struct MetricStats {
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> values;
};

/// Sample mean and (n-1) standard deviation.
inline MetricStats summarize(const std::string& name, const std::vector<double>& values) {
  if (values.size() < 2) throw ConfigError("summarize: need at least 2 values");
  MetricStats s;
  s.metric = name;
  s.values = values;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return s;
}

struct SeedsResult {
  std::vector<std::uint64_t> seeds;
  std::vector<PipelineResult> runs;
  std::vector<MetricStats> stats;  // "<case>:<metric>" in report order
};

inline SeedsResult run_seeds(const std::vector<std::uint64_t>& seeds, const PipelineConfig& cfg) {
  if (seeds.size() < 2) throw ConfigError("seeds: need at least 2 seeds");
  SeedsResult out;
  out.seeds = seeds;
  for (std::uint64_t s : seeds) {
    out.runs.push_back(run_pipeline(cfg, s));
    out.runs.back().models.clear();
  }
  for (std::size_t i = 0; i < out.runs.front().reports.size(); ++i) {
    const std::string case_name = out.runs.front().reports[i].case_name;
    for (retrieval::Metric m : {retrieval::Metric::cmc1, retrieval::Metric::cmc5, retrieval::Metric::map}) {
      std::vector<double> values;
      for (const auto& run : out.runs) values.push_back(retrieval::metric_value(run.reports[i], m));
      out.stats.push_back(summarize(case_name + ":" + retrieval::to_string(m), values));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV output

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "d,case,cmc1,cmc5,map\n";
  for (const auto& r : rows) {
    if (r.error) {
      out += std::to_string(r.d) + ",error,,,\n";
      continue;
    }
    for (const EvalReport* e : {&r.new_new, &r.new_old}) {
      out += std::to_string(r.d) + "," + e->case_name + "," + fmt(e->cmc1) + "," + fmt(e->cmc5) + "," + fmt(e->map) +
             "\n";
    }
  }
  return out;
}

inline std::string series_csv(const SeriesResult& s) {
  std::string out = "query_stage,gallery_stage,cmc1,cmc5,map\n";
  for (std::size_t k = 0; k < s.stage_dims.size(); ++k) {
    for (std::size_t j = 0; j <= k; ++j) {
      const EvalReport& e = s.report(k, j);
      out += std::to_string(k) + "," + std::to_string(j) + "," + fmt(e.cmc1) + "," + fmt(e.cmc5) + "," + fmt(e.map) +
             "\n";
    }
  }
  return out;
}

inline std::string seeds_csv(const SeedsResult& r) {
  std::string out = "metric,mean,std\n";
  for (const auto& s : r.stats) out += s.metric + "," + fmt(s.mean) + "," + fmt(s.std) + "\n";
  return out;
}

}  // namespace bt2::analysis
