#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bt2/errors.hpp"

namespace bt2::retrieval {

struct EmbeddingRecord {
  std::uint64_t id = 0;
  std::uint32_t label = 0;
  std::vector<double> vector;
  std::string model_tag;
};

/// Stored embeddings that queries are matched against.
class Gallery {
 public:
  Gallery() = default;
  explicit Gallery(bool labels_present) : labels_present_(labels_present) {}

  void add(EmbeddingRecord r) {
    for (double v : r.vector) {
      if (!std::isfinite(v)) throw InputError("gallery: non-finite value in record " + std::to_string(r.id));
    }
    if (!ids_.insert(r.id).second) throw InputError("gallery: duplicate id " + std::to_string(r.id));
    auto [it, fresh] = dims_.emplace(r.model_tag, r.vector.size());
    if (!fresh && it->second != r.vector.size()) {
      throw InputError("gallery: inconsistent dimension for model tag '" + r.model_tag + "'");
    }
    records_.push_back(std::move(r));
  }

  const std::vector<EmbeddingRecord>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }
  bool labels_present() const noexcept { return labels_present_; }
  void set_labels_present(bool v) { labels_present_ = v; }
  const std::map<std::string, std::size_t>& dims() const noexcept { return dims_; }

 private:
  std::vector<EmbeddingRecord> records_;
  std::set<std::uint64_t> ids_;
  std::map<std::string, std::size_t> dims_;
  bool labels_present_ = true;
};

inline Gallery make_gallery(std::vector<EmbeddingRecord> records, bool labels_present = true) {
  Gallery g(labels_present);
  for (auto& r : records) g.add(std::move(r));
  return g;
}

/// Negative cosine similarity after truncating the longer vector to the shorter length.
inline double distance(std::span<const double> a, std::span<const double> b) {
  const std::size_t len = std::min(a.size(), b.size());
  double na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateVectorError("distance: zero vector after truncation");
  double s = 0.0;
  for (std::size_t i = 0; i < len; ++i) s += (a[i] / na) * (b[i] / nb);
  return -std::clamp(s, -1.0, 1.0);
}

struct RankedItem {
  std::uint64_t id;
  std::uint32_t label;
  double distance;
};

/// Gallery sorted by ascending distance, ties by ascending id; the query's own
/// id is dropped when exclude_self is set.
inline std::vector<RankedItem> rank_gallery_detailed(const EmbeddingRecord& query, const Gallery& gallery,
                                                     bool exclude_self = true) {
  std::vector<RankedItem> items;
  items.reserve(gallery.size());
  for (const auto& r : gallery.records()) {
    if (exclude_self && r.id == query.id) continue;
    items.push_back({r.id, r.label, distance(query.vector, r.vector)});
  }
  std::sort(items.begin(), items.end(), [](const RankedItem& x, const RankedItem& y) {
    return x.distance != y.distance ? x.distance < y.distance : x.id < y.id;
  });
  return items;
}

inline std::vector<std::uint64_t> rank_gallery(const EmbeddingRecord& query, const Gallery& gallery,
                                               bool exclude_self = true) {
  std::vector<std::uint64_t> ids;
  for (const auto& item : rank_gallery_detailed(query, gallery, exclude_self)) ids.push_back(item.id);
  return ids;
}

namespace detail {
inline void require_labels(const Gallery& g) {
  if (!g.labels_present()) throw MetricError("gallery has no labels; label-based metrics are undefined");
}
}  // namespace detail

/// Fraction of queries with a same-label item among the top k.
inline double cmc_at_k(std::span<const EmbeddingRecord> queries, const Gallery& gallery, std::size_t k,
                       bool exclude_self = true) {
  if (k < 1) throw DomainError("cmc_at_k: k must be >= 1");
  detail::require_labels(gallery);
  if (queries.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& q : queries) {
    const auto ranked = rank_gallery_detailed(q, gallery, exclude_self);
    const std::size_t top = std::min(k, ranked.size());
    for (std::size_t i = 0; i < top; ++i) {
      if (ranked[i].label == q.label) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

/// All-points average precision of a relevance pattern down a ranking.
/// Accumulated in extended precision and rounded once, so [1,0,1] gives 5.0/6.0 exactly.
inline double average_precision(const std::vector<bool>& relevant) {
  std::size_t found = 0;
  long double sum = 0.0L;
  for (std::size_t r = 0; r < relevant.size(); ++r) {
    if (!relevant[r]) continue;
    ++found;
    sum += static_cast<long double>(found) / static_cast<long double>(r + 1);
  }
  return found == 0 ? 0.0 : static_cast<double>(sum / static_cast<long double>(found));
}

struct MapResult {
  double value = 0.0;
  std::size_t evaluated = 0;
  std::size_t excluded = 0;  // queries whose label never occurs in the gallery
};

inline MapResult mean_average_precision(std::span<const EmbeddingRecord> queries, const Gallery& gallery,
                                        bool exclude_self = true) {
  detail::require_labels(gallery);
  MapResult out;
  double sum = 0.0;
  for (const auto& q : queries) {
    const auto ranked = rank_gallery_detailed(q, gallery, exclude_self);
    std::vector<bool> relevant(ranked.size());
    bool any = false;
    for (std::size_t i = 0; i < ranked.size(); ++i) {
      relevant[i] = ranked[i].label == q.label;
      any = any || relevant[i];
    }
    if (!any) {
      ++out.excluded;
      continue;
    }
    sum += average_precision(relevant);
    ++out.evaluated;
  }
  out.value = out.evaluated == 0 ? 0.0 : sum / static_cast<double>(out.evaluated);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::string case_name;  // "query-tag/gallery-tag"
  double cmc1 = 0.0;
  double cmc5 = 0.0;
  double map = 0.0;
  std::size_t queries = 0;
  std::size_t gallery = 0;
  std::size_t excluded_queries = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

enum class Metric { cmc1, cmc5, map };

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::cmc1: return "cmc1";
    case Metric::cmc5: return "cmc5";
    case Metric::map: return "map";
  }
  return "?";
}

inline std::vector<Metric> parse_metrics(const std::string& list) {
  std::vector<Metric> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "cmc1") out.push_back(Metric::cmc1);
    else if (item == "cmc5") out.push_back(Metric::cmc5);
    else if (item == "map") out.push_back(Metric::map);
    else if (!item.empty()) throw ConfigError("unknown metric '" + item + "'");
  }
  if (out.empty()) throw ConfigError("no metrics requested");
  return out;
}

inline double metric_value(const EvalReport& r, Metric m) {
  switch (m) {
    case Metric::cmc1: return r.cmc1;
    case Metric::cmc5: return r.cmc5;
    case Metric::map: return r.map;
  }
  return 0.0;
}

struct EvalOptions {
  bool exclude_self = true;
  std::vector<Metric> metrics{Metric::cmc1, Metric::cmc5, Metric::map};
};

inline bool wants(const EvalOptions& o, Metric m) {
  return std::find(o.metrics.begin(), o.metrics.end(), m) != o.metrics.end();
}

inline EvalReport evaluate(const std::string& case_name, std::span<const EmbeddingRecord> queries,
                           const Gallery& gallery, const EvalOptions& options = {}) {
  if (gallery.empty()) throw InputError("evaluate: empty gallery");
  EvalReport r;
  r.case_name = case_name;
  r.queries = queries.size();
  r.gallery = gallery.size();
  if (wants(options, Metric::cmc1)) r.cmc1 = cmc_at_k(queries, gallery, 1, options.exclude_self);
  if (wants(options, Metric::cmc5)) r.cmc5 = cmc_at_k(queries, gallery, 5, options.exclude_self);
  if (wants(options, Metric::map)) {
    const MapResult m = mean_average_precision(queries, gallery, options.exclude_self);
    r.map = m.value;
    r.excluded_queries = m.excluded;
  }
  return r;
}

inline Gallery to_gallery(std::span<const EmbeddingRecord> records, bool labels_present = true) {
  return make_gallery({records.begin(), records.end()}, labels_present);
}

// ---------------------------------------------------------------------------
// Compatibility checks

struct MetricComparison {
  Metric metric;
  double candidate;  // M(new/old) or M(new/new)
  double reference;  // M(old/old) or M(new'/new')
  bool pass;
};

struct CompatVerdict {
  std::vector<MetricComparison> relaxed;
  bool relaxed_pass = true;
  std::size_t strict_violations = 0;
  std::size_t strict_pairs = 0;
  double strict_violation_fraction = 0.0;
};

inline constexpr double kStrictTolerance = 1e-12;

namespace detail {
inline std::vector<EmbeddingRecord> sorted_by_id(std::span<const EmbeddingRecord> r) {
  std::vector<EmbeddingRecord> out(r.begin(), r.end());
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}
}  // namespace detail

/// Relaxed check M(new/old) >= M(old/old) - slack per metric, plus the strict
/// pairwise criterion: for query i and gallery item j (i != j), same-label pairs
/// must not move apart and different-label pairs must not move closer.
inline CompatVerdict check_backward_compat(std::span<const EmbeddingRecord> old_query,
                                           std::span<const EmbeddingRecord> new_query, const Gallery& old_gallery,
                                           const std::vector<Metric>& metrics, double slack = 0.0,
                                           bool exclude_self = true) {
  const auto olds = detail::sorted_by_id(old_query);
  const auto news = detail::sorted_by_id(new_query);
  if (olds.size() != news.size()) throw InputError("check_backward_compat: query sets differ in size");
  for (std::size_t i = 0; i < olds.size(); ++i) {
    if (olds[i].id != news[i].id || olds[i].label != news[i].label) {
      throw InputError("check_backward_compat: old and new queries are not aligned by id");
    }
  }
  EvalOptions opts{exclude_self, metrics};
  const EvalReport new_old = evaluate("new/old", news, old_gallery, opts);
  const EvalReport old_old = evaluate("old/old", olds, old_gallery, opts);

  CompatVerdict v;
  for (Metric m : metrics) {
    const double c = metric_value(new_old, m);
    const double r = metric_value(old_old, m);
    const bool pass = c >= r - slack;
    v.relaxed.push_back({m, c, r, pass});
    v.relaxed_pass = v.relaxed_pass && pass;
  }

  for (std::size_t i = 0; i < news.size(); ++i) {
    for (const auto& gj : old_gallery.records()) {
      if (gj.id == news[i].id) continue;
      const double d_new = distance(news[i].vector, gj.vector);
      const double d_old = distance(olds[i].vector, gj.vector);
      const bool violated = news[i].label == gj.label ? d_new > d_old + kStrictTolerance
                                                      : d_new < d_old - kStrictTolerance;
      ++v.strict_pairs;
      if (violated) ++v.strict_violations;
    }
  }
  v.strict_violation_fraction =
      v.strict_pairs == 0 ? 0.0 : static_cast<double>(v.strict_violations) / static_cast<double>(v.strict_pairs);
  return v;
}

struct NotHurtingVerdict {
  Metric metric;
  double compatible;   // M(new/new)
  double independent;  // M(new'/new')
  bool pass;
};

/// Relaxed check M(new/new) >= M(new'/new') - slack.
inline NotHurtingVerdict check_not_hurting(std::span<const EmbeddingRecord> new_query, const Gallery& new_gallery,
                                           std::span<const EmbeddingRecord> independent_query,
                                           const Gallery& independent_gallery, Metric metric, double slack = 0.0,
                                           bool exclude_self = true) {
  EvalOptions opts{exclude_self, {metric}};
  const double a = metric_value(evaluate("new/new", new_query, new_gallery, opts), metric);
  const double b = metric_value(evaluate("new'/new'", independent_query, independent_gallery, opts), metric);
  return {metric, a, b, a >= b - slack};
}

}  // namespace bt2::retrieval
