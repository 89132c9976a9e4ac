#include <gtest/gtest.h>

#include <cmath>

#include "bt2/linalg.hpp"
#include "bt2/random.hpp"
#include "bt2/retrieval.hpp"
#include "oracles.hpp"

using namespace bt2;
using retrieval::EmbeddingRecord;
using retrieval::Gallery;

namespace {

double neg_cos(const std::vector<double>& a, const std::vector<double>& b) { return -oracle::cosine_truncated(a, b); }

std::vector<EmbeddingRecord> random_records(std::size_t n, std::size_t dim, std::size_t classes, Rng& rng,
                                            std::uint64_t first_id = 0, const std::string& tag = "m") {
  std::vector<EmbeddingRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({first_id + i, static_cast<std::uint32_t>(rng.below(classes)), rng.normal_vector(dim), tag});
  }
  return out;
}

std::vector<oracle::Item> items(const std::vector<EmbeddingRecord>& r) {
  std::vector<oracle::Item> out;
  for (const auto& e : r) out.push_back({e.id, e.label, e.vector});
  return out;
}

}  // namespace

TEST(Retrieval, DistanceTruncatesLongerVector) {
  const std::vector<double> a{1.0, 0.0, 5.0}, b{1.0, 0.0};
  EXPECT_DOUBLE_EQ(retrieval::distance(a, b), -1.0);
  EXPECT_DOUBLE_EQ(retrieval::distance(std::vector<double>{0.0, 1.0}, b), 0.0);
  EXPECT_NEAR(retrieval::distance(std::vector<double>{3.0, 4.0}, std::vector<double>{4.0, 3.0, 9.0}), -24.0 / 25.0,
              1e-15);
  EXPECT_THROW(retrieval::distance(std::vector<double>{0.0, 0.0}, b), DegenerateVectorError);
}

TEST(Retrieval, TiesBreakByIdAndSelfIsExcluded) {
  const Gallery g = retrieval::make_gallery({{7, 0, {1.0, 0.0}, "m"},
                                              {3, 0, {2.0, 0.0}, "m"},
                                              {5, 1, {0.0, 1.0}, "m"},
                                              {1, 1, {1.0, 0.0}, "m"}});
  const EmbeddingRecord q{3, 0, {1.0, 0.0}, "m"};
  EXPECT_EQ(retrieval::rank_gallery(q, g), (std::vector<std::uint64_t>{1, 7, 5}));
  EXPECT_EQ(retrieval::rank_gallery(q, g, false), (std::vector<std::uint64_t>{1, 3, 7, 5}));
}

TEST(Retrieval, GalleryValidation) {
  Gallery g;
  g.add({1, 0, {1.0, 2.0}, "a"});
  EXPECT_THROW(g.add({1, 0, {1.0, 2.0}, "a"}), InputError);
  EXPECT_THROW(g.add({2, 0, {1.0}, "a"}), InputError);
  EXPECT_THROW(g.add({3, 0, {std::nan(""), 1.0}, "a"}), InputError);
  EXPECT_NO_THROW(g.add({4, 0, {1.0, 2.0, 3.0}, "b"}));
}

TEST(Retrieval, AveragePrecisionHandExample) {
  EXPECT_EQ(retrieval::average_precision({true, false, true}), 5.0 / 6.0);
  EXPECT_EQ(retrieval::average_precision({true, true}), 1.0);
  EXPECT_EQ(retrieval::average_precision({false, false}), 0.0);
}

TEST(Retrieval, MetricsMatchBruteForceOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(99);
    const std::size_t dim = 1 + rng.below(6);
    auto recs = random_records(n, dim, 1 + rng.below(6), rng);
    // Duplicate some vectors so ties occur.
    for (std::size_t i = 1; i < n; i += 7) recs[i].vector = recs[i - 1].vector;
    const Gallery g = retrieval::to_gallery(recs);
    const auto it = items(recs);
    for (bool self : {true, false}) {
      const auto report = retrieval::evaluate("m/m", recs, g, {self, {}});
      retrieval::EvalOptions all{self};
      const auto full = retrieval::evaluate("m/m", recs, g, all);
      EXPECT_EQ(full.cmc1, oracle::cmc(it, it, 1, neg_cos, self));
      EXPECT_EQ(full.cmc5, oracle::cmc(it, it, 5, neg_cos, self));
      EXPECT_EQ(full.map, oracle::mean_ap(it, it, neg_cos, self));
      EXPECT_EQ(report.cmc1, 0.0);
    }
  }
}

TEST(Retrieval, QueriesWithoutRelevantItemsAreExcludedFromMap) {
  const Gallery g = retrieval::make_gallery({{1, 0, {1.0, 0.0}, "m"}, {2, 0, {0.0, 1.0}, "m"}});
  const std::vector<EmbeddingRecord> q{{10, 0, {1.0, 0.1}, "m"}, {11, 5, {1.0, 0.0}, "m"}};
  const auto r = retrieval::evaluate("q/g", q, g);
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.excluded_queries, 1u);
  EXPECT_EQ(r.cmc1, 0.5);
}

TEST(Retrieval, LabelFreeGalleryRejected) {
  Rng rng(5);
  const auto recs = random_records(5, 3, 2, rng);
  const Gallery g = retrieval::to_gallery(recs, false);
  EXPECT_THROW(retrieval::evaluate("a/b", recs, g), MetricError);
  EXPECT_THROW(retrieval::evaluate("a/b", recs, Gallery{}), InputError);
}

TEST(Retrieval, ParseMetrics) {
  EXPECT_EQ(retrieval::parse_metrics("cmc1,map"), (std::vector<retrieval::Metric>{retrieval::Metric::cmc1,
                                                                                    retrieval::Metric::map}));
  EXPECT_THROW(retrieval::parse_metrics("cmc2"), ConfigError);
}

TEST(Retrieval, RankingInvariantUnderBasisChange) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t dim = 2 + rng.below(10);
    auto p = linalg::SkewParams::zeros(dim);
    for (double& t : p.theta) t = rng.normal();
    const auto basis = linalg::expm_skew(linalg::build_skew(p));
    auto recs = random_records(40, dim, 4, rng);
    auto rotated = recs;
    for (auto& r : rotated) r.vector = linalg::apply(basis.matrix(), r.vector);
    const Gallery g = retrieval::to_gallery(recs), gr = retrieval::to_gallery(rotated);
    for (std::size_t qi = 0; qi < recs.size(); ++qi) {
      const auto a = retrieval::rank_gallery_detailed(recs[qi], g);
      bool separated = true;
      for (std::size_t i = 1; i < a.size(); ++i) separated = separated && a[i].distance - a[i - 1].distance > 1e-6;
      if (!separated) continue;
      EXPECT_EQ(retrieval::rank_gallery(recs[qi], g), retrieval::rank_gallery(rotated[qi], gr));
    }
  }
}

TEST(Retrieval, BackwardCompatVerdicts) {
  Rng rng(7);
  const auto olds = random_records(30, 4, 3, rng, 0, "old");
  const Gallery g = retrieval::to_gallery(olds);
  // Identical query embeddings: every comparison ties, so compatible with no strict violations.
  auto same = olds;
  for (auto& r : same) r.model_tag = "new";
  const auto v = retrieval::check_backward_compat(olds, same, g, {retrieval::Metric::cmc1, retrieval::Metric::map});
  EXPECT_TRUE(v.relaxed_pass);
  EXPECT_EQ(v.strict_violations, 0u);
  EXPECT_EQ(v.strict_pairs, 30u * 29u);

  // Longer new vectors whose prefix equals the old vector behave the same under truncation.
  auto longer = olds;
  for (auto& r : longer) r.vector.insert(r.vector.end(), {9.0, -9.0});
  EXPECT_TRUE(retrieval::check_backward_compat(olds, longer, g, {retrieval::Metric::cmc1}).relaxed_pass);

  // Random queries are worse than the old model; with generous slack they pass.
  auto noise = olds;
  for (auto& r : noise) r.vector = rng.normal_vector(4);
  const auto bad = retrieval::check_backward_compat(olds, noise, g, {retrieval::Metric::map});
  const auto lenient = retrieval::check_backward_compat(olds, noise, g, {retrieval::Metric::map}, 1.0);
  EXPECT_TRUE(lenient.relaxed_pass);
  EXPECT_EQ(bad.relaxed_pass, bad.relaxed[0].candidate >= bad.relaxed[0].reference);
  EXPECT_GT(bad.strict_violations, 0u);

  auto misaligned = olds;
  misaligned.pop_back();
  EXPECT_THROW(retrieval::check_backward_compat(olds, misaligned, g, {retrieval::Metric::map}), InputError);
}

TEST(Retrieval, NotHurtingVerdict) {
  Rng rng(8);
  const auto a = random_records(20, 3, 2, rng);
  const Gallery ga = retrieval::to_gallery(a);
  const auto v = retrieval::check_not_hurting(a, ga, a, ga, retrieval::Metric::cmc1);
  EXPECT_TRUE(v.pass);
  EXPECT_EQ(v.compatible, v.independent);
}
