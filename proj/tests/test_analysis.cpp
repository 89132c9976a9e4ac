#include <gtest/gtest.h>

#include <cmath>

#include "bt2/analysis.hpp"
#include "bt2/checkpoint.hpp"
#include "oracles.hpp"

using namespace bt2;
using model::Method;

namespace {

analysis::PipelineConfig tiny() {
  analysis::PipelineConfig c;
  c.data.num_classes = 4;
  c.data.per_class = 20;
  c.data.feature_dim = 6;
  c.train.epochs = 3;
  c.train.batch_size = 16;
  c.train.hidden = 12;
  c.bt2 = {6, 6, 2, 2.0, false};
  return c;
}

}  // namespace

TEST(AngularBound, BoundValues) {
  EXPECT_EQ(analysis::lemma1_bound(0.0), 1.0);
  EXPECT_NEAR(analysis::lemma1_bound(0.2), 0.94020410, 1e-8);
  // With s = sqrt(1 - eps^2) the bound is 2s^2 - s, decreasing while s > 1/4.
  const double turn = std::sqrt(15.0) / 4.0;
  double prev = 2.0;
  for (int i = 0; i < 1000; ++i) {
    const double b = analysis::lemma1_bound(turn * i / 999.0);
    EXPECT_LT(b, prev);
    prev = b;
  }
  EXPECT_NEAR(analysis::lemma1_bound(turn), -0.125, 1e-12);
  EXPECT_GT(analysis::lemma1_bound(0.999), analysis::lemma1_bound(turn));
  EXPECT_THROW(analysis::lemma1_bound(1.0), DomainError);
  EXPECT_THROW(analysis::lemma1_bound(-0.1), DomainError);
}

TEST(AngularBound, InstanceGeometry) {
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto inst = analysis::sample_instance(0.1, rng);
    const auto n = oracle::unit({inst.phi_old_x1[1] * inst.phi_old_x2[2] - inst.phi_old_x1[2] * inst.phi_old_x2[1],
                                 inst.phi_old_x1[2] * inst.phi_old_x2[0] - inst.phi_old_x1[0] * inst.phi_old_x2[2],
                                 inst.phi_old_x1[0] * inst.phi_old_x2[1] - inst.phi_old_x1[1] * inst.phi_old_x2[0]});
    EXPECT_NEAR(oracle::dotv(inst.phi_old_xbar, inst.phi_old_xbar), 1.0, 1e-12);
    EXPECT_NEAR(std::abs(oracle::dotv(inst.phi_old_xbar, n)), 0.1, 1e-12);
    EXPECT_TRUE(analysis::satisfies_compatibility(inst, inst.phi_old_xbar));
  }
}

// Reflecting phi_old(xbar) through the plane of the two gallery items keeps both
// inner products, so it satisfies both inequalities with cosine 1 - 2 eps^2.
TEST(AngularBound, MirrorCandidateIsCompatible) {
  Rng rng(2);
  for (double eps : {0.01, 0.05, 0.1, 0.2, 0.3}) {
    const auto inst = analysis::sample_instance(eps, rng);
    const auto n = oracle::unit({inst.phi_old_x1[1] * inst.phi_old_x2[2] - inst.phi_old_x1[2] * inst.phi_old_x2[1],
                                 inst.phi_old_x1[2] * inst.phi_old_x2[0] - inst.phi_old_x1[0] * inst.phi_old_x2[2],
                                 inst.phi_old_x1[0] * inst.phi_old_x2[1] - inst.phi_old_x1[1] * inst.phi_old_x2[0]});
    const double off = oracle::dotv(inst.phi_old_xbar, n);
    std::vector<double> mirror = inst.phi_old_xbar;
    for (int i = 0; i < 3; ++i) mirror[i] -= 2.0 * off * n[i];
    EXPECT_NEAR(oracle::dotv(mirror, inst.phi_old_x1), oracle::dotv(inst.phi_old_xbar, inst.phi_old_x1), 1e-12);
    EXPECT_NEAR(oracle::dotv(mirror, inst.phi_old_x2), oracle::dotv(inst.phi_old_xbar, inst.phi_old_x2), 1e-12);
    EXPECT_NEAR(oracle::dotv(mirror, inst.phi_old_xbar), 1.0 - 2.0 * eps * eps, 1e-12);
  }
}

TEST(AngularBound, SearchIsDeterministic) {
  const auto a = analysis::lemma1_search(0.1, 2000, 3);
  const auto b = analysis::lemma1_search(0.1, 2000, 3);
  EXPECT_EQ(a.kept, b.kept);
  EXPECT_EQ(a.worst_cosine, b.worst_cosine);
  EXPECT_EQ(a.violations, b.violations);
  EXPECT_GT(a.kept, 0u);
  EXPECT_FALSE(a.inconclusive);
  EXPECT_THROW(analysis::lemma1_search(0.1, 0, 3), ConfigError);
  // At eps = 0 the query lies in the cone, and only candidates at least as close to both items survive.
  const auto zero = analysis::lemma1_search(0.0, 2000, 3);
  EXPECT_EQ(zero.bound, 1.0);
}

TEST(Stats, Summarize) {
  const auto s = analysis::summarize("x", {0.4, 0.6});
  EXPECT_DOUBLE_EQ(s.mean, 0.5);
  EXPECT_NEAR(s.std, 0.14142135623730950, 1e-15);
  EXPECT_EQ(analysis::summarize("y", {0.3, 0.3, 0.3}).std, 0.0);
  EXPECT_THROW(analysis::summarize("z", {1.0}), ConfigError);
}

TEST(Pipeline, ReportsEveryCaseAndIsDeterministic) {
  auto cfg = tiny();
  const auto a = analysis::run_pipeline(cfg, 5);
  const auto b = analysis::run_pipeline(cfg, 5);
  ASSERT_EQ(a.reports.size(), 3u + 2u * cfg.methods.size());
  EXPECT_EQ(a.reports, b.reports);
  for (const auto& [name, m] : a.models) EXPECT_EQ(checkpoint::encode(m), checkpoint::encode(b.models.at(name)));
  // The upper bound truncated against the old gallery is the old model exactly.
  auto ub = a.report("upper-bound/old");
  ub.case_name = "old/old";
  EXPECT_EQ(ub, a.report("old/old"));
  EXPECT_THROW(a.report("nope"), InputError);
}

TEST(Pipeline, AblationRecordsFailures) {
  auto cfg = tiny();
  const auto rows = analysis::run_ablation({0, 2, 7}, cfg, 1);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[0].error.has_value());
  EXPECT_FALSE(rows[1].error.has_value());
  EXPECT_EQ(rows[1].embedding_dim, 8u);
  EXPECT_TRUE(rows[2].error.has_value());  // d > n
  const std::string csv = analysis::ablation_csv(rows);
  EXPECT_EQ(csv.rfind("d,case,cmc1,cmc5,map\n", 0), 0u);
  EXPECT_NE(csv.find("bt2+2/bt2+2"), std::string::npos);
}

TEST(Pipeline, SeriesGrowsDimensions) {
  auto cfg = tiny();
  analysis::SeriesPlan plan{{{Method::old, 0}, {Method::bt2, 2}, {Method::bt2, 3}, {Method::bct, 0}}};
  const auto s = analysis::run_series(plan, cfg, 2);
  ASSERT_FALSE(s.error.has_value()) << *s.error;
  EXPECT_EQ(s.stage_dims, (std::vector<std::size_t>{6, 8, 11, 11}));
  EXPECT_NO_THROW(s.report(3, 0));
  EXPECT_NO_THROW(s.report(2, 2));
  const auto again = analysis::run_series(plan, cfg, 2);
  EXPECT_EQ(analysis::series_csv(s), analysis::series_csv(again));
  EXPECT_THROW(analysis::run_series({{{Method::old, 0}}}, cfg, 2), ConfigError);
}

TEST(Pipeline, SeedsSummaries) {
  auto cfg = tiny();
  cfg.methods = {Method::bt2};
  const auto r = analysis::run_seeds({1, 2}, cfg);
  EXPECT_EQ(r.stats.size(), 3u * (3u + 2u));
  EXPECT_EQ(r.stats.front().metric, "old/old:cmc1");
  EXPECT_EQ(r.stats.front().values.size(), 2u);
  EXPECT_EQ(analysis::seeds_csv(r).rfind("metric,mean,std\n", 0), 0u);
}
