#include <gtest/gtest.h>

#include <cmath>

#include "bt2/linalg.hpp"
#include "bt2/random.hpp"
#include "oracles.hpp"

using namespace bt2;
using linalg::DenseMatrix;

namespace {

oracle::Mat to_ld(const DenseMatrix& m) {
  oracle::Mat out = oracle::zeros(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

linalg::SkewParams random_params(std::size_t dim, double scale, Rng& rng) {
  auto p = linalg::SkewParams::zeros(dim);
  for (double& t : p.theta) t = scale * rng.normal();
  return p;
}

}  // namespace

TEST(Linalg, MatmulAndTranspose) {
  DenseMatrix a(2, 3, {1, 2, 3, 4, 5, 6});
  DenseMatrix b(3, 2, {7, 8, 9, 10, 11, 12});
  const DenseMatrix c = linalg::matmul(a, b);
  EXPECT_EQ(c, DenseMatrix(2, 2, {58, 64, 139, 154}));
  EXPECT_EQ(linalg::transpose(a), DenseMatrix(3, 2, {1, 4, 2, 5, 3, 6}));
  EXPECT_THROW(linalg::matmul(a, a), ShapeError);
}

TEST(Linalg, BuildSkewLayout) {
  linalg::SkewParams p{3, {1.0, 2.0, 3.0}};
  const DenseMatrix a = linalg::build_skew(p);
  EXPECT_EQ(a, DenseMatrix(3, 3, {0, 1, 2, -1, 0, 3, -2, -3, 0}));
  EXPECT_EQ(linalg::skew_defect(a), 0.0);
  EXPECT_THROW(linalg::build_skew({3, {1.0}}), ShapeError);
  EXPECT_EQ(linalg::SkewParams::param_count(1), 0u);
  EXPECT_EQ(linalg::SkewParams::param_count(64), 2016u);
}

TEST(Linalg, ZeroParamsGiveIdentity) {
  const auto p = linalg::expm_skew(linalg::build_skew(linalg::SkewParams::zeros(5)));
  EXPECT_EQ(p.matrix(), DenseMatrix::identity(5));
}

TEST(Linalg, PlaneRotationClosedForm) {
  for (double t : {0.1, 1.0, 3.0, 10.0}) {
    const auto p = linalg::expm_skew(linalg::build_skew({2, {t}}));
    EXPECT_NEAR(p.matrix()(0, 0), std::cos(t), 1e-13);
    EXPECT_NEAR(p.matrix()(0, 1), std::sin(t), 1e-13);
    EXPECT_NEAR(p.matrix()(1, 0), -std::sin(t), 1e-13);
  }
}

TEST(Linalg, ExpmMatchesLongDoubleTaylor) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    DenseMatrix a(n, n);
    const double scale = trial < 15 ? 0.3 : 3.0;
    for (double& v : a.data()) v = scale * rng.normal();
    const DenseMatrix got = linalg::expm(a);
    const oracle::Mat want = oracle::expm_taylor(to_ld(a));
    long double ref_norm = 0.0L;
    for (const auto& row : want)
      for (auto v : row) ref_norm = std::max(ref_norm, std::fabs(v));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        EXPECT_NEAR(got(i, j), static_cast<double>(want[i][j]), 1e-12 * static_cast<double>(ref_norm) + 1e-14);
  }
}

TEST(Linalg, SkewExponentialIsOrthonormal) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 1 + rng.below(40);
    const auto p = linalg::expm_skew(linalg::build_skew(random_params(n, 2.0, rng)));
    EXPECT_LE(linalg::orthonormality_defect(p.matrix()), 1e-8);
  }
}

TEST(Linalg, ExpmSkewRejectsNonSkew) {
  DenseMatrix a(2, 2, {0.0, 1.0, 1.0, 0.0});
  EXPECT_THROW(linalg::expm_skew(a), DomainError);
  EXPECT_THROW(linalg::expm(DenseMatrix(2, 3)), DomainError);
  DenseMatrix bad(1, 1, {std::nan("")});
  EXPECT_THROW(linalg::expm(bad), DomainError);
}

TEST(Linalg, FaultInjectedSignBreaksOrthonormality) {
  Rng rng(5);
  const auto p = random_params(6, 1.0, rng);
  const DenseMatrix a = linalg::detail::build_skew_signed(p, 1.0);
  EXPECT_GT(linalg::orthonormality_defect(linalg::expm(a)), 1e-3);
  EXPECT_THROW(linalg::expm_skew(a), DomainError);
}

TEST(Linalg, FrechetAdjointMatchesDirectionalDerivative) {
  // <G, d/dt exp(A + tE)> at t = 0 must equal <adjoint(A, G), E>.
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 2 + rng.below(5);
    DenseMatrix a(n, n), g(n, n), e(n, n);
    for (double& v : a.data()) v = rng.normal();
    for (double& v : g.data()) v = rng.normal();
    for (double& v : e.data()) v = rng.normal();
    const double h = 1e-6;
    auto f = [&](double t) {
      DenseMatrix m = a;
      for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] += t * e.data()[i];
      const oracle::Mat x = oracle::expm_taylor(to_ld(m));
      long double s = 0.0L;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) s += x[i][j] * g(i, j);
      return static_cast<double>(s);
    };
    const double numeric = (f(h) - f(-h)) / (2 * h);
    const double analytic = linalg::frobenius_dot(linalg::expm_frechet_adjoint(a, g), e);
    EXPECT_NEAR(analytic, numeric, 1e-6 * std::max(1.0, std::abs(numeric)));
  }
}

TEST(Linalg, ThetaGradientProjection) {
  DenseMatrix ga(3, 3, {0, 1, 2, 3, 0, 4, 5, 6, 0});
  const auto g = linalg::project_skew_gradient(ga);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[0], 1.0 - 3.0);
  EXPECT_EQ(g[1], 2.0 - 5.0);
  EXPECT_EQ(g[2], 4.0 - 6.0);
}

TEST(Linalg, DotProductPreserved) {
  Rng rng(23);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + rng.below(20);
    const auto p = linalg::expm_skew(linalg::build_skew(random_params(n, 1.5, rng)));
    const auto u = rng.normal_vector(n), v = rng.normal_vector(n);
    EXPECT_NEAR(linalg::dot(u, v), linalg::dot(linalg::apply(p.matrix(), u), linalg::apply(p.matrix(), v)), 1e-9);
  }
}

TEST(Linalg, VectorHelpers) {
  std::vector<double> z(3, 0.0);
  EXPECT_THROW(linalg::normalized(z), DegenerateVectorError);
  const auto u = linalg::normalized(std::vector<double>{3.0, 4.0});
  EXPECT_DOUBLE_EQ(u[0], 0.6);
  EXPECT_DOUBLE_EQ(u[1], 0.8);
  EXPECT_THROW(linalg::dot(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ShapeError);
}
