#include <gtest/gtest.h>

#include <cmath>

#include "dhkd/collapse.hpp"
#include "dhkd/verify.hpp"

using namespace dhkd;
using namespace dhkd::collapse;

TEST(Etf, GramAndCosineForManyShapes) {
  for (const auto& r : verify::etf_suite(3)) EXPECT_TRUE(r.passed) << r.name << " " << r.worst;
}

TEST(Etf, ColumnsHaveUnitNormAndSumToZero) {
  Rng rng(4);
  const auto f = make_etf(12, 5, rng);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(norm(f.M.column(k)), 1.0, 1e-14);
  for (std::size_t r = 0; r < 12; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += f.M(r, k);
    EXPECT_NEAR(s, 0.0, 1e-14);
  }
  EXPECT_LE(max_abs_diff(matmul_tn(f.U, f.U), identity(5)), 1e-14);
}

TEST(Etf, ExpectedGramKTwo) {
  EXPECT_EQ(EtfFrame::expected_gram(2), (Matrix{{1.0, -1.0}, {-1.0, 1.0}}));
}

TEST(Etf, RejectsBadShapes) {
  Rng rng(0);
  EXPECT_THROW(make_etf(3, 4, rng), std::invalid_argument);
  EXPECT_THROW(make_etf(5, 1, rng), std::invalid_argument);
}

namespace {

// Each sample sits exactly on its class ETF vertex; classifier equals the vertices.
struct Collapsed {
  Matrix features;
  std::vector<std::size_t> labels;
  Matrix classifier;
};

Collapsed collapsed_features(std::size_t d, std::size_t K, std::size_t per_class, double noise) {
  Rng rng(11);
  const auto f = make_etf(d, K, rng);
  Collapsed c{Matrix(K * per_class, d), {}, f.M};
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t n = 0; n < per_class; ++n) {
      const std::size_t i = k * per_class + n;
      for (std::size_t j = 0; j < d; ++j) c.features(i, j) = 5.0 * f.M(j, k) + noise * rng.normal();
      c.labels.push_back(k);
    }
  return c;
}

}  // namespace

TEST(NcMetrics, PerfectCollapseIsNearZero) {
  const auto c = collapsed_features(8, 4, 20, 0.0);
  const auto m = nc_metrics(c.features, c.labels, c.classifier);
  EXPECT_NEAR(m.nc1, 0.0, 1e-20);
  EXPECT_NEAR(m.nc2_angle_dev, 0.0, 1e-12);
  EXPECT_NEAR(m.nc2_norm_cv, 0.0, 1e-12);
  EXPECT_NEAR(m.nc3_duality, 0.0, 1e-12);
  EXPECT_EQ(m.nc4_disagreement, 0.0);
  EXPECT_FALSE(m.degenerate);
}

TEST(NcMetrics, NoiseRaisesWithinClassVariability) {
  const auto tight = collapsed_features(8, 4, 50, 0.1);
  const auto loose = collapsed_features(8, 4, 50, 1.0);
  const auto a = nc_metrics(tight.features, tight.labels, tight.classifier);
  const auto b = nc_metrics(loose.features, loose.labels, loose.classifier);
  EXPECT_GT(a.nc1, 0.0);
  EXPECT_LT(a.nc1, b.nc1);
  EXPECT_GE(b.nc4_disagreement, 0.0);
  EXPECT_LE(b.nc4_disagreement, 1.0);
}

TEST(NcMetrics, IdenticalClassMeansAreDegenerate) {
  Matrix h(4, 2);
  for (std::size_t i = 0; i < 4; ++i) h(i, 0) = 1.0;
  const std::vector<std::size_t> y{0, 0, 1, 1};
  const Matrix w{{1.0, -1.0}, {0.0, 0.0}};
  const auto m = nc_metrics(h, y, w);
  EXPECT_TRUE(m.degenerate);
  EXPECT_TRUE(std::isfinite(m.nc4_disagreement));
}

TEST(NcMetrics, RejectsBadInputs) {
  const Matrix h(4, 2), w(2, 2);
  const std::vector<std::size_t> y{0, 0, 1, 1}, bad{0, 0, 1, 2}, short_y{0, 1};
  EXPECT_THROW(nc_metrics(h, short_y, w), std::invalid_argument);
  EXPECT_THROW(nc_metrics(h, bad, w), std::invalid_argument);
  EXPECT_THROW(nc_metrics(h, y, Matrix(3, 2)), std::invalid_argument);
  EXPECT_THROW(nc_metrics(h, y, Matrix(2, 1)), std::invalid_argument);
}

TEST(Correlation, SelfDifferenceIsZero) {
  Rng rng(2);
  Matrix z(50, 4);
  for (double& v : z.flat()) v = rng.normal();
  const auto d = correlation_diff(z, z);
  EXPECT_EQ(d.mean_abs, 0.0);
  EXPECT_EQ(d.undefined_entries, 0u);
}

TEST(Correlation, KnownValue) {
  // Columns (0,1,2) and (0,2,4) correlate perfectly; (2,1,0) anti-correlates.
  const Matrix x{{0, 0, 2}, {1, 2, 1}, {2, 4, 0}};
  const Matrix c = column_correlation(x);
  EXPECT_NEAR(c(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(c(0, 2), -1.0, 1e-15);
  EXPECT_NEAR(c(1, 1), 1.0, 1e-15);
}

TEST(Correlation, ConstantColumnIsNaN) {
  const Matrix x{{1, 5}, {2, 5}, {3, 5}};
  std::vector<bool> defined;
  const Matrix c = column_correlation(x, &defined);
  EXPECT_TRUE(std::isnan(c(0, 1)));
  EXPECT_TRUE(std::isnan(c(1, 1)));
  EXPECT_FALSE(defined[1]);
  const auto d = correlation_diff(x, x);
  EXPECT_EQ(d.undefined_entries, 3u);
  EXPECT_EQ(d.mean_abs, 0.0);
}

TEST(Correlation, ShapeMismatchThrows) {
  EXPECT_THROW(correlation_diff(Matrix(3, 2), Matrix(3, 3)), std::invalid_argument);
  EXPECT_THROW(correlation_diff(Matrix(1, 2), Matrix(1, 2)), std::invalid_argument);
}
