#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "dhkd/matrix.hpp"
#include "dhkd/numerics.hpp"
#include "dhkd/rng.hpp"

using namespace dhkd;

TEST(Matrix, ConstructorRejectsLengthMismatch) {
  EXPECT_THROW(Matrix(2, 3, std::vector<double>(5)), std::invalid_argument);
}

TEST(Matrix, InitializerListRejectsNonFinite) {
  EXPECT_THROW((Matrix{{1.0, NAN}}), NumericError);
  EXPECT_THROW((Matrix{{1.0}, {1.0, 2.0}}), std::invalid_argument);
}

TEST(Matrix, MatmulVariantsAgree) {
  const Matrix a{{1, 2, 3}, {4, 5, 6}};
  const Matrix b{{1, 0}, {0, 1}, {2, -1}};
  const Matrix want{{7, -1}, {16, -1}};
  EXPECT_EQ(matmul(a, b), want);
  EXPECT_EQ(matmul_tn(transpose(a), b), want);
  EXPECT_EQ(matmul_nt(a, transpose(b)), want);
  EXPECT_THROW(matmul(a, a), std::invalid_argument);
}

TEST(Matrix, RequireFiniteNamesPosition) {
  Matrix m(2, 2);
  m(1, 0) = INFINITY;
  try {
    require_finite(m, "probe");
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("(1, 0)"), std::string::npos) << e.what();
  }
}

TEST(Matrix, GatherRows) {
  const Matrix a{{1, 2}, {3, 4}, {5, 6}};
  const std::size_t idx[] = {2, 0, 2};
  EXPECT_EQ(gather_rows(a, idx), (Matrix{{5, 6}, {1, 2}, {5, 6}}));
}

TEST(Sigmoid, KnownValues) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  EXPECT_NEAR(sigmoid(1.0), 0.7310585786300049, 1e-15);
  EXPECT_NEAR(sigmoid(-1.0), 0.2689414213699951, 1e-15);
}

TEST(Sigmoid, SaturatesWithoutOverflow) {
  EXPECT_EQ(sigmoid(800.0), 1.0);
  EXPECT_EQ(sigmoid(-800.0), 0.0);
  EXPECT_TRUE(std::isfinite(sigmoid(-1e308)));
}

TEST(Softmax, KnownValues) {
  const Matrix p = softmax_rows(Matrix{{2, 3, 4}});
  EXPECT_NEAR(p(0, 0), 0.09003057317038046, 1e-15);
  EXPECT_NEAR(p(0, 1), 0.24472847105479767, 1e-15);
  EXPECT_NEAR(p(0, 2), 0.6652409557748219, 1e-15);
}

TEST(Softmax, StableForHugeLogits) {
  const Matrix p = softmax_rows(Matrix{{1000, 1001}, {-1000, -1001}});
  EXPECT_TRUE(p.all_finite());
  EXPECT_NEAR(p(0, 1), sigmoid(1.0), 1e-15);
  EXPECT_NEAR(p(1, 0), sigmoid(1.0), 1e-15);
  const Matrix lp = log_softmax_rows(Matrix{{1000, 0}});
  EXPECT_EQ(lp(0, 0), 0.0);
  EXPECT_NEAR(lp(0, 1), -1000.0, 1e-12);
}

TEST(Softmax, RejectsEmptyAndNonFinite) {
  EXPECT_THROW(softmax_rows(Matrix(2, 0)), std::invalid_argument);
  Matrix bad(1, 2);
  bad(0, 1) = NAN;
  EXPECT_THROW(softmax_rows(bad), NumericError);
}

TEST(FiniteDiff, ExactOnQuadratic) {
  auto f = [](std::span<const double> x) { return 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + x[1]; };
  const auto g = finite_diff_grad(f, {1.5, -2.0});
  EXPECT_NEAR(g[0], 3.0 * 2 * 1.5 + 4.0, 1e-8);
  EXPECT_NEAR(g[1], -3.0 + 1.0, 1e-8);
}

TEST(FiniteDiff, NamesNonFiniteCoordinate) {
  auto f = [](std::span<const double> x) { return x[1] > 0.5 ? NAN : x[0]; };
  try {
    finite_diff_grad(f, {0.0, 0.5});
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
}

TEST(Tolerance, RatioUsesMaxOfAbsAndRel) {
  const GradTolerance tol{1e-6, 1e-5};
  const double a[] = {1.0, 1e-9};
  const double ok[] = {1.0 + 0.9e-5, 1e-9 + 0.9e-6};
  const double bad[] = {1.0 + 2e-5, 1e-9};
  EXPECT_LE(tolerance_ratio(a, ok, tol), 1.0);
  EXPECT_GT(tolerance_ratio(a, bad, tol), 1.0);
}

TEST(Rng, SplitmixReference) {
  std::uint64_t s = 0;
  EXPECT_EQ(splitmix64(s), 0xe220a8397b1dcdafULL);
}

TEST(Rng, XoshiroReferenceStream) {
  // xoshiro256** seeded by four splitmix64 draws from 0, computed independently.
  Rng rng(0);
  EXPECT_EQ(rng.next_u64(), 0x99ec5f36cb75f2b4ULL);
  EXPECT_EQ(rng.next_u64(), 0xbf6e1f784956452aULL);
  EXPECT_EQ(rng.next_u64(), 0x1a5f849d4933e6e0ULL);
}

TEST(Rng, DeterministicPerSeed) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(42).next_u64(), c.next_u64());
}

TEST(Rng, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(0, 1), derive_seed(0, 2));
  EXPECT_NE(derive_seed(0, 1), derive_seed(1, 1));
  EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
}

TEST(Rng, UniformAndBelowRanges) {
  Rng rng(1);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto k = rng.below(7);
    ASSERT_LT(k, 7u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 7u);
  EXPECT_THROW(rng.below(0), std::invalid_argument);
}

TEST(Rng, NormalMoments) {
  Rng rng(7);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z;
    s2 += z * z;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(var, 1.0, 0.02);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(3);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  rng.shuffle(std::span(w));
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}
