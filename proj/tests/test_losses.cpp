#include <gtest/gtest.h>

#include <cmath>

#include "dhkd/losses.hpp"
#include "dhkd/numerics.hpp"
#include "dhkd/rng.hpp"
#include "dhkd/verify.hpp"
#include "test_util.hpp"

using namespace dhkd;
using namespace dhkd::losses;

// Reference values below come from 30-digit mpmath evaluations of the loss
// definitions, not from this code.

TEST(CrossEntropy, ReferenceValue) {
  const std::size_t y[] = {0};
  const auto r = ce_loss(Matrix{{2, 3, 4}}, y, Reduction::sum);
  EXPECT_NEAR(r.value, 2.4076059644443803, 1e-14);
  EXPECT_NEAR(r.grad(0, 0), 0.09003057317038046 - 1.0, 1e-15);
}

TEST(CrossEntropy, MeanDividesByBatch) {
  const Matrix z{{2, 3, 4}, {1, 0, -1}};
  const std::size_t y[] = {0, 2};
  const auto s = ce_loss(z, y, Reduction::sum);
  const auto m = ce_loss(z, y, Reduction::mean);
  EXPECT_NEAR(m.value, s.value / 2, 1e-15);
  EXPECT_NEAR(m.grad(1, 2), s.grad(1, 2) / 2, 1e-15);
}

TEST(CrossEntropy, RejectsBadLabels) {
  const std::size_t y[] = {3};
  EXPECT_THROW(ce_loss(Matrix{{1, 2, 3}}, y), std::invalid_argument);
  const std::size_t two[] = {0, 1};
  EXPECT_THROW(ce_loss(Matrix{{1, 2, 3}}, two), std::invalid_argument);
}

TEST(CrossEntropy, FiniteAtExtremeLogits) {
  const std::size_t y[] = {1};
  const auto r = ce_loss(Matrix{{1000, -1000}}, y, Reduction::sum);
  EXPECT_NEAR(r.value, 2000.0, 1e-9);
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(VanillaKd, ReferenceValueAndGradient) {
  const auto r = vanilla_kd_loss(Matrix{{0, 1, 2}}, Matrix{{2, 0, 1}}, 2.0, Reduction::sum);
  EXPECT_NEAR(r.value, 1.0388823463339242, 1e-13);
  EXPECT_NEAR(r.grad(0, 0), -0.6403133356596129, 1e-14);
  EXPECT_NEAR(r.grad(0, 1), 0.24174432498530164, 1e-14);
  EXPECT_NEAR(r.grad(0, 2), 0.39856901067431126, 1e-14);
}

TEST(BinaryKl, ReferenceExample) {
  const auto r = binary_kl_loss(Matrix{{0.0}}, Matrix{{1.0}}, 1.0, Reduction::sum);
  EXPECT_NEAR(r.value, 0.11094407167172735, 1e-14);
  EXPECT_NEAR(r.grad(0, 0), -0.2310585786300049, 1e-15);
}

TEST(BinaryKl, ReferenceWithTemperature) {
  const auto r = binary_kl_loss(Matrix{{0.5}}, Matrix{{-1.5}}, 2.0, Reduction::sum);
  EXPECT_NEAR(r.value, 0.47298845175734637, 1e-14);
  EXPECT_NEAR(r.grad(0, 0), 0.48271040012238215, 1e-14);
}

TEST(BinaryKlNorm, ReferenceExample) {
  const auto r = binary_kl_norm_loss(Matrix{{1.0}}, Matrix{{0.0}}, 1.0, Reduction::sum);
  EXPECT_NEAR(r.value, 0.12011450695827752, 1e-14);
  EXPECT_NEAR(r.grad(0, 0), 0.2310585786300049, 1e-15);
}

TEST(BinaryKlNorm, GradientDependsOnlyOnDifference) {
  const auto a = binary_kl_norm_loss(Matrix{{3.0, -1.0}}, Matrix{{1.0, 2.0}}, 1.5, Reduction::sum);
  const auto b = binary_kl_norm_loss(Matrix{{12.0, 8.0}}, Matrix{{10.0, 11.0}}, 1.5, Reduction::sum);
  EXPECT_TRUE(dhkd::testing::bitwise_equal(a.grad, b.grad));
}

TEST(BinaryLosses, ExactlyZeroAtEqualLogits) {
  Rng rng(5);
  for (int n = 0; n < 50; ++n) {
    Matrix z(3, 4);
    for (double& v : z.flat()) v = 5.0 * rng.normal();
    for (const auto& r : {binary_kl_loss(z, z, 2.0), binary_kl_norm_loss(z, z, 2.0)}) {
      EXPECT_EQ(r.value, 0.0);
      for (double g : r.grad.flat()) EXPECT_EQ(g, 0.0);
    }
  }
}

TEST(BinaryKl, ZeroOnlyAtEquality) {
  // Differences at least 1e-2 always give a strictly positive loss.
  Rng rng(6);
  for (int n = 0; n < 200; ++n) {
    const double t = 4.0 * rng.normal();
    const double gap = (rng.uniform() < 0.5 ? -1.0 : 1.0) * std::pow(10.0, rng.uniform(-2.0, 0.5));
    EXPECT_GT(binary_kl_loss(Matrix{{t + gap}}, Matrix{{t}}, 2.0).value, 0.0) << t << " " << gap;
    EXPECT_GT(binary_kl_norm_loss(Matrix{{t + gap}}, Matrix{{t}}, 2.0).value, 0.0);
  }
}

TEST(BinaryKl, ClampedAtSaturation) {
  const auto r = binary_kl_loss(Matrix{{-200.0}}, Matrix{{200.0}}, 1.0, Reduction::sum);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_NEAR(r.value, -std::log(kProbClamp), 1e-6);
  EXPECT_TRUE(r.grad.all_finite());
}

TEST(Losses, RejectBadInputs) {
  EXPECT_THROW(binary_kl_loss(Matrix{{1.0}}, Matrix{{1.0, 2.0}}), std::invalid_argument);
  EXPECT_THROW(binary_kl_norm_loss(Matrix{{1.0}}, Matrix{{1.0}}, 0.0), std::invalid_argument);
  EXPECT_THROW(vanilla_kd_loss(Matrix{{1.0}}, Matrix{{1.0}}, -1.0), std::invalid_argument);
  Matrix nan(1, 1);
  nan(0, 0) = NAN;
  EXPECT_THROW(binary_kl_loss(nan, Matrix{{1.0}}), NumericError);
}

TEST(Losses, MatchFiniteDifferences) {
  for (const auto& r : verify::loss_suite(100, 0)) {
    EXPECT_TRUE(r.passed) << r.name << " worst " << r.worst;
  }
}

TEST(Losses, MutationFlippedBinaryKlGradientIsCaught) {
  bool caught = false;
  for (const auto& r : verify::loss_suite(20, 0, true)) {
    if (r.name == "fd_binary_kl") caught = !r.passed;
    else EXPECT_TRUE(r.passed) << r.name;
  }
  EXPECT_TRUE(caught);
}
