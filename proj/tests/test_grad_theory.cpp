#include <gtest/gtest.h>

#include <sstream>

#include "dhkd/grad_theory.hpp"
#include "dhkd/verify.hpp"

using namespace dhkd;
using namespace dhkd::theory;

namespace {

TheoryBatch small_batch() {
  TheoryBatch b;
  b.student_features = Matrix{{1.0, 0.5}, {-0.3, 2.0}, {0.7, -1.1}};
  b.teacher_features = Matrix{{0.8, 0.9}, {0.1, 1.5}, {1.2, -0.4}};
  b.classifier = Matrix{{0.6, -0.2, 0.1}, {0.3, 0.9, -0.7}};
  b.labels = {0, 1, 2};
  b.tau = 2.0;
  b.alpha = 0.7;
  return b;
}

}  // namespace

TEST(TheoryBatch, ValidatesShapes) {
  auto b = small_batch();
  EXPECT_NO_THROW(b.validate());
  b.labels[0] = 3;
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = small_batch();
  b.teacher_features = Matrix(2, 2);
  EXPECT_THROW(b.validate(), std::invalid_argument);
  b = small_batch();
  b.tau = 0.0;
  EXPECT_THROW(b.validate(), std::invalid_argument);
}

TEST(DecomposeW, CeTermsSumToCeGradient) {
  const auto b = small_batch();
  const auto dec = decompose_w_grad(b);
  const Matrix ce = losses::ce_loss(student_logits(b), b.labels, losses::Reduction::sum).grad;
  const Matrix want = matmul_tn(b.student_features, ce);  // d x K
  EXPECT_LT(max_abs_diff(dec.assembled_gradient(0.0), want), 1e-14);
}

TEST(DecomposeW, PullOnlyFromOwnClass) {
  auto b = small_batch();
  b.labels = {0, 0, 0};
  const auto dec = decompose_w_grad(b);
  for (double v : dec.classes[1].pull_ce) EXPECT_EQ(v, 0.0);
  for (double v : dec.classes[2].pull_bkl) EXPECT_EQ(v, 0.0);
  for (double v : dec.classes[0].push_ce) EXPECT_EQ(v, 0.0);
}

TEST(DecomposeWNorm, ObstacleIsTauTimesSummandSum) {
  const auto b = small_batch();
  const auto dec = decompose_w_grad_norm(b);
  for (const auto& cls : dec.classes) {
    std::vector<double> sum(b.dim(), 0.0);
    for (const auto& s : cls.summands) axpy(b.tau, s.vector(), sum);
    for (std::size_t r = 0; r < sum.size(); ++r) EXPECT_NEAR(cls.obstacle[r], sum[r], 1e-15);
  }
  const auto plain = decompose_w_grad(b);
  for (std::size_t k = 0; k < b.classes(); ++k) EXPECT_EQ(dec.ce.classes[k].pull_ce, plain.classes[k].pull_ce);
}

TEST(DecomposeWNorm, ObstacleVanishesWhenStudentMatchesTeacher) {
  auto b = small_batch();
  b.teacher_features = b.student_features;
  for (const auto& cls : decompose_w_grad_norm(b).classes)
    for (double v : cls.obstacle) EXPECT_EQ(v, 0.0);
}

TEST(DecomposeH, RejectsOutOfRangeSample) {
  EXPECT_THROW(decompose_h_grad(small_batch(), 3), std::invalid_argument);
  EXPECT_THROW(decompose_h_grad_norm(small_batch(), 3), std::invalid_argument);
}

TEST(Decompositions, MatchFiniteDifferences) {
  const auto results = verify::theory_fd_suite(50, 1);
  ASSERT_EQ(results.size(), 4u);
  for (const auto& r : results) EXPECT_TRUE(r.passed) << r.name << " worst " << r.worst;
}

TEST(ObstacleSign, MarginNeverPositive) {
  Rng rng(9);
  for (int n = 0; n < 5000; ++n) {
    std::vector<double> hs(4), ht(4), w(4);
    for (auto* v : {&hs, &ht, &w})
      for (double& x : *v) x = rng.normal() * std::pow(10.0, rng.uniform(-2, 2));
    EXPECT_LE(obstacle_margin(hs, ht, w, rng.uniform(0.1, 5.0)), 0.0);
  }
  const std::vector<double> same{1.0, 2.0};
  EXPECT_EQ(obstacle_margin(same, same, same, 1.0), 0.0);
}

TEST(ObstacleSign, SuitePasses) {
  const auto r = verify::obstacle_sign_suite(2000, 3);
  EXPECT_TRUE(r.passed) << r.worst;
}

TEST(SignReport, FlagsTeacherOpposingCe) {
  // Sample 0, label 0: teacher scores the true class lower than the student
  // (pull conflict) and class 1 higher (push conflict).
  const Matrix zs{{5.0, -3.0, 0.0}};
  const Matrix zt{{1.0, 2.0, 0.0}};
  const std::size_t y[] = {0};
  const auto rep = coefficient_sign_report(zs, zt, y, 2.0);
  ASSERT_EQ(rep.entries.size(), 3u);
  EXPECT_TRUE(rep.entries[0].pull);
  EXPECT_TRUE(rep.entries[0].conflict);
  EXPECT_EQ(rep.entries[0].ce_sign, 1);
  EXPECT_EQ(rep.entries[0].bkl_sign, -1);
  EXPECT_TRUE(rep.entries[1].conflict);
  EXPECT_EQ(rep.entries[1].bkl_sign, 1);
  EXPECT_FALSE(rep.entries[2].conflict);  // equal logits: zero coefficient
  EXPECT_EQ(rep.entries[2].bkl_sign, 0);
  EXPECT_EQ(rep.conflicts, 2u);
}

TEST(SignReport, NoConflictWhenTeacherAgrees) {
  const Matrix zs{{0.0, 0.0}};
  const Matrix zt{{3.0, -3.0}};
  const std::size_t y[] = {0};
  EXPECT_EQ(coefficient_sign_report(zs, zt, y, 1.0).conflicts, 0u);
}

TEST(SignReport, CoefficientsMatchDecomposition) {
  const auto b = small_batch();
  const auto rep = coefficient_sign_report(b);
  const auto dec = decompose_w_grad(b);
  // Rebuild pull_bkl of each class from the report coefficients.
  for (std::size_t k = 0; k < b.classes(); ++k) {
    std::vector<double> pull(b.dim(), 0.0), push(b.dim(), 0.0);
    for (const auto& e : rep.entries)
      if (e.cls == k) axpy(e.bkl_coefficient, b.student_features.row(e.sample), e.pull ? pull : push);
    for (std::size_t r = 0; r < b.dim(); ++r) {
      EXPECT_NEAR(pull[r], dec.classes[k].pull_bkl[r], 1e-15);
      EXPECT_NEAR(push[r], dec.classes[k].push_bkl[r], 1e-15);
    }
  }
}

TEST(SignReport, CsvHasTwoRowsPerEntry) {
  const auto b = small_batch();
  const auto rep = coefficient_sign_report(b);
  std::ostringstream os;
  write_coefficients_csv(os, rep, b.student_features);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "term,class,sample,coefficient,vector_norm");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2 * rep.entries.size());
}
