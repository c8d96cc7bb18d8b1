#pragma once

// Pull/push decompositions of the classifier and feature gradients of
// L_CE + alpha * L_BinaryKL and L_CE + alpha * L_BinaryKL-Norm.
//
// Everything here works in the shared-classifier idealization: student and
// teacher features are both scored through the same classifier w (d x K),
// so z^S = h^S w and z^T = h^T w. All sums run over the batch (no mean).
//
// Two differentiation conventions appear, matching the formulas:
//  * BinaryKL terms treat the teacher logits as constants (the teacher is
//    frozen), so dL/dw_k only flows through z^S.
//  * The BinaryKL-Norm obstacle differentiates the difference
//    z^S - z^T = (h^S - h^T) w, i.e. w enters through both logits.

#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhkd/losses.hpp"
#include "dhkd/matrix.hpp"
#include "dhkd/numerics.hpp"

namespace dhkd::theory {

struct TheoryBatch {
  Matrix student_features;  // B x d
  Matrix teacher_features;  // B x d
  std::vector<std::size_t> labels;
  Matrix classifier;  // d x K, column k is w_k
  double tau = losses::kDefaultTemperature;
  double alpha = 1.0;

  std::size_t batch() const noexcept { return student_features.rows(); }
  std::size_t dim() const noexcept { return classifier.rows(); }
  std::size_t classes() const noexcept { return classifier.cols(); }

  void validate() const {
    if (batch() == 0) throw std::invalid_argument("TheoryBatch: empty batch");
    require_same_shape(student_features, teacher_features, "TheoryBatch features");
    if (student_features.cols() != classifier.rows()) {
      throw std::invalid_argument("TheoryBatch: feature width " +
                                  std::to_string(student_features.cols()) +
                                  " != classifier rows " + std::to_string(classifier.rows()));
    }
    if (labels.size() != batch()) throw std::invalid_argument("TheoryBatch: label count != B");
    for (std::size_t y : labels)
      if (y >= classes()) throw std::invalid_argument("TheoryBatch: label out of range");
    if (!(tau > 0.0)) throw std::invalid_argument("TheoryBatch: tau must be > 0");
  }

  /// n_k for every class; sums to B.
  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> n(classes(), 0);
    for (std::size_t y : labels) ++n[y];
    return n;
  }
};

inline Matrix student_logits(const TheoryBatch& b) { return matmul(b.student_features, b.classifier); }
inline Matrix teacher_logits(const TheoryBatch& b) { return matmul(b.teacher_features, b.classifier); }

/// Terms of -dL/dw_k for one class k (each a d-vector).
struct ClassTerms {
  std::vector<double> pull_ce, pull_bkl, push_ce, push_bkl;
};

struct WGradDecomposition {
  std::vector<ClassTerms> classes;

  /// dL_overall/dw as a d x K matrix: -(pull_ce + a*pull_bkl) - (push_ce + a*push_bkl).
  Matrix assembled_gradient(double alpha) const {
    const std::size_t d = classes.empty() ? 0 : classes.front().pull_ce.size();
    Matrix g(d, classes.size());
    for (std::size_t k = 0; k < classes.size(); ++k) {
      const auto& t = classes[k];
      for (std::size_t r = 0; r < d; ++r) {
        g(r, k) = -(t.pull_ce[r] + alpha * t.pull_bkl[r]) - (t.push_ce[r] + alpha * t.push_bkl[r]);
      }
    }
    return g;
  }
};

/// Terms of -dL/dh for one sample; the distillation pair is BinaryKL or
/// BinaryKL-Norm depending on which decomposition produced it.
struct HGradDecomposition {
  std::size_t sample = 0;
  std::size_t label = 0;
  std::vector<double> pull_ce, pull_bkl, push_ce, push_bkl;

  std::vector<double> assembled_gradient(double alpha) const {
    std::vector<double> g(pull_ce.size());
    for (std::size_t r = 0; r < g.size(); ++r) {
      g[r] = -(pull_ce[r] + alpha * pull_bkl[r]) - (push_ce[r] + alpha * push_bkl[r]);
    }
    return g;
  }
};

/// One summand (1/2 - w_k(h^S_j, h^T_j)) * (h^S_j - h^T_j) of the obstacle for class k.
struct ObstacleSummand {
  std::size_t sample = 0;
  double coefficient = 0.0;
  std::vector<double> direction;  // h^S_j - h^T_j

  std::vector<double> vector() const {
    std::vector<double> v = direction;
    for (double& x : v) x *= coefficient;
    return v;
  }
};

struct ObstacleClass {
  std::vector<double> obstacle;  // tau * sum of summands
  std::vector<ObstacleSummand> summands;
};

/// CE pull/push terms plus the BinaryKL-Norm obstacle for every class.
struct ObstacleDecomposition {
  WGradDecomposition ce;  // pull_bkl / push_bkl left at zero
  std::vector<ObstacleClass> classes;

  /// dL/dw = -(pull_ce + push_ce) - alpha * obstacle.
  Matrix assembled_gradient(double alpha) const {
    Matrix g = ce.assembled_gradient(0.0);
    for (std::size_t k = 0; k < classes.size(); ++k)
      for (std::size_t r = 0; r < g.rows(); ++r) g(r, k) -= alpha * classes[k].obstacle[r];
    return g;
  }
};

namespace detail {

inline std::vector<double> zeros(std::size_t n) { return std::vector<double>(n, 0.0); }

/// sigmoid(z / tau) elementwise: q_k(h) for every sample and class.
inline Matrix binary_probs(const Matrix& logits, double tau) { return sigmoid(scaled(logits, 1.0 / tau)); }

}  // namespace detail

/// Pull/push decomposition of dL_overall/dw_k for L_CE + alpha L_BinaryKL.
inline WGradDecomposition decompose_w_grad(const TheoryBatch& b) {
  b.validate();
  const std::size_t d = b.dim(), K = b.classes();
  const Matrix p = softmax_rows(student_logits(b));
  const Matrix q_s = detail::binary_probs(student_logits(b), b.tau);
  const Matrix q_t = detail::binary_probs(teacher_logits(b), b.tau);

  WGradDecomposition out;
  out.classes.resize(K);
  for (auto& t : out.classes) {
    t.pull_ce = t.pull_bkl = t.push_ce = t.push_bkl = detail::zeros(d);
  }
  for (std::size_t k = 0; k < K; ++k) {
    auto& t = out.classes[k];
    for (std::size_t i = 0; i < b.batch(); ++i) {
      auto h = b.student_features.row(i);
      if (b.labels[i] == k) {
        axpy(1.0 - p(i, k), h, t.pull_ce);
        axpy(b.tau * (q_t(i, k) - q_s(i, k)), h, t.pull_bkl);
      } else {
        axpy(-p(i, k), h, t.push_ce);
        axpy(-b.tau * (q_s(i, k) - q_t(i, k)), h, t.push_bkl);
      }
    }
  }
  return out;
}

/// Pull/push decomposition of dL_overall/dh^S for one sample, L_CE + alpha L_BinaryKL.
inline HGradDecomposition decompose_h_grad(const TheoryBatch& b, std::size_t sample) {
  b.validate();
  if (sample >= b.batch()) throw std::invalid_argument("decompose_h_grad: sample index out of range");
  const std::size_t d = b.dim(), K = b.classes(), c = b.labels[sample];
  const Matrix zs = matmul(gather_rows(b.student_features, std::span(&sample, 1)), b.classifier);
  const Matrix zt = matmul(gather_rows(b.teacher_features, std::span(&sample, 1)), b.classifier);
  const Matrix p = softmax_rows(zs);
  const Matrix q_s = detail::binary_probs(zs, b.tau);
  const Matrix q_t = detail::binary_probs(zt, b.tau);

  HGradDecomposition out{sample, c, detail::zeros(d), detail::zeros(d), detail::zeros(d),
                         detail::zeros(d)};
  const Matrix wt = transpose(b.classifier);  // row k is w_k
  axpy(1.0 - p(0, c), wt.row(c), out.pull_ce);
  axpy(b.tau * (q_t(0, c) - q_s(0, c)), wt.row(c), out.pull_bkl);
  for (std::size_t k = 0; k < K; ++k) {
    if (k == c) continue;
    axpy(-p(0, k), wt.row(k), out.push_ce);
    axpy(-b.tau * (q_s(0, k) - q_t(0, k)), wt.row(k), out.push_bkl);
  }
  return out;
}

/// w_k(h1, h2) = sigmoid((h1 - h2)^T w_k / tau).
inline double pair_sigmoid(std::span<const double> h1, std::span<const double> h2,
                           std::span<const double> w_k, double tau) {
  double u = 0.0;
  for (std::size_t r = 0; r < w_k.size(); ++r) u += (h1[r] - h2[r]) * w_k[r];
  return sigmoid(u / tau);
}

/// CE terms plus the BinaryKL-Norm obstacle tau * sum_j (1/2 - w_k(h^S_j, h^T_j)) (h^S_j - h^T_j).
inline ObstacleDecomposition decompose_w_grad_norm(const TheoryBatch& b) {
  b.validate();
  const std::size_t d = b.dim(), K = b.classes();
  ObstacleDecomposition out;
  out.ce = decompose_w_grad(b);
  for (auto& t : out.ce.classes) {
    t.pull_bkl.assign(d, 0.0);
    t.push_bkl.assign(d, 0.0);
  }
  const Matrix wt = transpose(b.classifier);
  out.classes.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    auto& cls = out.classes[k];
    cls.obstacle = detail::zeros(d);
    for (std::size_t j = 0; j < b.batch(); ++j) {
      auto hs = b.student_features.row(j);
      auto ht = b.teacher_features.row(j);
      ObstacleSummand s;
      s.sample = j;
      s.coefficient = 0.5 - pair_sigmoid(hs, ht, wt.row(k), b.tau);
      s.direction.resize(d);
      for (std::size_t r = 0; r < d; ++r) s.direction[r] = hs[r] - ht[r];
      axpy(b.tau * s.coefficient, s.direction, cls.obstacle);
      cls.summands.push_back(std::move(s));
    }
  }
  return out;
}

/// Feature-gradient decomposition for L_CE + alpha L_BinaryKL-Norm.
///
/// pull_bkl = tau (1/2 - w_c) w_c and push_bkl = -tau sum_{k != c} (w_k - 1/2) w_k,
/// so that -dL/dh = pull + push for both pairs.
inline HGradDecomposition decompose_h_grad_norm(const TheoryBatch& b, std::size_t sample) {
  b.validate();
  if (sample >= b.batch()) {
    throw std::invalid_argument("decompose_h_grad_norm: sample index out of range");
  }
  HGradDecomposition out = decompose_h_grad(b, sample);
  const std::size_t d = b.dim(), K = b.classes(), c = out.label;
  out.pull_bkl.assign(d, 0.0);
  out.push_bkl.assign(d, 0.0);
  const Matrix wt = transpose(b.classifier);
  auto hs = b.student_features.row(sample);
  auto ht = b.teacher_features.row(sample);
  axpy(b.tau * (0.5 - pair_sigmoid(hs, ht, wt.row(c), b.tau)), wt.row(c), out.pull_bkl);
  for (std::size_t k = 0; k < K; ++k) {
    if (k == c) continue;
    axpy(-b.tau * (pair_sigmoid(hs, ht, wt.row(k), b.tau) - 0.5), wt.row(k), out.push_bkl);
  }
  return out;
}

/// [(1/2 - w_k(h_S, h_T)) (h_S - h_T)]^T w_k; never positive.
inline double obstacle_margin(std::span<const double> h_s, std::span<const double> h_t,
                              std::span<const double> w_k, double tau) {
  if (h_s.size() != h_t.size() || h_s.size() != w_k.size()) {
    throw std::invalid_argument("obstacle_margin: length mismatch");
  }
  double u = 0.0;
  for (std::size_t r = 0; r < w_k.size(); ++r) u += (h_s[r] - h_t[r]) * w_k[r];
  return (0.5 - sigmoid(u / tau)) * u;
}

/// One (sample, class) coefficient pair of the classifier decomposition.
struct SignEntry {
  std::size_t sample = 0;
  std::size_t cls = 0;
  bool pull = false;  // cls == label of sample
  double ce_coefficient = 0.0;
  double bkl_coefficient = 0.0;
  int ce_sign = 0;
  int bkl_sign = 0;
  bool conflict = false;
};

struct SignReport {
  std::vector<SignEntry> entries;
  std::size_t conflicts = 0;
};

inline int sign_of(double v) noexcept { return (v > 0.0) - (v < 0.0); }

/// Coefficient signs computed straight from logits.
///
/// CE coefficients are 1 - p_k on the pull side and -p_k on the push side;
/// BinaryKL coefficients are tau (q_k(T) - q_k(S)) on the pull side and
/// -tau (q_k(S) - q_k(T)) on the push side. A conflict is a BinaryKL
/// coefficient whose sign opposes the CE side it belongs to.
inline SignReport coefficient_sign_report(const Matrix& student_logits, const Matrix& teacher_logits,
                                          std::span<const std::size_t> labels, double tau) {
  require_same_shape(student_logits, teacher_logits, "coefficient_sign_report");
  if (labels.size() != student_logits.rows()) {
    throw std::invalid_argument("coefficient_sign_report: label count != batch size");
  }
  const Matrix p = softmax_rows(student_logits);
  const Matrix q_s = detail::binary_probs(student_logits, tau);
  const Matrix q_t = detail::binary_probs(teacher_logits, tau);
  SignReport report;
  for (std::size_t i = 0; i < student_logits.rows(); ++i) {
    if (labels[i] >= student_logits.cols()) {
      throw std::invalid_argument("coefficient_sign_report: label out of range");
    }
    for (std::size_t k = 0; k < student_logits.cols(); ++k) {
      SignEntry e;
      e.sample = i;
      e.cls = k;
      e.pull = labels[i] == k;
      if (e.pull) {
        e.ce_coefficient = 1.0 - p(i, k);
        e.bkl_coefficient = tau * (q_t(i, k) - q_s(i, k));
      } else {
        e.ce_coefficient = -p(i, k);
        e.bkl_coefficient = -tau * (q_s(i, k) - q_t(i, k));
      }
      e.ce_sign = sign_of(e.ce_coefficient);
      e.bkl_sign = sign_of(e.bkl_coefficient);
      e.conflict = e.pull ? e.bkl_sign < 0 : e.bkl_sign > 0;
      report.conflicts += e.conflict ? 1 : 0;
      report.entries.push_back(e);
    }
  }
  return report;
}

inline SignReport coefficient_sign_report(const TheoryBatch& b) {
  b.validate();
  return coefficient_sign_report(student_logits(b), teacher_logits(b), b.labels, b.tau);
}

/// CSV with one row per (sample, class) and term:
/// term,class,sample,coefficient,vector_norm, where the vector is
/// coefficient * h^S_sample.
inline void write_coefficients_csv(std::ostream& os, const SignReport& report,
                                   const Matrix& student_features) {
  os << "term,class,sample,coefficient,vector_norm\n";
  const auto old_precision = os.precision(17);
  for (const auto& e : report.entries) {
    const double hn = norm(student_features.row(e.sample));
    const char* ce_name = e.pull ? "pull_ce" : "push_ce";
    const char* bkl_name = e.pull ? "pull_bkl" : "push_bkl";
    os << ce_name << ',' << e.cls << ',' << e.sample << ',' << e.ce_coefficient << ','
       << std::abs(e.ce_coefficient) * hn << '\n';
    os << bkl_name << ',' << e.cls << ',' << e.sample << ',' << e.bkl_coefficient << ','
       << std::abs(e.bkl_coefficient) * hn << '\n';
  }
  os.precision(old_precision);
}

}  // namespace dhkd::theory
