#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

#include "dhkd/matrix.hpp"
#include "dhkd/numerics.hpp"

namespace dhkd::losses {

enum class Reduction { sum, mean };

/// Loss value (nats) and its gradient with respect to the student logits.
struct LossResult {
  double value = 0.0;
  Matrix grad;
};

/// Probabilities are clamped to [eps, 1 - eps] before any log.
inline constexpr double kProbClamp = 1e-12;
inline constexpr double kDefaultTemperature = 2.0;

namespace detail {

inline double clamp_prob(double p) noexcept { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

inline void check_pair(const Matrix& student, const Matrix& teacher, double tau, const char* what) {
  require_same_shape(student, teacher, what);
  if (!(tau > 0.0)) throw std::invalid_argument(std::string(what) + ": temperature must be > 0");
  require_finite(student, what);
  require_finite(teacher, what);
}

inline void reduce(LossResult& r, Reduction reduction, std::size_t batch) {
  if (reduction == Reduction::mean && batch > 0) {
    const double inv = 1.0 / static_cast<double>(batch);
    r.value *= inv;
    for (double& g : r.grad.flat()) g *= inv;
  }
}

/// log-sum-exp of a row as max + log1p(sum of the remaining exp terms).
inline double log_sum_exp(std::span<const double> z) {
  const auto top = std::max_element(z.begin(), z.end());
  const double m = *top;
  double rest = 0.0;
  for (auto it = z.begin(); it != z.end(); ++it)
    if (it != top) rest += std::exp(*it - m);
  return m + std::log1p(rest);
}

}  // namespace detail

/// Cross-entropy of softmax(student_logits) against integer labels.
inline LossResult ce_loss(const Matrix& student_logits, std::span<const std::size_t> labels,
                          Reduction reduction = Reduction::mean) {
  const std::size_t batch = student_logits.rows();
  const std::size_t classes = student_logits.cols();
  if (labels.size() != batch) throw std::invalid_argument("ce_loss: label count != batch size");
  for (std::size_t y : labels)
    if (y >= classes) throw std::invalid_argument("ce_loss: label " + std::to_string(y) + " out of range");
  require_finite(student_logits, "ce_loss");

  LossResult r{0.0, softmax_rows(student_logits)};
  for (std::size_t i = 0; i < batch; ++i) {
    auto z = student_logits.row(i);
    r.value += detail::log_sum_exp(z) - z[labels[i]];
    r.grad(i, labels[i]) -= 1.0;
  }
  detail::reduce(r, reduction, batch);
  return r;
}

/// Hinton KD: tau^2 * KL(softmax(zT/tau) || softmax(zS/tau)).
inline LossResult vanilla_kd_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                                  double tau = kDefaultTemperature,
                                  Reduction reduction = Reduction::mean) {
  detail::check_pair(student_logits, teacher_logits, tau, "vanilla_kd_loss");
  const Matrix log_ps = log_softmax_rows(scaled(student_logits, 1.0 / tau));
  const Matrix log_pt = log_softmax_rows(scaled(teacher_logits, 1.0 / tau));

  LossResult r{0.0, Matrix(student_logits.rows(), student_logits.cols())};
  for (std::size_t i = 0; i < log_ps.size(); ++i) {
    const double lt = log_pt.flat()[i];
    const double ls = log_ps.flat()[i];
    const double pt = std::exp(lt);
    r.value += pt * (lt - ls);
    r.grad.flat()[i] = tau * (std::exp(ls) - pt);
  }
  r.value *= tau * tau;
  detail::reduce(r, reduction, student_logits.rows());
  return r;
}

/// Per-entry binary KL between sigmoid(zT/tau) and sigmoid(zS/tau), scaled by tau^2.
inline LossResult binary_kl_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                                 double tau = kDefaultTemperature,
                                 Reduction reduction = Reduction::mean) {
  detail::check_pair(student_logits, teacher_logits, tau, "binary_kl_loss");
  LossResult r{0.0, Matrix(student_logits.rows(), student_logits.cols())};
  for (std::size_t i = 0; i < student_logits.size(); ++i) {
    const double s = student_logits.flat()[i] / tau;
    const double t = teacher_logits.flat()[i] / tau;
    const double p = detail::clamp_prob(sigmoid(t));
    const double p_neg = detail::clamp_prob(sigmoid(-t));
    const double q = detail::clamp_prob(sigmoid(s));
    const double q_neg = detail::clamp_prob(sigmoid(-s));
    r.value += p * std::log(p / q) + p_neg * std::log(p_neg / q_neg);
    r.grad.flat()[i] = tau * (sigmoid(s) - sigmoid(t));
  }
  r.value *= tau * tau;
  detail::reduce(r, reduction, student_logits.rows());
  return r;
}

/// tau^2 * KL([1/2, 1/2] || [sigmoid(u/tau), 1 - sigmoid(u/tau)]) with u = zS - zT.
///
/// Depends on the logits only through their difference, so the gradient
/// at zS = zT + delta is the same for every teacher value.
inline LossResult binary_kl_norm_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                                      double tau = kDefaultTemperature,
                                      Reduction reduction = Reduction::mean) {
  detail::check_pair(student_logits, teacher_logits, tau, "binary_kl_norm_loss");
  LossResult r{0.0, Matrix(student_logits.rows(), student_logits.cols())};
  for (std::size_t i = 0; i < student_logits.size(); ++i) {
    const double u = (student_logits.flat()[i] - teacher_logits.flat()[i]) / tau;
    const double s = detail::clamp_prob(sigmoid(u));
    const double s_neg = detail::clamp_prob(sigmoid(-u));
    r.value += 0.5 * std::log(0.5 / s) + 0.5 * std::log(0.5 / s_neg);
    r.grad.flat()[i] = tau * (sigmoid(u) - 0.5);
  }
  r.value *= tau * tau;
  detail::reduce(r, reduction, student_logits.rows());
  return r;
}

}  // namespace dhkd::losses
