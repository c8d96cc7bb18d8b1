#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dhkd/matrix.hpp"

namespace dhkd {

/// Overflow-free logistic function.
inline double sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& x) {
  require_finite(x, "sigmoid");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.flat()[i] = sigmoid(x.flat()[i]);
  return out;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  if (logits.cols() == 0) throw std::invalid_argument("softmax_rows: K must be >= 1");
  require_finite(logits, "softmax_rows");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    auto p = out.row(r);
    const double m = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      p[k] = std::exp(z[k] - m);
      total += p[k];
    }
    for (double& v : p) v /= total;
  }
  return out;
}

/// Row-wise log-softmax, log p_k = (z_k - m) - log sum exp(z - m).
inline Matrix log_softmax_rows(const Matrix& logits) {
  if (logits.cols() == 0) throw std::invalid_argument("log_softmax_rows: K must be >= 1");
  require_finite(logits, "log_softmax_rows");
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto z = logits.row(r);
    const double m = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (double v : z) total += std::exp(v - m);
    const double lse = std::log(total);
    auto o = out.row(r);
    for (std::size_t k = 0; k < z.size(); ++k) o[k] = (z[k] - m) - lse;
  }
  return out;
}

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
///
/// Throws NumericError naming the coordinate if any probe is non-finite.
inline std::vector<double> finite_diff_grad(const ScalarFn& f, std::vector<double> x,
                                            double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite value at coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Gradient tolerance of the form max(abs, rel * scale).
struct GradTolerance {
  double abs = 1e-6;
  double rel = 1e-5;
};

/// Largest |a - b| / max(abs, rel * max(|a|, |b|)); <= 1 means every entry agrees.
inline double tolerance_ratio(std::span<const double> analytic, std::span<const double> numeric,
                              GradTolerance tol) {
  if (analytic.size() != numeric.size()) {
    throw std::invalid_argument("tolerance_ratio: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double scale = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
    const double allowed = std::max(tol.abs, tol.rel * scale);
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / allowed);
  }
  return worst;
}

/// Largest |a - b| / max(|b|, floor); the "relative error" reported by checks.
inline double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                                 double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) /
                                std::max(std::abs(numeric[i]), floor));
  }
  return worst;
}

}  // namespace dhkd
