#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dhkd/matrix.hpp"
#include "dhkd/rng.hpp"

namespace dhkd::collapse {

/// Simplex equiangular tight frame M = sqrt(K/(K-1)) U (I - 11^T/K).
struct EtfFrame {
  Matrix M;  // d x K, column k is vertex m_k
  Matrix U;  // d x K with orthonormal columns

  /// K/(K-1) (I - J/K), the Gram matrix every ETF must have.
  static Matrix expected_gram(std::size_t K) {
    Matrix g(K, K);
    const double kk = static_cast<double>(K);
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) g(i, j) = kk / (kk - 1.0) * ((i == j ? 1.0 : 0.0) - 1.0 / kk);
    return g;
  }
};

/// Orthonormalizes the columns of `a` in place (modified Gram-Schmidt, two passes).
inline void orthonormalize_columns(Matrix& a) {
  const std::size_t n = a.rows(), m = a.cols();
  for (std::size_t j = 0; j < m; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < j; ++i) {
        double proj = 0.0;
        for (std::size_t r = 0; r < n; ++r) proj += a(r, i) * a(r, j);
        for (std::size_t r = 0; r < n; ++r) a(r, j) -= proj * a(r, i);
      }
    }
    double len = 0.0;
    for (std::size_t r = 0; r < n; ++r) len += a(r, j) * a(r, j);
    len = std::sqrt(len);
    if (len < 1e-12) throw NumericError("orthonormalize_columns: rank-deficient input");
    for (std::size_t r = 0; r < n; ++r) a(r, j) /= len;
  }
}

/// Random simplex ETF in R^d with K vertices. Requires d >= K and K >= 2.
inline EtfFrame make_etf(std::size_t d, std::size_t K, Rng& rng) {
  if (K < 2) throw std::invalid_argument("make_etf: K must be >= 2");
  if (d < K) {
    throw std::invalid_argument("make_etf: need d >= K (got d=" + std::to_string(d) +
                                ", K=" + std::to_string(K) + ")");
  }
  EtfFrame f;
  f.U = Matrix(d, K);
  for (double& v : f.U.flat()) v = rng.normal();
  orthonormalize_columns(f.U);
  const double kk = static_cast<double>(K);
  Matrix centering(K, K);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) centering(i, j) = (i == j ? 1.0 : 0.0) - 1.0 / kk;
  f.M = scaled(matmul(f.U, centering), std::sqrt(kk / (kk - 1.0)));
  return f;
}

/// Neural-collapse summary of a feature set against a linear classifier.
struct NcMetrics {
  double nc1 = 0.0;               // tr(Sigma_W) / tr(Sigma_B)
  double nc2_angle_dev = 0.0;     // max_{i<j} |cos(h~_i, h~_j) + 1/(K-1)|
  double nc2_norm_cv = 0.0;       // std / mean of ||h_k - h_G||
  double nc3_duality = 0.0;       // max_k (1 - cos(w_k, h~_k))
  double nc4_disagreement = 0.0;  // fraction with argmax <h, w_k> != nearest class mean
  bool degenerate = false;        // some quantity was undefined and skipped
  std::size_t undefined_pairs = 0;
};

inline NcMetrics nc_metrics(const Matrix& features, std::span<const std::size_t> labels,
                            const Matrix& classifier) {
  const std::size_t N = features.rows(), d = features.cols(), K = classifier.cols();
  if (labels.size() != N) throw std::invalid_argument("nc_metrics: label count != N");
  if (classifier.rows() != d) throw std::invalid_argument("nc_metrics: classifier rows != feature width");
  if (K < 2) throw std::invalid_argument("nc_metrics: need K >= 2");
  if (N < K) throw std::invalid_argument("nc_metrics: need N >= K");

  std::vector<std::size_t> count(K, 0);
  Matrix means(K, d);
  std::vector<double> global(d, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] >= K) throw std::invalid_argument("nc_metrics: label out of range");
    ++count[labels[i]];
    axpy(1.0, features.row(i), means.row(labels[i]));
    axpy(1.0, features.row(i), global);
  }
  for (std::size_t k = 0; k < K; ++k) {
    if (count[k] == 0) throw std::invalid_argument("nc_metrics: class " + std::to_string(k) + " is empty");
    for (double& v : means.row(k)) v /= static_cast<double>(count[k]);
  }
  for (double& v : global) v /= static_cast<double>(N);

  NcMetrics m;

  // NC1
  double within = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    auto h = features.row(i);
    auto mu = means.row(labels[i]);
    for (std::size_t r = 0; r < d; ++r) within += (h[r] - mu[r]) * (h[r] - mu[r]);
  }
  within /= static_cast<double>(N);
  Matrix centered(K, d);
  std::vector<double> center_norm(K);
  double between = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t r = 0; r < d; ++r) centered(k, r) = means(k, r) - global[r];
    center_norm[k] = norm(centered.row(k));
    between += center_norm[k] * center_norm[k];
  }
  between /= static_cast<double>(K);
  if (between > 0.0) {
    m.nc1 = within / between;
  } else {
    m.nc1 = std::numeric_limits<double>::quiet_NaN();
    m.degenerate = true;
  }

  // NC2
  constexpr double kZeroNorm = 1e-12;
  const double target = -1.0 / (static_cast<double>(K) - 1.0);
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = i + 1; j < K; ++j) {
      if (center_norm[i] < kZeroNorm || center_norm[j] < kZeroNorm) {
        ++m.undefined_pairs;
        m.degenerate = true;
        continue;
      }
      const double c = dot(centered.row(i), centered.row(j)) / (center_norm[i] * center_norm[j]);
      m.nc2_angle_dev = std::max(m.nc2_angle_dev, std::abs(c - target));
    }
  }
  double mean_norm = 0.0;
  for (double v : center_norm) mean_norm += v;
  mean_norm /= static_cast<double>(K);
  double var_norm = 0.0;
  for (double v : center_norm) var_norm += (v - mean_norm) * (v - mean_norm);
  var_norm /= static_cast<double>(K);
  m.nc2_norm_cv = mean_norm > 0.0 ? std::sqrt(var_norm) / mean_norm : 0.0;

  // NC3
  const Matrix wt = transpose(classifier);
  for (std::size_t k = 0; k < K; ++k) {
    const double wn = norm(wt.row(k));
    if (wn < kZeroNorm || center_norm[k] < kZeroNorm) {
      m.degenerate = true;
      continue;
    }
    const double c = dot(wt.row(k), centered.row(k)) / (wn * center_norm[k]);
    m.nc3_duality = std::max(m.nc3_duality, 1.0 - c);
  }

  // NC4
  std::size_t disagree = 0;
  for (std::size_t i = 0; i < N; ++i) {
    auto h = features.row(i);
    std::size_t best_score = 0, best_center = 0;
    double top = -std::numeric_limits<double>::infinity();
    double closest = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const double s = dot(h, wt.row(k));
      if (s > top) top = s, best_score = k;
      double dist = 0.0;
      for (std::size_t r = 0; r < d; ++r) dist += (h[r] - means(k, r)) * (h[r] - means(k, r));
      if (dist < closest) closest = dist, best_center = k;
    }
    disagree += best_score != best_center ? 1 : 0;
  }
  m.nc4_disagreement = static_cast<double>(disagree) / static_cast<double>(N);
  return m;
}

/// Pearson correlation between every pair of columns; NaN where a column is constant.
inline Matrix column_correlation(const Matrix& x, std::vector<bool>* defined = nullptr) {
  const std::size_t N = x.rows(), K = x.cols();
  std::vector<double> mean(K, 0.0), sd(K, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < K; ++k) mean[k] += x(i, k);
  for (double& v : mean) v /= static_cast<double>(N);
  Matrix cov(K, K);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = a; b < K; ++b) cov(a, b) += (x(i, a) - mean[a]) * (x(i, b) - mean[b]);
  for (std::size_t k = 0; k < K; ++k) sd[k] = std::sqrt(cov(k, k) / static_cast<double>(N));
  if (defined) defined->assign(K, true);
  Matrix corr(K, K);
  for (std::size_t a = 0; a < K; ++a) {
    const bool ok_a = sd[a] > 1e-12;
    if (defined && !ok_a) (*defined)[a] = false;
    for (std::size_t b = a; b < K; ++b) {
      const bool ok = ok_a && sd[b] > 1e-12;
      const double v = ok ? cov(a, b) / static_cast<double>(N) / (sd[a] * sd[b])
                          : std::numeric_limits<double>::quiet_NaN();
      corr(a, b) = corr(b, a) = v;
    }
  }
  return corr;
}

struct CorrelationDiff {
  Matrix diff;  // corr(teacher) - corr(student), NaN where undefined
  double mean_abs = 0.0;
  std::size_t undefined_entries = 0;
};

/// Difference between the class-logit correlation matrices of two models.
inline CorrelationDiff correlation_diff(const Matrix& teacher_logits, const Matrix& student_logits) {
  require_same_shape(teacher_logits, student_logits, "correlation_diff");
  if (teacher_logits.rows() < 2) throw std::invalid_argument("correlation_diff: need N >= 2");
  const Matrix ct = column_correlation(teacher_logits);
  const Matrix cs = column_correlation(student_logits);
  CorrelationDiff out;
  out.diff = Matrix(ct.rows(), ct.cols());
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < ct.size(); ++i) {
    const double v = ct.flat()[i] - cs.flat()[i];
    out.diff.flat()[i] = v;
    if (std::isnan(v)) {
      ++out.undefined_entries;
    } else {
      total += std::abs(v);
      ++used;
    }
  }
  out.mean_abs = used > 0 ? total / static_cast<double>(used) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

}  // namespace dhkd::collapse
