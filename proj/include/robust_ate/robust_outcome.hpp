#pragma once

// Bounded-influence outcome scores for the two arm-specific linear models.
//
//   gamma = (y - x'beta_k) / sigma
//   U_k   = [t == k] * psi(gamma) * x / sigma,   psi(x) = clamp(x, -a, a)
//
// sigma and a are profiled from pooled residuals: sigma = MAD / 0.6745,
// a = median |residual / sigma|.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "robust_ate/data_model.hpp"
#include "robust_ate/error.hpp"

namespace robust_ate {

inline constexpr double kMadConsistency = 0.6745;
inline constexpr double kMinPsiThreshold = 1e-3;
inline constexpr double kMinScale = 1e-6;

inline double psi(double x, double a) noexcept {
  if (x > a) return a;
  if (x < -a) return -a;
  return x;
}

/// 1 on the linear region |x| <= a, 0 on the clipped region.
inline double psi_slope(double x, double a) noexcept { return std::abs(x) <= a ? 1.0 : 0.0; }

/// Median; even counts average the two middle values.
inline double median(std::vector<double> v) {
  if (v.empty()) throw Error(ErrorKind::EmptyInput, "median of an empty sample");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// sigma = MAD(r) / 0.6745, floored at 1e-6.
inline double estimate_scale(std::span<const double> residuals) {
  if (residuals.empty()) throw Error(ErrorKind::EmptyInput, "no residuals to estimate scale");
  std::vector<double> r(residuals.begin(), residuals.end());
  const double med = median(r);
  for (double& v : r) v = std::abs(v - med);
  return std::max(median(std::move(r)) / kMadConsistency, kMinScale);
}

/// a = median |r / sigma|, floored at 1e-3.
inline double resolve_tuning(std::span<const double> residuals, double sigma = 1.0) {
  if (residuals.empty()) throw Error(ErrorKind::EmptyInput, "no residuals to resolve psi threshold");
  if (!(sigma > 0.0)) throw Error(ErrorKind::InvalidArgument, "sigma must be positive");
  std::vector<double> r;
  r.reserve(residuals.size());
  for (double v : residuals) r.push_back(std::abs(v / sigma));
  return std::max(median(std::move(r)), kMinPsiThreshold);
}

/// Fixed values override the residual-based estimates.
struct PsiConfig {
  std::optional<double> threshold;
  std::optional<double> scale;
};

struct Tuning {
  double sigma;
  double a;
};

/// Resolves (sigma, a) from residuals of the observed arm at `blocks`.
inline Tuning resolve_outcome_tuning(const Dataset& d, const ParameterBlocks& blocks,
                                     const PsiConfig& cfg) {
  std::vector<double> r(static_cast<std::size_t>(d.n()));
  for (Index i = 0; i < d.n(); ++i) {
    const Block arm = d.treated(i) ? Block::treated : Block::control;
    r[static_cast<std::size_t>(i)] = d.y()[i] - d.view(arm).row(i).dot(blocks.beta(arm));
  }
  Tuning tu{};
  tu.sigma = cfg.scale ? *cfg.scale : estimate_scale(r);
  tu.a = cfg.threshold ? *cfg.threshold : resolve_tuning(r, tu.sigma);
  if (!(tu.sigma > 0.0) || !(tu.a > 0.0))
    throw Error(ErrorKind::InvalidArgument, "psi scale and threshold must be positive");
  return tu;
}

/// Standardized residual gamma for arm `arm`.
template <class Derived>
double standardized_residual(const Eigen::MatrixBase<Derived>& x_row, double y, Block arm,
                             const ParameterBlocks& blocks) {
  return (y - x_row.dot(blocks.beta(arm))) / blocks.sigma;
}

template <class Derived>
Vector robust_score(const Eigen::MatrixBase<Derived>& x_row, double y, double t, Block arm,
                    const ParameterBlocks& blocks) {
  if (x_row.size() != blocks.beta(arm).size())
    throw Error(ErrorKind::ShapeMismatch, "covariate row and beta differ in length");
  const double member = (arm == Block::treated) ? t : 1.0 - t;
  if (member == 0.0) return Vector::Zero(x_row.size());
  const double g = standardized_residual(x_row, y, arm, blocks);
  return (member * psi(g, blocks.psi_threshold) / blocks.sigma) * x_row;
}

/// d U_k / d beta_k = -[t == k] 1{|gamma| <= a} x x' / sigma^2.
template <class Derived>
Matrix robust_score_jacobian(const Eigen::MatrixBase<Derived>& x_row, double y, double t,
                             Block arm, const ParameterBlocks& blocks) {
  const Index p = x_row.size();
  if (p != blocks.beta(arm).size())
    throw Error(ErrorKind::ShapeMismatch, "covariate row and beta differ in length");
  const double member = (arm == Block::treated) ? t : 1.0 - t;
  if (member == 0.0) return Matrix::Zero(p, p);
  const double g = standardized_residual(x_row, y, arm, blocks);
  const double slope = psi_slope(g, blocks.psi_threshold);
  if (slope == 0.0) return Matrix::Zero(p, p);
  return (-member * slope / (blocks.sigma * blocks.sigma)) * (x_row * x_row.transpose());
}

// ---------------------------------------------------------------------------
// Single-equation robust linear regression (same psi, sigma and a rules).

struct RobustRegressionFit {
  Vector beta;
  double sigma = 1.0;
  double a = 1.0;
  int iterations = 0;
  bool converged = false;
};

/// Solves sum psi((y - X b) / sigma) x = 0 by iteratively reweighted least
/// squares, re-resolving sigma and a from the residuals at every step.
/// Starts from least squares unless `start` is given.
inline RobustRegressionFit fit_robust_regression(const Matrix& x, const Vector& y,
                                                 const PsiConfig& cfg = {}, int max_iter = 500,
                                                 double tol = 1e-10, const Vector* start = nullptr) {
  const Index n = x.rows();
  const Index q = x.cols();
  if (y.size() != n) throw Error(ErrorKind::ShapeMismatch, "y length must equal rows of X");
  if (n <= q) throw Error(ErrorKind::ShapeMismatch, "need more observations than coefficients");
  RobustRegressionFit fit;
  fit.beta = (start && start->size() == q) ? *start : Vector(x.colPivHouseholderQr().solve(y));
  std::vector<double> r(static_cast<std::size_t>(n));
  auto refresh = [&] {
    const Vector res = y - x * fit.beta;
    for (Index i = 0; i < n; ++i) r[static_cast<std::size_t>(i)] = res[i];
    fit.sigma = cfg.scale ? *cfg.scale : estimate_scale(r);
    fit.a = cfg.threshold ? *cfg.threshold : resolve_tuning(r, fit.sigma);
    return res;
  };
  for (int it = 0; it < max_iter; ++it) {
    const Vector res = refresh();
    Vector w(n);
    for (Index i = 0; i < n; ++i) {
      const double g = std::abs(res[i]) / fit.sigma;
      w[i] = g <= fit.a ? 1.0 : fit.a / g;
    }
    const Matrix xtwx = x.transpose() * w.asDiagonal() * x;
    const Vector next = xtwx.ldlt().solve(x.transpose() * w.asDiagonal() * y);
    const double change = (next - fit.beta).lpNorm<Eigen::Infinity>();
    fit.beta = next;
    fit.iterations = it + 1;
    if (change < tol) {
      fit.converged = true;
      break;
    }
  }
  refresh();
  return fit;
}

/// Estimating-function rows psi(gamma_i) x_i / sigma of a robust regression.
inline Matrix robust_regression_scores(const Matrix& x, const Vector& y,
                                       const RobustRegressionFit& fit) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double g = (y[i] - x.row(i).dot(fit.beta)) / fit.sigma;
    out.row(i) = (psi(g, fit.a) / fit.sigma) * x.row(i);
  }
  return out;
}

/// Per-unit slopes 1{|gamma_i| <= a}; unit i's Jacobian is
/// -slope_i x_i x_i' / sigma^2.
inline Vector robust_regression_slopes(const Matrix& x, const Vector& y,
                                       const RobustRegressionFit& fit) {
  Vector s(x.rows());
  for (Index i = 0; i < x.rows(); ++i)
    s[i] = psi_slope((y[i] - x.row(i).dot(fit.beta)) / fit.sigma, fit.a);
  return s;
}

}  // namespace robust_ate
