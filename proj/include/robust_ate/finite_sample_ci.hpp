#pragma once

// Confidence intervals for a scalar target of an M-estimation system:
// the saddlepoint-type interval built from influence values, a Wald
// interval and a pairs-bootstrap percentile interval.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "robust_ate/data_model.hpp"
#include "robust_ate/error.hpp"
#include "robust_ate/parallel.hpp"
#include "robust_ate/rng.hpp"
#include "robust_ate/robust_outcome.hpp"

namespace robust_ate {

inline double normal_cdf(double x) {
  return boost::math::cdf(boost::math::normal_distribution<double>(), x);
}

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw Error(ErrorKind::InvalidArgument, "normal quantile needs 0 < p < 1");
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

// ---------------------------------------------------------------------------
// Influence values

struct InfluenceSystem {
  Matrix psi;          // n x m estimating-function rows
  Matrix bread;        // q x m (q = m for exactly identified systems)
  Vector target_grad;  // q
  Vector direct;       // optional per-unit term added to J (empty if none)
  Vector influence;    // J, n
};

/// Negative inverse of a square mean Jacobian, with its condition number.
struct BreadResult {
  Matrix bread;
  double condition = 0.0;
};

inline BreadResult bread(const Matrix& mean_jacobian) {
  if (mean_jacobian.rows() != mean_jacobian.cols() || mean_jacobian.rows() == 0)
    throw Error(ErrorKind::ShapeMismatch, "bread needs a non-empty square Jacobian");
  const Eigen::JacobiSVD<Matrix> svd(mean_jacobian);
  const auto sv = svd.singularValues();
  const double smin = sv[sv.size() - 1];
  BreadResult out;
  out.condition = smin > 0.0 ? sv[0] / smin : std::numeric_limits<double>::infinity();
  if (!(out.condition < 1e12)) throw Error(ErrorKind::SingularBread, "mean Jacobian is singular");
  const Eigen::PartialPivLU<Matrix> lu(mean_jacobian);
  out.bread = -lu.solve(Matrix::Identity(mean_jacobian.rows(), mean_jacobian.cols()));
  return out;
}

/// J_i = Psi_i' B' grad (+ direct_i).
inline Vector influence(const Matrix& psi, const Matrix& bread_matrix, const Vector& target_grad,
                        const Vector* direct = nullptr) {
  if (bread_matrix.cols() != psi.cols() || bread_matrix.rows() != target_grad.size())
    throw Error(ErrorKind::ShapeMismatch, "influence: psi, bread and gradient shapes disagree");
  Vector j = psi * (bread_matrix.transpose() * target_grad);
  if (direct && direct->size() > 0) {
    if (direct->size() != psi.rows()) throw Error(ErrorKind::ShapeMismatch, "direct term length");
    j += *direct;
  }
  return j;
}

inline InfluenceSystem make_influence_system(Matrix psi, Matrix bread_matrix, Vector target_grad,
                                             Vector direct = Vector()) {
  InfluenceSystem s{std::move(psi), std::move(bread_matrix), std::move(target_grad), std::move(direct), Vector()};
  s.influence = influence(s.psi, s.bread, s.target_grad, &s.direct);
  return s;
}

/// h_i = -tr(B dPsi_i/deta) / n. Sums to the number of parameters.
inline Vector generalized_leverage(const Matrix& bread_matrix, const std::vector<Matrix>& unit_jacobians) {
  const double n = static_cast<double>(unit_jacobians.size());
  Vector h(static_cast<Index>(unit_jacobians.size()));
  for (std::size_t i = 0; i < unit_jacobians.size(); ++i)
    h[static_cast<Index>(i)] = -(bread_matrix * unit_jacobians[i]).trace() / n;
  return h;
}

/// J_i / (1 - h_i), with h capped below 1.
inline Vector leverage_adjusted(const Vector& j, const Vector& leverage, double cap = 0.99) {
  if (j.size() != leverage.size()) throw Error(ErrorKind::ShapeMismatch, "leverage length");
  Vector out(j.size());
  for (Index i = 0; i < j.size(); ++i) out[i] = j[i] / (1.0 - std::clamp(leverage[i], 0.0, cap));
  return out;
}

inline Vector centered(const Vector& j) { return (j.array() - j.mean()).matrix(); }

// ---------------------------------------------------------------------------
// Empirical cumulant generating function

struct CgfValue {
  double k = 0.0;
  double k1 = 0.0;
  double k2 = 0.0;
  double k3 = 0.0;
};

inline constexpr double kCgfExponentLimit = 700.0;

/// K(t) = log mean exp(t J) and its first three derivatives from the
/// exponentially tilted weights.
inline CgfValue cgf(const Vector& j, double t) {
  if (j.size() == 0) throw Error(ErrorKind::EmptyInput, "cgf of an empty sample");
  const double jmax = j.cwiseAbs().maxCoeff();
  if (std::abs(t) * jmax > kCgfExponentLimit)
    throw Error(ErrorKind::OverflowGuard, "t * max|J| exceeds the safe exponent range");
  CgfValue v;
  if (t == 0.0) {
    const double mean = j.mean();
    const Vector c = j.array() - mean;
    v.k1 = mean;
    v.k2 = c.array().square().mean();
    v.k3 = c.array().cube().mean();
    return v;
  }
  const Vector e = t * j;
  const double shift = e.maxCoeff();
  const Vector w0 = (e.array() - shift).exp();
  const double total = w0.sum();
  const Vector w = w0 / total;
  v.k = shift + std::log(total / static_cast<double>(j.size()));
  v.k1 = w.dot(j);
  const Vector c = j.array() - v.k1;
  v.k2 = (w.array() * c.array().square()).sum();
  v.k3 = (w.array() * c.array().cube()).sum();
  return v;
}

/// Tilted weights w_i(t) proportional to exp(t J_i).
inline Vector tilted_weights(const Vector& j, double t) {
  const Vector e = t * j;
  const Vector w = (e.array() - e.maxCoeff()).exp();
  return w / w.sum();
}

/// standard: curvature K''(0) in the correction term.
/// literal:  K'''(0) in the correction term, endpoints mu = point + K(alpha).
enum class SaddlepointMode { standard, literal };

inline const char* to_string(SaddlepointMode m) { return m == SaddlepointMode::standard ? "default" : "literal"; }

/// P(alpha) = Phi(-sqrt(n-1) r) - exp(-n K) / sqrt(2 pi (n-1)) [1/(alpha sqrt(D)) + 1/r]
/// with the signed root r = -sign(alpha) sqrt(2 K(alpha)).
inline double tail_probability(double alpha, const Vector& j, Index n,
                               SaddlepointMode mode = SaddlepointMode::standard) {
  if (alpha == 0.0) throw Error(ErrorKind::UndefinedAtZero, "tail probability is undefined at alpha = 0");
  if (n < 2) throw Error(ErrorKind::InvalidArgument, "tail probability needs n >= 2");
  const CgfValue at0 = cgf(j, 0.0);
  const double d = mode == SaddlepointMode::standard ? at0.k2 : at0.k3;
  const double scale = std::max(at0.k2, 1e-300);
  if (mode == SaddlepointMode::literal && std::abs(d) <= 1e-12 * std::pow(scale, 1.5))
    throw Error(ErrorKind::UndefinedAtZero, "third cumulant at zero vanishes; correction term divides by zero");
  if (!(d > 0.0))
    throw Error(mode == SaddlepointMode::standard ? ErrorKind::UndefinedAtZero : ErrorKind::NonFiniteValue,
                "correction curvature must be positive");
  const CgfValue at = cgf(j, alpha);
  const double k = std::max(at.k, 0.0);
  const double nm1 = static_cast<double>(n - 1);
  const double root = std::sqrt(2.0 * k);
  const double r = alpha > 0.0 ? -root : root;
  const double lead = normal_cdf(-std::sqrt(nm1) * r);
  const double pref = std::exp(-static_cast<double>(n) * k) / std::sqrt(2.0 * std::numbers::pi * nm1);
  if (pref == 0.0) return lead;
  if (root == 0.0) throw Error(ErrorKind::UndefinedAtZero, "cgf vanishes at alpha; signed root is zero");
  return lead - pref * (1.0 / (alpha * std::sqrt(d)) + 1.0 / r);
}

// ---------------------------------------------------------------------------
// Intervals

enum class CiMethod { proposed, wald, bootstrap };

inline const char* to_string(CiMethod m) {
  switch (m) {
    case CiMethod::proposed: return "proposed";
    case CiMethod::wald: return "wald";
    case CiMethod::bootstrap: return "bootstrap";
  }
  return "unknown";
}

struct IntervalEstimate {
  double point = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  CiMethod method = CiMethod::proposed;
  double level = 0.95;
  // saddlepoints (proposed only)
  double alpha_lower = 0.0;
  double alpha_upper = 0.0;
  SaddlepointMode mode = SaddlepointMode::standard;
  // bootstrap only
  int failed_replicates = 0;

  double length() const noexcept { return upper - lower; }
  bool contains(double v) const noexcept { return lower <= v && v <= upper; }
};

namespace detail {

/// Bisection for P(alpha) = target on the half-line sign * alpha > 0.
inline double solve_saddlepoint(const Vector& j, Index n, double target, double sign, SaddlepointMode mode) {
  const double jmax = j.cwiseAbs().maxCoeff();
  const double sd = std::sqrt(cgf(j, 0.0).k2);
  if (!(sd > 0.0) || !(jmax > 0.0)) throw Error(ErrorKind::RootNotBracketed, "influence values are constant");
  const double limit = kCgfExponentLimit / jmax;
  auto f = [&](double a) { return tail_probability(sign * a, j, n, mode) - target; };
  // P is near 1/2 close to zero and moves towards 0 (sign < 0) or 1 (sign > 0).
  double lo = std::min(1e-4 / (sd * std::sqrt(static_cast<double>(n))), 0.5 * limit);
  double hi = std::min(1.0 / (sd * std::sqrt(static_cast<double>(n))), limit);
  const double flo = f(lo);
  double fhi = f(hi);
  double pmin = std::min(flo, fhi) + target;
  double pmax = std::max(flo, fhi) + target;
  while ((flo > 0.0) == (fhi > 0.0)) {
    if (hi >= limit)
      throw Error(ErrorKind::RootNotBracketed, "P range attained [" + std::to_string(pmin) + ", " +
                                                   std::to_string(pmax) + "] misses " + std::to_string(target));
    hi = std::min(2.0 * hi, limit);
    fhi = f(hi);
    pmin = std::min(pmin, fhi + target);
    pmax = std::max(pmax, fhi + target);
  }
  while (hi - lo > 1e-10 * std::max(1.0, hi) && hi - lo > 1e-10) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if ((fm > 0.0) == (flo > 0.0)) lo = mid;
    else hi = mid;
  }
  return sign * 0.5 * (lo + hi);
}

}  // namespace detail

/// Interval from influence values J (already centred as desired).
/// lower endpoint: P(alpha_l) = eps with alpha_l < 0; upper: P(alpha_u) = 1 - eps, alpha_u > 0.
inline IntervalEstimate proposed_ci(const Vector& j, double point, double eps, Index n,
                                    SaddlepointMode mode = SaddlepointMode::standard) {
  if (!(eps > 0.0 && eps < 0.5)) throw Error(ErrorKind::InvalidArgument, "epsilon must lie in (0, 0.5)");
  IntervalEstimate out;
  out.point = point;
  out.method = CiMethod::proposed;
  out.level = 1.0 - 2.0 * eps;
  out.mode = mode;
  out.alpha_lower = detail::solve_saddlepoint(j, n, eps, -1.0, mode);
  out.alpha_upper = detail::solve_saddlepoint(j, n, 1.0 - eps, 1.0, mode);
  const CgfValue lo = cgf(j, out.alpha_lower);
  const CgfValue hi = cgf(j, out.alpha_upper);
  if (mode == SaddlepointMode::standard) {
    out.lower = point + lo.k1;
    out.upper = point + hi.k1;
  } else {
    out.lower = point + lo.k;
    out.upper = point + hi.k;
  }
  if (out.lower > out.upper) std::swap(out.lower, out.upper);
  return out;
}

inline IntervalEstimate proposed_ci(const InfluenceSystem& system, double point, double eps, Index n,
                                    SaddlepointMode mode = SaddlepointMode::standard) {
  return proposed_ci(system.influence, point, eps, n, mode);
}

inline IntervalEstimate wald_ci(double point, double variance, double level) {
  if (!(variance >= 0.0)) throw Error(ErrorKind::InvalidArgument, "variance must be non-negative");
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorKind::InvalidArgument, "level must lie in (0, 1)");
  const double half = normal_quantile(0.5 * (1.0 + level)) * std::sqrt(variance);
  IntervalEstimate out;
  out.point = point;
  out.lower = point - half;
  out.upper = point + half;
  out.method = CiMethod::wald;
  out.level = level;
  return out;
}

/// Sample quantile, Hyndman–Fan type 7 (linear interpolation of order statistics).
inline double quantile_type7(std::vector<double> v, double q) {
  if (v.empty()) throw Error(ErrorKind::EmptyInput, "quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorKind::InvalidArgument, "quantile level outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

using ResampleEstimator = std::function<double(const std::vector<Index>&)>;

/// Pairs bootstrap: replicate b resamples units from its own substream of
/// `seed`, so the interval is independent of `workers`. Replicates whose
/// estimator throws are dropped; more than 10% failures is an error.
inline IntervalEstimate bootstrap_ci(Index n, const ResampleEstimator& estimator, double point, double level,
                                     int replicates, std::uint64_t seed, std::size_t workers = 1) {
  if (replicates < 50) throw Error(ErrorKind::InvalidArgument, "bootstrap needs at least 50 replicates");
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorKind::InvalidArgument, "level must lie in (0, 1)");
  if (n < 1) throw Error(ErrorKind::EmptyInput, "bootstrap of an empty sample");
  std::vector<double> values(static_cast<std::size_t>(replicates), std::numeric_limits<double>::quiet_NaN());
  parallel_for(static_cast<std::size_t>(replicates), workers, [&](std::size_t b) {
    CounterRng rng = CounterRng::substream(seed, b);
    std::vector<Index> rows(static_cast<std::size_t>(n));
    for (auto& r : rows) r = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    try {
      const double v = estimator(rows);
      if (std::isfinite(v)) values[b] = v;
    } catch (const Error&) {
    }
  });
  std::vector<double> ok;
  ok.reserve(values.size());
  for (double v : values)
    if (!std::isnan(v)) ok.push_back(v);
  const int failed = replicates - static_cast<int>(ok.size());
  if (failed > replicates / 10)
    throw Error(ErrorKind::TooManyFailedReplicates,
                std::to_string(failed) + " of " + std::to_string(replicates) + " replicates failed");
  IntervalEstimate out;
  out.point = point;
  out.method = CiMethod::bootstrap;
  out.level = level;
  out.lower = quantile_type7(ok, 0.5 * (1.0 - level));
  out.upper = quantile_type7(ok, 1.0 - 0.5 * (1.0 - level));
  out.failed_replicates = failed;
  return out;
}

// ---------------------------------------------------------------------------
// Robust regression target (single coefficient of a psi-type fit)

/// Influence system for coefficient `target` of a robust linear regression,
/// with the per-unit Jacobians needed for leverage adjustment.
struct RegressionSystem {
  InfluenceSystem system;
  Vector leverage;
  double point = 0.0;
  double variance = 0.0;  // plug-in sandwich variance of the coefficient
};

inline RegressionSystem robust_regression_system(const Matrix& x, const Vector& y, const RobustRegressionFit& fit,
                                                 Index target) {
  const Index n = x.rows();
  const Index q = x.cols();
  if (target < 0 || target >= q) throw Error(ErrorKind::InvalidArgument, "target coefficient out of range");
  const Matrix rows = robust_regression_scores(x, y, fit);
  const Vector slopes = robust_regression_slopes(x, y, fit);
  const double inv_s2 = 1.0 / (fit.sigma * fit.sigma);
  const Matrix mean_jac = -(x.transpose() * slopes.asDiagonal() * x) * inv_s2 / static_cast<double>(n);
  const BreadResult b = bread(mean_jac);
  RegressionSystem out;
  out.system = make_influence_system(rows, b.bread, Vector::Unit(q, target));
  // -tr(B * (-s_i x_i x_i' / sigma^2)) / n = s_i x_i' B x_i / (n sigma^2)
  out.leverage.resize(n);
  for (Index i = 0; i < n; ++i)
    out.leverage[i] = slopes[i] * x.row(i).dot(b.bread * x.row(i).transpose()) * inv_s2 / static_cast<double>(n);
  out.point = fit.beta[target];
  out.variance = out.system.influence.squaredNorm() / (static_cast<double>(n) * static_cast<double>(n));
  return out;
}

}  // namespace robust_ate
