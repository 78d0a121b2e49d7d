#pragma once

// Logistic propensity model and covariate-balancing moments
//   g(T, x) = (T / pi - (1 - T) / (1 - pi)) * f(x),   f(x) = (x, x^2) or x.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "robust_ate/data_model.hpp"
#include "robust_ate/error.hpp"

namespace robust_ate {

struct PropensityModel {
  Vector beta2;
  double clip_eps = 1e-6;
};

enum class BalanceMap { identity_square, identity };

inline Index balance_dim(Index p, BalanceMap map) noexcept {
  return map == BalanceMap::identity_square ? 2 * p : p;
}

/// Overflow-free logistic function.
inline double logistic(double z) noexcept {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Clipped propensity and its derivative with respect to the linear
/// predictor. Inside the clipped region the derivative is held at its
/// boundary value rather than dropping to zero.
struct PropensityValue {
  double pi;
  double dpi;
  bool clipped;
};

inline PropensityValue propensity_value(double linear, double clip_eps) noexcept {
  double pi = logistic(linear);
  bool clipped = false;
  if (pi < clip_eps) {
    pi = clip_eps;
    clipped = true;
  } else if (pi > 1.0 - clip_eps) {
    pi = 1.0 - clip_eps;
    clipped = true;
  }
  return {pi, pi * (1.0 - pi), clipped};
}

template <class Derived>
double propensity(const Eigen::MatrixBase<Derived>& x, const PropensityModel& model) {
  if (x.size() != model.beta2.size())
    throw Error(ErrorKind::ShapeMismatch, "covariate row and beta2 differ in length");
  return propensity_value(x.dot(model.beta2), model.clip_eps).pi;
}

template <class Derived>
Vector balance_features(const Eigen::MatrixBase<Derived>& x, BalanceMap map) {
  const Index p = x.size();
  Vector f(balance_dim(p, map));
  f.head(p) = x;
  if (map == BalanceMap::identity_square) f.tail(p) = x.array().square().matrix();
  return f;
}

/// t/pi - (1-t)/(1-pi)
inline double balance_weight(double t, double pi) noexcept {
  return t / pi - (1.0 - t) / (1.0 - pi);
}

/// d/dpi of balance_weight.
inline double balance_weight_slope(double t, double pi) noexcept {
  return -(t / (pi * pi) + (1.0 - t) / ((1.0 - pi) * (1.0 - pi)));
}

template <class Derived>
Vector cbps_moment(double t, const Eigen::MatrixBase<Derived>& x, const PropensityModel& model,
                   BalanceMap map) {
  const double pi = propensity(x, model);
  return balance_weight(t, pi) * balance_features(x, map);
}

/// d g / d beta2, a (dim f) x p matrix.
template <class Derived>
Matrix cbps_jacobian(double t, const Eigen::MatrixBase<Derived>& x, const PropensityModel& model,
                     BalanceMap map) {
  if (x.size() != model.beta2.size())
    throw Error(ErrorKind::ShapeMismatch, "covariate row and beta2 differ in length");
  const auto pv = propensity_value(x.dot(model.beta2), model.clip_eps);
  const double scale = balance_weight_slope(t, pv.pi) * pv.dpi;
  return scale * balance_features(x, map) * x.transpose();
}

/// Ridge-penalized logistic maximum likelihood by Newton's method:
/// maximizes sum loglik - ridge/2 |beta|^2.
inline Vector fit_logistic_ridge(const Matrix& x, const Vector& t, double ridge = 1e-4,
                                 int max_iter = 100, double tol = 1e-10) {
  const Index n = x.rows();
  const Index p = x.cols();
  if (t.size() != n) throw Error(ErrorKind::ShapeMismatch, "T length must equal rows of X");
  Vector beta = Vector::Zero(p);
  auto objective = [&](const Vector& b) {
    const Vector eta = x * b;
    double ll = 0.0;
    for (Index i = 0; i < n; ++i) {
      const double z = eta[i];
      // log(1 + exp(z)) computed stably
      const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
      ll += t[i] * z - softplus;
    }
    return ll - 0.5 * ridge * b.squaredNorm();
  };
  double current = objective(beta);
  for (int it = 0; it < max_iter; ++it) {
    const Vector eta = x * beta;
    Vector resid(n), w(n);
    for (Index i = 0; i < n; ++i) {
      const double pi = logistic(eta[i]);
      resid[i] = t[i] - pi;
      w[i] = std::max(pi * (1.0 - pi), 1e-12);
    }
    const Vector grad = x.transpose() * resid - ridge * beta;
    if (grad.lpNorm<Eigen::Infinity>() < tol) break;
    Matrix h = x.transpose() * w.asDiagonal() * x;
    h.diagonal().array() += ridge;
    const Vector step = h.ldlt().solve(grad);
    double s = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 50; ++ls, s *= 0.5) {
      const Vector trial = beta + s * step;
      const double val = objective(trial);
      // near the optimum the gain drops below rounding; accept ties
      if (std::isfinite(val) && val >= current - 1e-12 * std::max(1.0, std::abs(current))) {
        beta = trial;
        moved = true;
        current = std::max(current, val);
        break;
      }
    }
    if (!moved || (s * step).lpNorm<Eigen::Infinity>() < tol) break;
  }
  return beta;
}

/// Unpenalized CBPS by Gauss–Newton on |mean g|^2, started from the
/// logistic score solution. With the identity map the system is exactly
/// identified and the mean moment is driven to zero.
inline Vector fit_cbps(const Matrix& x, const Vector& t, BalanceMap map, double clip_eps = 1e-6,
                       int max_iter = 200, double tol = 1e-12) {
  const Index n = x.rows();
  const Index p = x.cols();
  PropensityModel model{fit_logistic_ridge(x, t, 1e-4), clip_eps};
  auto mean_moment = [&](const Vector& b, Matrix* jac) {
    PropensityModel m{b, clip_eps};
    Vector g = Vector::Zero(balance_dim(p, map));
    if (jac) jac->setZero(balance_dim(p, map), p);
    for (Index i = 0; i < n; ++i) {
      g += cbps_moment(t[i], x.row(i).transpose(), m, map);
      if (jac) *jac += cbps_jacobian(t[i], x.row(i).transpose(), m, map);
    }
    g /= static_cast<double>(n);
    if (jac) *jac /= static_cast<double>(n);
    return g;
  };
  Matrix jac;
  Vector g = mean_moment(model.beta2, &jac);
  double damping = 1e-6;
  for (int it = 0; it < max_iter; ++it) {
    const double f0 = g.squaredNorm();
    if (f0 < tol * tol) break;
    Matrix h = jac.transpose() * jac;
    const Vector grad = jac.transpose() * g;
    bool accepted = false;
    for (int tries = 0; tries < 30; ++tries) {
      Matrix hd = h;
      hd.diagonal().array() += damping * (1.0 + h.diagonal().array());
      const Vector step = -hd.ldlt().solve(grad);
      const Vector trial = model.beta2 + step;
      Matrix jt;
      const Vector gt = mean_moment(trial, &jt);
      if (gt.allFinite() && gt.squaredNorm() < f0) {
        model.beta2 = trial;
        g = gt;
        jac = jt;
        damping = std::max(damping * 0.3, 1e-12);
        accepted = true;
        if (step.lpNorm<Eigen::Infinity>() < 1e-14) it = max_iter;
        break;
      }
      damping *= 10.0;
    }
    if (!accepted) break;
  }
  return model.beta2;
}

}  // namespace robust_ate
