#pragma once

// Shared fixtures: small random datasets and a central-difference helper.

#include <functional>

#include "robust_ate/robust_ate.hpp"

namespace fixtures {

using robust_ate::CounterRng;
using robust_ate::Dataset;
using robust_ate::Index;
using robust_ate::Matrix;
using robust_ate::ParameterBlocks;
using robust_ate::Vector;

/// n x p standard normal covariates, logistic treatment on beta2 and
/// linear outcomes with N(0,1) noise. Both arms are guaranteed non-empty.
inline Dataset random_dataset(std::uint64_t seed, Index n, Index p, double prop_scale = 0.5) {
  CounterRng rng(seed);
  for (int attempt = 0;; ++attempt) {
    Matrix x(n, p);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < p; ++j) x(i, j) = rng.normal();
    Vector beta2(p), beta1(p), beta0(p);
    for (Index j = 0; j < p; ++j) {
      beta2[j] = prop_scale * rng.normal();
      beta1[j] = rng.normal();
      beta0[j] = rng.normal();
    }
    Vector t(n), y(n);
    Index treated = 0;
    for (Index i = 0; i < n; ++i) {
      const double pi = robust_ate::logistic(x.row(i).dot(beta2));
      t[i] = rng.uniform() < pi ? 1.0 : 0.0;
      treated += static_cast<Index>(t[i]);
      y[i] = (t[i] == 1.0 ? x.row(i).dot(beta1) : x.row(i).dot(beta0)) + rng.normal();
    }
    if (treated >= 2 && treated <= n - 2) return robust_ate::validate_dataset(x, t, y);
  }
}

/// Blocks with small random coefficients and fixed sigma / threshold.
inline ParameterBlocks random_blocks(std::uint64_t seed, Index p, double sigma = 1.3, double a = 0.9) {
  CounterRng rng(seed);
  ParameterBlocks b = ParameterBlocks::zeros(p);
  for (Index j = 0; j < p; ++j) {
    b.beta0[j] = 0.5 * rng.normal();
    b.beta1[j] = 0.5 * rng.normal();
    b.beta2[j] = 0.3 * rng.normal();
  }
  b.sigma = sigma;
  b.psi_threshold = a;
  return b;
}

/// Central differences of a vector-valued map, one column per coordinate.
inline Matrix central_jacobian(const std::function<Vector(const Vector&)>& f, const Vector& at, double h = 1e-6) {
  const Vector f0 = f(at);
  Matrix jac(f0.size(), at.size());
  for (Index k = 0; k < at.size(); ++k) {
    Vector up = at, dn = at;
    up[k] += h;
    dn[k] -= h;
    jac.col(k) = (f(up) - f(dn)) / (2.0 * h);
  }
  return jac;
}

/// max |a - b| / max(1, max |b|).
inline double relative_error(const Matrix& a, const Matrix& b) {
  const double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace fixtures
