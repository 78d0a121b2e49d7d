#pragma once

// Seeded generators for the two simulation designs.
//   A: X ~ N(0, I_p), T ~ Bernoulli(logistic(X beta2)), Y(k) = X beta_k + e(k),
//      floor(rho n) units get Cauchy outcome errors.
//   B: x ~ N(0, 1), y = b0 + b1 x + e, floor(rho n) residuals replaced by Cauchy draws.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "robust_ate/cbps.hpp"
#include "robust_ate/data_model.hpp"
#include "robust_ate/error.hpp"
#include "robust_ate/rng.hpp"

namespace robust_ate {

// stream tags
inline constexpr std::uint64_t kTagCovariates = 1;
inline constexpr std::uint64_t kTagTreatment = 2;
inline constexpr std::uint64_t kTagNoise = 3;
inline constexpr std::uint64_t kTagContamination = 4;
inline constexpr std::uint64_t kTagCauchy = 5;
inline constexpr std::uint64_t kTagSupport = 6;

inline double cauchy_from_uniform(double u, double loc, double scale) {
  return loc + scale * std::tan(std::numbers::pi * (u - 0.5));
}

inline Vector sample_cauchy(double loc, double scale, Index n, CounterRng& rng) {
  if (!(scale > 0.0)) throw Error(ErrorKind::InvalidArgument, "Cauchy scale must be positive");
  Vector out(n);
  for (Index i = 0; i < n; ++i) out[i] = cauchy_from_uniform(rng.uniform(), loc, scale);
  return out;
}

/// s nonzeros alternating +value / -value at indices 0..s-1.
inline Vector alternating_sparse(Index p, Index s, double value = 1.0) {
  Vector b = Vector::Zero(p);
  for (Index j = 0; j < std::min(p, s); ++j) b[j] = (j % 2 == 0) ? value : -value;
  return b;
}

struct DesignAConfig {
  Index n = 100;
  Index p = 100;
  double rho = 0.0;
  Vector beta0_true;  // empty: alternating_sparse(p, 10)
  Vector beta1_true;
  Vector beta2_true;
  double cauchy_loc = 0.0;
  double cauchy_scale = 5.0;
  bool shared_noise = false;  // e(0) = e(1) when set
  std::uint64_t seed = 0;
};

struct SimulatedDataset {
  Dataset dataset;
  Vector y_potential_0;
  Vector y_potential_1;
  double true_sate = 0.0;
  std::vector<Index> contaminated_indices;
};

inline SimulatedDataset simulate_design_a(const DesignAConfig& cfg_in) {
  DesignAConfig cfg = cfg_in;
  if (cfg.n < 2 || cfg.p < 1) throw Error(ErrorKind::InvalidArgument, "design A needs n >= 2, p >= 1");
  if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0)) throw Error(ErrorKind::InvalidArgument, "rho must lie in [0, 1]");
  if (!(cfg.cauchy_scale > 0.0)) throw Error(ErrorKind::InvalidArgument, "Cauchy scale must be positive");
  for (Vector* b : {&cfg.beta0_true, &cfg.beta1_true, &cfg.beta2_true}) {
    if (b->size() == 0) *b = alternating_sparse(cfg.p, 10);
    if (b->size() != cfg.p) throw Error(ErrorKind::ShapeMismatch, "true beta must have length p");
  }
  const CounterRng root(cfg.seed);
  CounterRng rx = root.split(kTagCovariates);
  CounterRng rt = root.split(kTagTreatment);
  CounterRng re = root.split(kTagNoise);
  CounterRng rc = root.split(kTagContamination);
  CounterRng rcauchy = root.split(kTagCauchy);

  const Index n = cfg.n;
  Matrix x(n, cfg.p);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < cfg.p; ++j) x(i, j) = rx.normal();
  Vector t(n);
  const Vector lin = x * cfg.beta2_true;
  for (Index i = 0; i < n; ++i) t[i] = rt.uniform() < logistic(lin[i]) ? 1.0 : 0.0;
  Vector e0(n), e1(n);
  for (Index i = 0; i < n; ++i) {
    e0[i] = re.normal();
    e1[i] = cfg.shared_noise ? e0[i] : re.normal();
  }
  const auto k = static_cast<std::size_t>(std::floor(cfg.rho * static_cast<double>(n) + 1e-9));
  std::vector<Index> contaminated;
  for (std::size_t idx : sample_without_replacement(static_cast<std::size_t>(n), k, rc)) {
    const Index i = static_cast<Index>(idx);
    // one draw shared by both potential outcomes
    const double c = cauchy_from_uniform(rcauchy.uniform(), cfg.cauchy_loc, cfg.cauchy_scale);
    e0[i] = c;
    e1[i] = c;
    contaminated.push_back(i);
  }
  Vector y0 = x * cfg.beta0_true + e0;
  Vector y1 = x * cfg.beta1_true + e1;
  Vector y(n);
  for (Index i = 0; i < n; ++i) y[i] = t[i] == 1.0 ? y1[i] : y0[i];
  const double sate = (y1 - y0).mean();
  return SimulatedDataset{validate_dataset(std::move(x), std::move(t), std::move(y)), std::move(y0), std::move(y1),
                          sate, std::move(contaminated)};
}

struct DesignBConfig {
  Index n = 50;
  double beta0 = 1.0;
  double beta1 = 2.0;
  double sigma = 1.0;
  double rho = 0.0;
  double cauchy_loc = 0.0;
  double cauchy_scale = 5.0;
  std::uint64_t seed = 0;
};

struct RegressionData {
  Vector x;
  Vector y;
  std::vector<Index> contaminated_indices;

  /// Design matrix with an intercept column.
  Matrix design() const {
    Matrix d(x.size(), 2);
    d.col(0).setOnes();
    d.col(1) = x;
    return d;
  }
};

inline RegressionData simulate_design_b(const DesignBConfig& cfg) {
  if (cfg.n < 2) throw Error(ErrorKind::InvalidArgument, "design B needs n >= 2");
  if (!(cfg.sigma > 0.0)) throw Error(ErrorKind::InvalidArgument, "sigma must be positive");
  if (!(cfg.rho >= 0.0 && cfg.rho <= 1.0)) throw Error(ErrorKind::InvalidArgument, "rho must lie in [0, 1]");
  const CounterRng root(cfg.seed);
  CounterRng rx = root.split(kTagCovariates);
  CounterRng re = root.split(kTagNoise);
  CounterRng rc = root.split(kTagContamination);
  CounterRng rcauchy = root.split(kTagCauchy);
  RegressionData out;
  out.x.resize(cfg.n);
  out.y.resize(cfg.n);
  Vector e(cfg.n);
  for (Index i = 0; i < cfg.n; ++i) out.x[i] = rx.normal();
  for (Index i = 0; i < cfg.n; ++i) e[i] = cfg.sigma * re.normal();
  const auto k = static_cast<std::size_t>(std::floor(cfg.rho * static_cast<double>(cfg.n) + 1e-9));
  for (std::size_t idx : sample_without_replacement(static_cast<std::size_t>(cfg.n), k, rc)) {
    const Index i = static_cast<Index>(idx);
    e[i] = cauchy_from_uniform(rcauchy.uniform(), cfg.cauchy_loc, cfg.cauchy_scale);
    out.contaminated_indices.push_back(i);
  }
  out.y = (cfg.beta0 + cfg.beta1 * out.x.array() + e.array()).matrix();
  return out;
}

/// CSV with columns y, t, x1..xp and 17 significant digits.
inline void write_dataset_csv(const Dataset& d, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  f << "y,t";
  for (Index j = 0; j < d.p(); ++j) f << ",x" << (j + 1);
  f << '\n' << std::setprecision(17);
  for (Index i = 0; i < d.n(); ++i) {
    f << d.y()[i] << ',' << static_cast<int>(d.t()[i]);
    for (Index j = 0; j < d.p(); ++j) f << ',' << d.x()(i, j);
    f << '\n';
  }
  if (!f) throw Error(ErrorKind::IoError, "write failed for " + path);
}

}  // namespace robust_ate
