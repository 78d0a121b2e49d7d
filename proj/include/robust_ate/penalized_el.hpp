#pragma once

// SCAD-penalized empirical likelihood for eta = (beta0, beta1, beta2).
//
// Per-unit estimating functions are stacked as Psi_i = (g_i, U_1i, U_0i).
// The profile log EL ratio L_n(eta) = max_lambda sum log(1 + lambda' Psi_i)
// is computed by a damped dual Newton iteration (with Owen's quadratic
// log* below 1/n), and Q_n = L_n + n sum_l sum_j scad_tau_l(|beta_lj|) is
// minimized by local linear approximation of SCAD plus a Gauss–Newton model
// of L_n, solved as a weighted lasso by coordinate descent.
//
// In p >> n problems the moment system is restricted to per-block working
// covariate sets (marginal screening); coefficients outside them stay at 0.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "robust_ate/cbps.hpp"
#include "robust_ate/data_model.hpp"
#include "robust_ate/error.hpp"
#include "robust_ate/robust_outcome.hpp"

namespace robust_ate {

// ---------------------------------------------------------------------------
// Moment system layout

/// Which covariates enter each block's moments, and the balance map.
struct MomentSpec {
  BalanceMap map = BalanceMap::identity_square;
  std::array<std::vector<Index>, 3> working;  // indexed by Block
  double clip_eps = 1e-6;

  static MomentSpec full(Index p, BalanceMap map = BalanceMap::identity_square) {
    MomentSpec s;
    s.map = map;
    for (auto& w : s.working) {
      w.resize(static_cast<std::size_t>(p));
      std::iota(w.begin(), w.end(), Index{0});
    }
    return s;
  }

  const std::vector<Index>& set(Block b) const noexcept { return working[static_cast<int>(b)]; }
  Index g_dim() const noexcept { return balance_dim(static_cast<Index>(set(Block::propensity).size()), map); }
  Index dim() const noexcept {
    return g_dim() + static_cast<Index>(set(Block::treated).size() + set(Block::control).size());
  }
  /// Column offsets of the (g, U1, U0) sub-blocks.
  Index offset_u1() const noexcept { return g_dim(); }
  Index offset_u0() const noexcept { return g_dim() + static_cast<Index>(set(Block::treated).size()); }

  /// Stacked-eta positions that are free parameters.
  std::vector<Index> free_coordinates(Index p) const {
    std::vector<Index> out;
    for (int k = 0; k < 3; ++k)
      for (Index j : working[k]) out.push_back(k * p + j);
    return out;
  }
};

struct MomentStack {
  Matrix psi;       // n x m, rows Psi_i'
  Matrix jacobian;  // m x 3p, mean d Psi / d eta, columns ordered (beta0, beta1, beta2)
};

namespace detail {

/// Per-unit quantities shared by the moment rows and Jacobians.
struct UnitTerms {
  Vector pi, dpi;         // propensity and d pi / d linear predictor
  Vector weight, slope;   // balance weight c_i and d c_i / d pi
  Vector gamma1, gamma0;  // standardized residuals under each arm's model
};

/// x * beta, touching only the nonzero coefficients when beta is sparse.
inline Vector sparse_product(const Matrix& x, const Vector& beta) {
  Index nnz = 0;
  for (Index j = 0; j < beta.size(); ++j) nnz += beta[j] != 0.0;
  if (4 * nnz >= beta.size()) return x * beta;
  Vector out = Vector::Zero(x.rows());
  for (Index j = 0; j < beta.size(); ++j)
    if (beta[j] != 0.0) out.noalias() += beta[j] * x.col(j);
  return out;
}

inline UnitTerms unit_terms(const Dataset& d, const ParameterBlocks& b, double clip_eps) {
  const Index n = d.n();
  UnitTerms u;
  u.pi.resize(n);
  u.dpi.resize(n);
  u.weight.resize(n);
  u.slope.resize(n);
  const Vector lin = sparse_product(d.view(Block::propensity), b.beta2);
  for (Index i = 0; i < n; ++i) {
    const auto pv = propensity_value(lin[i], clip_eps);
    u.pi[i] = pv.pi;
    u.dpi[i] = pv.dpi;
    u.weight[i] = balance_weight(d.t()[i], pv.pi);
    u.slope[i] = balance_weight_slope(d.t()[i], pv.pi);
  }
  u.gamma1 = (d.y() - sparse_product(d.view(Block::treated), b.beta1)) / b.sigma;
  u.gamma0 = (d.y() - sparse_product(d.view(Block::control), b.beta0)) / b.sigma;
  return u;
}

inline Matrix gather_columns(const Matrix& x, const std::vector<Index>& cols) {
  Matrix out(x.rows(), static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Index>(c)) = x.col(cols[c]);
  return out;
}

inline Matrix balance_feature_matrix(const Matrix& x_sub, BalanceMap map) {
  const Index k = x_sub.cols();
  Matrix f(x_sub.rows(), balance_dim(k, map));
  f.leftCols(k) = x_sub;
  if (map == BalanceMap::identity_square) f.rightCols(k) = x_sub.array().square().matrix();
  return f;
}

}  // namespace detail

/// Rows Psi_i' = (g_i', U_1i', U_0i') restricted to the working sets.
inline Matrix moment_rows(const Dataset& d, const ParameterBlocks& b, const MomentSpec& spec) {
  if (b.p() != d.p() || b.beta1.size() != d.p() || b.beta2.size() != d.p())
    throw Error(ErrorKind::ShapeMismatch, "parameter blocks do not match dataset width");
  const auto u = detail::unit_terms(d, b, spec.clip_eps);
  const Index n = d.n();
  Matrix rows(n, spec.dim());
  const Matrix f = detail::balance_feature_matrix(
      detail::gather_columns(d.view(Block::propensity), spec.set(Block::propensity)), spec.map);
  rows.leftCols(spec.g_dim()) = u.weight.asDiagonal() * f;
  const Matrix x1 = detail::gather_columns(d.view(Block::treated), spec.set(Block::treated));
  const Matrix x0 = detail::gather_columns(d.view(Block::control), spec.set(Block::control));
  Vector s1(n), s0(n);
  for (Index i = 0; i < n; ++i) {
    const double t = d.t()[i];
    s1[i] = t * psi(u.gamma1[i], b.psi_threshold) / b.sigma;
    s0[i] = (1.0 - t) * psi(u.gamma0[i], b.psi_threshold) / b.sigma;
  }
  rows.middleCols(spec.offset_u1(), x1.cols()) = s1.asDiagonal() * x1;
  rows.middleCols(spec.offset_u0(), x0.cols()) = s0.asDiagonal() * x0;
  return rows;
}

/// sum_i w_i d Psi_i / d eta  (m x 3p). Uniform w = 1/n gives the mean Jacobian.
/// With `working_only` the columns outside the working sets are left at zero.
inline Matrix weighted_moment_jacobian(const Dataset& d, const ParameterBlocks& b,
                                       const MomentSpec& spec, const Vector& w, bool working_only = false) {
  const Index n = d.n();
  const Index p = d.p();
  if (w.size() != n) throw Error(ErrorKind::ShapeMismatch, "one weight per unit required");
  const auto u = detail::unit_terms(d, b, spec.clip_eps);
  Matrix jac = Matrix::Zero(spec.dim(), 3 * p);
  // rows x diag(c) x view, written into the block's p columns
  const auto fill = [&](Index row0, Index col0, const Matrix& left, const Vector& c, const Matrix& view,
                        const std::vector<Index>& set) {
    const Matrix lc = left.transpose() * c.asDiagonal();
    if (!working_only) {
      jac.block(row0, col0, left.cols(), p) = lc * view;
      return;
    }
    for (Index j : set) jac.block(row0, col0 + j, left.cols(), 1) = lc * view.col(j);
  };

  // g block: c'(pi) * pi'(lin) * f(x_S2) x2'
  const Matrix f = detail::balance_feature_matrix(
      detail::gather_columns(d.view(Block::propensity), spec.set(Block::propensity)), spec.map);
  const Vector cg = (w.array() * u.slope.array() * u.dpi.array()).matrix();
  fill(0, 2 * p, f, cg, d.view(Block::propensity), spec.set(Block::propensity));

  const double inv_s2 = 1.0 / (b.sigma * b.sigma);
  Vector c1(n), c0(n);
  for (Index i = 0; i < n; ++i) {
    const double t = d.t()[i];
    c1[i] = -w[i] * t * psi_slope(u.gamma1[i], b.psi_threshold) * inv_s2;
    c0[i] = -w[i] * (1.0 - t) * psi_slope(u.gamma0[i], b.psi_threshold) * inv_s2;
  }
  const Matrix x1 = detail::gather_columns(d.view(Block::treated), spec.set(Block::treated));
  const Matrix x0 = detail::gather_columns(d.view(Block::control), spec.set(Block::control));
  fill(spec.offset_u1(), p, x1, c1, d.view(Block::treated), spec.set(Block::treated));
  fill(spec.offset_u0(), 0, x0, c0, d.view(Block::control), spec.set(Block::control));
  return jac;
}

/// Jacobian of a single unit's Psi_i (m x 3p).
inline Matrix unit_moment_jacobian(const Dataset& d, const ParameterBlocks& b,
                                   const MomentSpec& spec, Index i, bool working_only = false) {
  Vector w = Vector::Zero(d.n());
  w[i] = 1.0;
  return weighted_moment_jacobian(d, b, spec, w, working_only);
}

inline MomentStack stack_moments(const Dataset& d, const ParameterBlocks& b, const MomentSpec& spec) {
  MomentStack s;
  s.psi = moment_rows(d, b, spec);
  s.jacobian = weighted_moment_jacobian(
      d, b, spec, Vector::Constant(d.n(), 1.0 / static_cast<double>(d.n())));
  return s;
}

// ---------------------------------------------------------------------------
// Inner EL problem

struct ELOptions {
  double tol = 1e-10;  // on the mean dual gradient, sup norm
  int max_iter = 200;
};

struct ELInnerResult {
  Vector lambda;
  double log_el = 0.0;  // L_n
  Vector weights;       // w_i = 1 / (n (1 + lambda' Psi_i))
  int iterations = 0;
  bool converged = false;
};

namespace detail {

/// Owen's pseudo-logarithm: log z above eps, quadratic continuation below.
struct LogStar {
  double eps;
  double value(double z) const noexcept {
    if (z >= eps) return std::log(z);
    const double r = z / eps;
    return std::log(eps) - 1.5 + 2.0 * r - 0.5 * r * r;
  }
  double d1(double z) const noexcept { return z >= eps ? 1.0 / z : (2.0 - z / eps) / eps; }
  double d2(double z) const noexcept { return z >= eps ? -1.0 / (z * z) : -1.0 / (eps * eps); }
};

}  // namespace detail

/// Maximizes sum_i log*(1 + lambda' Psi_i) over lambda by damped Newton.
/// Throws ConvexHullViolation when zero is not inside the convex hull of
/// the rows (the dual diverges or the log* continuation is active at the
/// optimum) and SingularHessian when the rows are linearly degenerate.
inline ELInnerResult el_inner_solve(const Matrix& psi, const ELOptions& opts = {},
                                    const Vector* warm_start = nullptr) {
  const Index n = psi.rows();
  const Index m = psi.cols();
  if (n < 1 || m < 1) throw Error(ErrorKind::ShapeMismatch, "empty moment matrix");
  if (!psi.allFinite()) throw Error(ErrorKind::NonFiniteValue, "moment rows are not finite");
  const double dn = static_cast<double>(n);
  const detail::LogStar ls{1.0 / dn};

  ELInnerResult res;
  res.lambda = (warm_start && warm_start->size() == m) ? *warm_start : Vector::Zero(m);

  auto evaluate = [&](const Vector& lam, Vector& z) {
    z = Vector::Ones(n) + psi * lam;
    double f = 0.0;
    for (Index i = 0; i < n; ++i) f += ls.value(z[i]);
    return f;
  };

  Vector z;
  double f = evaluate(res.lambda, z);
  if (warm_start) {
    Vector z0;
    const double f0 = evaluate(Vector::Zero(m), z0);
    if (!(f >= f0)) {
      res.lambda.setZero();
      f = f0;
      z = z0;
    }
  }

  const double scale = std::max(1.0, psi.cwiseAbs().maxCoeff());
  for (int it = 0; it < opts.max_iter; ++it) {
    Vector d1(n), d2(n);
    for (Index i = 0; i < n; ++i) {
      d1[i] = ls.d1(z[i]);
      d2[i] = ls.d2(z[i]);
    }
    const Vector grad = psi.transpose() * d1;
    res.iterations = it;
    if (grad.lpNorm<Eigen::Infinity>() / dn <= opts.tol) {
      res.converged = true;
      break;
    }
    const Matrix neg_hess = psi.transpose() * (-d2).asDiagonal() * psi;
    Eigen::LDLT<Matrix> ldlt(neg_hess);
    const Vector diag = ldlt.vectorD();
    if (ldlt.info() != Eigen::Success || diag.minCoeff() <= 1e-13 * std::max(diag.maxCoeff(), 1e-300))
      throw Error(ErrorKind::SingularHessian, "EL dual Hessian is singular");
    const Vector step = ldlt.solve(grad);
    double s = 1.0;
    bool accepted = false;
    const double slope = grad.dot(step);
    // Newton decrement at rounding level: Armijo cannot see the gain, so take
    // the pure Newton step while it still shrinks the gradient
    if (slope <= 1e-15 * std::max(1.0, std::abs(f))) {
      const Vector trial = res.lambda + step;
      Vector zt;
      const double ft = evaluate(trial, zt);
      Vector dt(n);
      for (Index i = 0; i < n; ++i) dt[i] = ls.d1(zt[i]);
      if (std::isfinite(ft) && (psi.transpose() * dt).lpNorm<Eigen::Infinity>() < grad.lpNorm<Eigen::Infinity>()) {
        res.lambda = trial;
        z = zt;
        f = std::max(f, ft);
        continue;
      }
      res.converged = true;
      break;
    }
    for (int k = 0; k < 60; ++k, s *= 0.5) {
      const Vector trial = res.lambda + s * step;
      Vector zt;
      const double ft = evaluate(trial, zt);
      if (std::isfinite(ft) && ft >= f + 1e-4 * s * slope) {
        res.lambda = trial;
        z = zt;
        f = ft;
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    if (res.lambda.norm() * scale > 1e12)
      throw Error(ErrorKind::ConvexHullViolation, "EL dual diverges; zero is outside the hull of Psi");
  }
  if (!res.converged) {
    // One last gradient check after a stalled line search.
    Vector d1(n);
    for (Index i = 0; i < n; ++i) d1[i] = ls.d1(z[i]);
    res.converged = (psi.transpose() * d1).lpNorm<Eigen::Infinity>() / dn <= opts.tol;
  }
  if (z.minCoeff() < ls.eps)
    throw Error(ErrorKind::ConvexHullViolation, "EL barrier active at the dual optimum");
  res.weights = (1.0 / (dn * z.array())).matrix();
  if (std::abs(res.weights.sum() - 1.0) > 1e-6)
    throw Error(ErrorKind::ConvexHullViolation, "EL weights do not form a probability vector");
  if (!res.converged)
    throw Error(ErrorKind::NotConverged, "EL dual Newton did not reach tolerance");
  res.log_el = f;
  return res;
}

// ---------------------------------------------------------------------------
// SCAD

struct PenaltyConfig {
  std::array<double, 3> tau{0.0, 0.0, 0.0};  // indexed by Block
  double scad_a = 3.7;
  double zero_threshold = 1e-4;

  static PenaltyConfig shared(double tau) {
    PenaltyConfig c;
    c.tau = {tau, tau, tau};
    return c;
  }
};

inline double scad(double t, double tau, double a = 3.7) {
  if (t < 0.0 || tau < 0.0) throw Error(ErrorKind::InvalidArgument, "SCAD needs t >= 0 and tau >= 0");
  if (!(a > 2.0)) throw Error(ErrorKind::InvalidArgument, "SCAD shape must exceed 2");
  if (tau == 0.0) return 0.0;
  if (t <= tau) return tau * t;
  if (t <= a * tau) return (2.0 * a * tau * t - t * t - tau * tau) / (2.0 * (a - 1.0));
  return 0.5 * (a + 1.0) * tau * tau;
}

inline double scad_derivative(double t, double tau, double a = 3.7) {
  if (t < 0.0 || tau < 0.0) throw Error(ErrorKind::InvalidArgument, "SCAD needs t >= 0 and tau >= 0");
  if (!(a > 2.0)) throw Error(ErrorKind::InvalidArgument, "SCAD shape must exceed 2");
  if (tau == 0.0) return 0.0;
  if (t <= tau) return tau;
  return std::max(a * tau - t, 0.0) / (a - 1.0);
}

inline double penalty_total(const ParameterBlocks& b, const PenaltyConfig& pen) {
  double s = 0.0;
  for (int k = 0; k < 3; ++k) {
    const Vector& beta = b.beta(static_cast<Block>(k));
    for (Index j = 0; j < beta.size(); ++j) s += scad(std::abs(beta[j]), pen.tau[k], pen.scad_a);
  }
  return s;
}

struct Objective {
  double q = 0.0;
  double log_el = 0.0;
  ELInnerResult inner;
};

/// Q_n = L_n + n * sum of SCAD penalties.
inline Objective objective_qn(const Dataset& d, const ParameterBlocks& b, const PenaltyConfig& pen,
                              const MomentSpec& spec, const Vector* warm = nullptr) {
  Objective o;
  o.inner = el_inner_solve(moment_rows(d, b, spec), {}, warm);
  o.log_el = o.inner.log_el;
  o.q = o.log_el + static_cast<double>(d.n()) * penalty_total(b, pen);
  return o;
}

// ---------------------------------------------------------------------------
// Screening and initialization

struct ScreeningOptions {
  bool enabled = true;
  /// Working-set caps: outcome blocks n_k / outcome_ratio, propensity
  /// n / propensity_ratio (halved again when squares are balanced).
  double outcome_ratio = 3.0;
  double propensity_ratio = 10.0;
  /// Each working set alternates picks between its own ranking and the
  /// other model's ranking, so a confounder missed by one screen can still
  /// enter through the other.
  bool double_selection = true;
};

namespace detail {

inline double abs_corr(const Eigen::Ref<const Vector>& a, const Eigen::Ref<const Vector>& b) {
  const Vector ac = a.array() - a.mean();
  const Vector bc = b.array() - b.mean();
  const double den = std::sqrt(ac.squaredNorm() * bc.squaredNorm());
  return den > 0.0 ? std::abs(ac.dot(bc)) / den : 0.0;
}

/// Indices ordered by decreasing score (stable on ties).
inline std::vector<Index> ranking(const std::vector<double>& score) {
  std::vector<Index> idx(score.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return score[a] > score[b]; });
  return idx;
}

inline std::vector<Index> top_k(const std::vector<double>& score, Index k) {
  std::vector<Index> idx = ranking(score);
  idx.resize(static_cast<std::size_t>(std::min<Index>(k, static_cast<Index>(idx.size()))));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// First k distinct picks alternating between two rankings, in pick order.
inline std::vector<Index> interleave(const std::vector<Index>& own, const std::vector<Index>& other, Index k) {
  std::vector<Index> out;
  std::vector<char> taken(own.size(), 0);
  std::size_t a = 0, b = 0;
  bool from_own = true;
  while (static_cast<Index>(out.size()) < k && (a < own.size() || b < other.size())) {
    const std::vector<Index>& src = from_own ? own : other;
    std::size_t& pos = from_own ? a : b;
    while (pos < src.size() && taken[static_cast<std::size_t>(src[pos])]) ++pos;
    if (pos < src.size()) {
      taken[static_cast<std::size_t>(src[pos])] = 1;
      out.push_back(src[pos++]);
    }
    from_own = !from_own;
  }
  return out;
}

inline std::vector<Index> sorted_prefix(const std::vector<Index>& order, Index k) {
  std::vector<Index> out(order.begin(), order.begin() + std::min<Index>(k, static_cast<Index>(order.size())));
  std::sort(out.begin(), out.end());
  return out;
}

/// Within-arm |corr| of each covariate with the arm's winsorized outcome.
inline std::vector<double> arm_outcome_scores(const Dataset& d, Block b) {
  const bool treated = b == Block::treated;
  std::vector<Index> rows;
  for (Index i = 0; i < d.n(); ++i)
    if (d.treated(i) == treated) rows.push_back(i);
  Vector y(static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) y[static_cast<Index>(r)] = d.y()[rows[r]];
  std::vector<double> yv(y.data(), y.data() + y.size());
  const double med = median(yv);
  const double s = estimate_scale(yv);
  y = y.array().min(med + 2.5 * s).max(med - 2.5 * s).matrix();
  std::vector<double> score(static_cast<std::size_t>(d.p()));
  const Matrix& xv = d.view(b);
  for (Index j = 0; j < d.p(); ++j) {
    Vector xj(static_cast<Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) xj[static_cast<Index>(r)] = xv(rows[r], j);
    score[static_cast<std::size_t>(j)] = abs_corr(xj, y);
  }
  return score;
}

}  // namespace detail

/// Squares are balanced when the full system is small relative to n, and
/// dropped once screening is needed.
inline BalanceMap default_balance_map(const Dataset& d, const ScreeningOptions& opts = {}) {
  const double n = static_cast<double>(d.n());
  const double p = static_cast<double>(d.p());
  const bool fits = p <= std::floor(static_cast<double>(d.n_treated()) / opts.outcome_ratio) &&
                    p <= std::floor(static_cast<double>(d.n_control()) / opts.outcome_ratio) &&
                    p <= std::floor(n / (2.0 * opts.propensity_ratio));
  return (fits || !opts.enabled) ? BalanceMap::identity_square : BalanceMap::identity;
}

/// Full moment system when it is small relative to n; otherwise marginal
/// screening. Outcome covariates are ranked by the pooled within-arm
/// squared correlation with a winsorized outcome, propensity covariates by
/// |corr| with T. `propensity_order` keeps the pick order of the
/// propensity set so that it can be shrunk from the end.
inline MomentSpec choose_moment_spec(const Dataset& d, std::optional<BalanceMap> map_opt = std::nullopt,
                                     const ScreeningOptions& opts = {},
                                     std::vector<Index>* propensity_order = nullptr) {
  const Index p = d.p();
  const double n = static_cast<double>(d.n());
  const BalanceMap map = map_opt ? *map_opt : default_balance_map(d, opts);
  const auto cap = [&](double count, double ratio) {
    return std::max<Index>(1, static_cast<Index>(std::floor(count / ratio)));
  };
  const Index d1 = cap(static_cast<double>(d.n_treated()), opts.outcome_ratio);
  const Index d0 = cap(static_cast<double>(d.n_control()), opts.outcome_ratio);
  const Index d2 = cap(n, opts.propensity_ratio * (map == BalanceMap::identity_square ? 2.0 : 1.0));
  MomentSpec spec = MomentSpec::full(p, map);
  if (!opts.enabled || (p <= d1 && p <= d0 && p <= d2)) {
    if (propensity_order) *propensity_order = spec.working[2];
    return spec;
  }

  const std::vector<double> s1 = detail::arm_outcome_scores(d, Block::treated);
  const std::vector<double> s0 = detail::arm_outcome_scores(d, Block::control);
  const double n1 = static_cast<double>(d.n_treated());
  const double n0 = static_cast<double>(d.n_control());
  std::vector<double> pooled(static_cast<std::size_t>(p));
  for (std::size_t j = 0; j < pooled.size(); ++j) pooled[j] = (n1 * s1[j] * s1[j] + n0 * s0[j] * s0[j]) / n;
  std::vector<double> sp(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j)
    sp[static_cast<std::size_t>(j)] = detail::abs_corr(d.view(Block::propensity).col(j), d.t());

  const std::vector<Index> out_rank = detail::ranking(pooled);
  const std::vector<Index> ps_rank = detail::ranking(sp);
  std::vector<Index> order2;
  if (opts.double_selection) {
    spec.working[1] = detail::sorted_prefix(detail::interleave(out_rank, ps_rank, d1), d1);
    spec.working[0] = detail::sorted_prefix(detail::interleave(out_rank, ps_rank, d0), d0);
    order2 = detail::interleave(ps_rank, out_rank, d2);
  } else {
    spec.working[1] = detail::sorted_prefix(out_rank, d1);
    spec.working[0] = detail::sorted_prefix(out_rank, d0);
    order2.assign(ps_rank.begin(), ps_rank.begin() + std::min<Index>(d2, p));
  }
  spec.working[2] = detail::sorted_prefix(order2, d2);
  if (propensity_order) *propensity_order = std::move(order2);
  return spec;
}

/// Ridge logistic beta2 and per-arm ridge least squares beta_k on the
/// working sets, with sigma and a resolved from the resulting residuals.
inline ParameterBlocks default_initial(const Dataset& d, const MomentSpec& spec,
                                       const PsiConfig& psi_cfg = {}, double ridge = 1e-4) {
  const Index p = d.p();
  ParameterBlocks b = ParameterBlocks::zeros(p);
  {
    const auto& s2 = spec.set(Block::propensity);
    const Vector sub = fit_logistic_ridge(detail::gather_columns(d.view(Block::propensity), s2), d.t(), ridge);
    for (std::size_t c = 0; c < s2.size(); ++c) b.beta2[s2[c]] = sub[static_cast<Index>(c)];
  }
  for (int arm = 0; arm < 2; ++arm) {
    const Block blk = static_cast<Block>(arm);
    const auto& s = spec.set(blk);
    const Matrix xs = detail::gather_columns(d.view(blk), s);
    Vector w(d.n());
    for (Index i = 0; i < d.n(); ++i) w[i] = d.treated(i) == (arm == 1) ? 1.0 : 0.0;
    Matrix a = xs.transpose() * w.asDiagonal() * xs;
    a.diagonal().array() += ridge;
    const Vector sub = a.ldlt().solve(xs.transpose() * w.asDiagonal() * d.y());
    for (std::size_t c = 0; c < s.size(); ++c) b.beta(blk)[s[c]] = sub[static_cast<Index>(c)];
  }
  const Tuning tu = resolve_outcome_tuning(d, b, psi_cfg);
  b.sigma = tu.sigma;
  b.psi_threshold = tu.a;
  return b;
}

// ---------------------------------------------------------------------------
// Outer optimization

struct FitOptions {
  int max_outer = 500;     // total accepted+rejected outer iterations
  double tol = 1e-6;       // on max |delta eta|
  double objective_tol = 1e-8;   // relative decrease of Q that counts as a stall
  int max_stages = 10;     // sigma/a profiling rounds
  double tuning_tol = 1e-4;  // relative change that triggers another round
  bool record_trace = true;
};

struct TraceRow {
  int iteration = 0;
  int stage = 0;
  double q = 0.0;
  double log_el = 0.0;
  double max_step = 0.0;
  std::array<Index, 3> active{0, 0, 0};
};

struct FitResult {
  ParameterBlocks blocks;
  ActiveSet active;
  ELInnerResult inner;
  double objective = 0.0;
  PenaltyConfig penalty;
  MomentSpec spec;
  std::vector<TraceRow> trace;
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline void threshold_in_place(Vector& eta, double thr, bool& changed) {
  changed = false;
  for (Index j = 0; j < eta.size(); ++j)
    if (eta[j] != 0.0 && std::abs(eta[j]) < thr) {
      eta[j] = 0.0;
      changed = true;
    }
}

/// argmin_u  b'u + u'Hu/2 + sum c_j |u_j| over the listed coordinates.
inline Vector weighted_lasso_cd(const Matrix& h, const Vector& lin, const Vector& c, Vector u,
                                int max_sweeps = 2000, double tol = 1e-13) {
  const Index q = h.rows();
  Vector hu = h * u;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double change = 0.0;
    for (Index j = 0; j < q; ++j) {
      const double hjj = h(j, j);
      const double partial = lin[j] + hu[j] - hjj * u[j];
      double next = 0.0;
      if (partial < -c[j]) next = (-partial - c[j]) / hjj;
      else if (partial > c[j]) next = (-partial + c[j]) / hjj;
      const double delta = next - u[j];
      if (delta != 0.0) {
        hu += delta * h.col(j);
        u[j] = next;
        change = std::max(change, std::abs(delta));
      }
    }
    if (change < tol) break;
  }
  return u;
}

}  // namespace detail

/// Minimizes Q_n from `init` (or the default initializer). sigma and a are
/// re-resolved between descent rounds unless fixed in `psi_cfg`; an `init`
/// carrying positive sigma/a seeds the first round with them.
inline FitResult fit_penalized_el(const Dataset& d, const PenaltyConfig& pen, const PsiConfig& psi_cfg,
                                  const MomentSpec& spec, std::optional<ParameterBlocks> init = std::nullopt,
                                  const FitOptions& opts = {}) {
  const Index p = d.p();
  const double dn = static_cast<double>(d.n());
  if (!(pen.scad_a > 2.0)) throw Error(ErrorKind::InvalidArgument, "SCAD shape must exceed 2");
  ParameterBlocks blocks = init ? *init : default_initial(d, spec, psi_cfg);
  if (blocks.p() != p) throw Error(ErrorKind::ShapeMismatch, "initial blocks do not match dataset width");
  if (!init || !(blocks.sigma > 0.0) || !(blocks.psi_threshold > 0.0)) {
    const Tuning tu = resolve_outcome_tuning(d, blocks, psi_cfg);
    blocks.sigma = tu.sigma;
    blocks.psi_threshold = tu.a;
  } else {
    if (psi_cfg.scale) blocks.sigma = *psi_cfg.scale;
    if (psi_cfg.threshold) blocks.psi_threshold = *psi_cfg.threshold;
  }

  const std::vector<Index> free = spec.free_coordinates(p);
  const Index q = static_cast<Index>(free.size());
  Vector eta = stack_parameters(blocks);
  {
    // coefficients outside the working sets are pinned at zero
    Vector pinned = Vector::Zero(3 * p);
    for (Index j : free) pinned[j] = eta[j];
    eta = pinned;
  }
  auto tau_of = [&](Index stacked) { return pen.tau[static_cast<std::size_t>(stacked / p)]; };

  FitResult fit;
  fit.penalty = pen;
  fit.spec = spec;
  int total_iter = 0;
  bool hit_limit = false;

  auto evaluate = [&](const Vector& e, const Vector* warm) {
    return objective_qn(d, unstack_parameters(e, p, &blocks), pen, spec, warm);
  };

  Objective cur = evaluate(eta, nullptr);  // throws ConvexHullViolation at an infeasible start

  for (int stage = 0; stage < opts.max_stages && !hit_limit; ++stage) {
    for (int polish = 0; polish < 4; ++polish) {
      // descent with fixed sigma and a
      while (true) {
        if (total_iter >= opts.max_outer) {
          hit_limit = true;
          break;
        }
        ++total_iter;
        const ParameterBlocks cb = unstack_parameters(eta, p, &blocks);
        // Gauss-Newton model of the profiled log EL ratio, with the moment
        // Jacobian and second moments weighted by the current dual solution
        const Matrix psi_rows = moment_rows(d, cb, spec);
        Vector dual_w(d.n()), curv(d.n());
        {
          const detail::LogStar ls{1.0 / dn};
          const Vector z = Vector::Ones(d.n()) + psi_rows * cur.inner.lambda;
          for (Index i = 0; i < d.n(); ++i) {
            dual_w[i] = ls.d1(z[i]);
            curv[i] = -ls.d2(z[i]);
          }
        }
        const Matrix jw = weighted_moment_jacobian(d, cb, spec, dual_w, true);
        const Vector grad_full = jw.transpose() * cur.inner.lambda;
        Matrix s = psi_rows.transpose() * curv.asDiagonal() * psi_rows / dn;
        s.diagonal().array() += 1e-10 * std::max(s.trace() / static_cast<double>(s.rows()), 1e-300);
        Matrix r(spec.dim(), q);
        Vector g(q), c(q), u0(q);
        for (Index k = 0; k < q; ++k) {
          r.col(k) = jw.col(free[k]) / dn;
          g[k] = grad_full[free[k]];
          u0[k] = eta[free[k]];
          c[k] = dn * scad_derivative(std::abs(u0[k]), tau_of(free[k]), pen.scad_a);
        }
        Matrix h = dn * (r.transpose() * s.ldlt().solve(r));
        h = 0.5 * (h + h.transpose());
        const double ridge = 1e-8 * std::max(h.diagonal().maxCoeff(), 1e-12);
        h.diagonal().array() += ridge;
        const Vector lin = g - h * u0;
        Vector u = detail::weighted_lasso_cd(h, lin, c, u0);
        for (Index k = 0; k < q; ++k)
          if (std::abs(u[k]) < pen.zero_threshold) u[k] = 0.0;
        const Vector dir = u - u0;
        const double max_dir = dir.lpNorm<Eigen::Infinity>();
        if (max_dir < opts.tol) break;

        double predicted = g.dot(dir);
        for (Index k = 0; k < q; ++k) predicted += c[k] * (std::abs(u[k]) - std::abs(u0[k]));
        if (!(predicted < 0.0)) break;

        const double q_before = cur.q;
        double step = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls, step *= 0.5) {
          Vector trial = eta;
          for (Index k = 0; k < q; ++k) trial[free[k]] = u0[k] + step * dir[k];
          try {
            Objective ot = evaluate(trial, &cur.inner.lambda);
            if (ot.q <= cur.q + 1e-4 * step * predicted) {
              eta = trial;
              cur = std::move(ot);
              accepted = true;
              break;
            }
          } catch (const Error& e) {
            if (e.kind() != ErrorKind::ConvexHullViolation && e.kind() != ErrorKind::SingularHessian &&
                e.kind() != ErrorKind::NotConverged)
              throw;
          }
        }
        if (opts.record_trace) {
          TraceRow row;
          row.iteration = total_iter;
          row.stage = stage;
          row.q = cur.q;
          row.log_el = cur.log_el;
          row.max_step = accepted ? step * max_dir : 0.0;
          const ActiveSet as = ActiveSet::of(unstack_parameters(eta, p, &blocks));
          for (int k = 0; k < 3; ++k) row.active[k] = static_cast<Index>(as.indices[k].size());
          fit.trace.push_back(row);
        }
        if (!accepted || step * max_dir < opts.tol) break;
        if (q_before - cur.q <= opts.objective_tol * (1.0 + std::abs(cur.q))) break;
      }
      bool changed = false;
      Vector thr = eta;
      detail::threshold_in_place(thr, pen.zero_threshold, changed);
      if (!changed) break;
      try {
        cur = evaluate(thr, &cur.inner.lambda);
        eta = thr;
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::ConvexHullViolation && e.kind() != ErrorKind::SingularHessian &&
            e.kind() != ErrorKind::NotConverged)
          throw;
        break;
      }
      if (hit_limit) break;
    }
    // re-profile sigma and a
    const ParameterBlocks cb = unstack_parameters(eta, p, &blocks);
    const Tuning tu = resolve_outcome_tuning(d, cb, psi_cfg);
    const double rel = std::max(std::abs(tu.sigma - blocks.sigma) / blocks.sigma,
                                std::abs(tu.a - blocks.psi_threshold) / blocks.psi_threshold);
    if (rel <= opts.tuning_tol) {
      fit.converged = !hit_limit;
      break;
    }
    ParameterBlocks next = blocks;
    next.sigma = tu.sigma;
    next.psi_threshold = tu.a;
    try {
      Objective o = objective_qn(d, unstack_parameters(eta, p, &next), pen, spec, &cur.inner.lambda);
      blocks = next;
      cur = std::move(o);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ConvexHullViolation && e.kind() != ErrorKind::SingularHessian &&
          e.kind() != ErrorKind::NotConverged)
        throw;
      fit.converged = false;
      break;
    }
  }

  fit.blocks = unstack_parameters(eta, p, &blocks);
  fit.active = ActiveSet::of(fit.blocks);
  fit.inner = cur.inner;
  fit.objective = cur.q;
  fit.iterations = total_iter;
  return fit;
}

// ---------------------------------------------------------------------------
// Tuning-parameter selection

struct TauSelection {
  std::array<double, 3> tau{0.0, 0.0, 0.0};
  FitResult fit;
  std::vector<std::array<double, 4>> scores;  // (tau0, tau1, tau2, BIC); BIC = inf when infeasible
};

/// BIC-type score 2 L_n + |active| log n.
inline double bic_score(const FitResult& fit, Index n) {
  return 2.0 * fit.inner.log_el + static_cast<double>(fit.active.size()) * std::log(static_cast<double>(n));
}

/// Default grid: c * sqrt(log(n) / n).
inline std::vector<double> default_tau_grid(Index n) {
  const double base = std::sqrt(std::log(static_cast<double>(n)) / static_cast<double>(n));
  std::vector<double> grid;
  for (double c : {0.05, 0.1, 0.2, 0.3, 0.45, 0.6, 0.8, 1.0, 1.4, 2.0}) grid.push_back(c * base);
  return grid;
}

/// Fits every grid point from the same start and keeps the minimum BIC
/// (ties go to the larger tau). `per_block` searches the full 3-D grid.
inline TauSelection select_tau(const Dataset& d, const std::vector<double>& grid, const PsiConfig& psi_cfg,
                               const MomentSpec& spec, std::optional<ParameterBlocks> init = std::nullopt,
                               bool per_block = false, const PenaltyConfig& base = {},
                               const FitOptions& opts = {}) {
  if (grid.empty()) throw Error(ErrorKind::InvalidArgument, "tau grid is empty");
  const ParameterBlocks start = init ? *init : default_initial(d, spec, psi_cfg);
  std::vector<std::array<double, 3>> candidates;
  if (per_block) {
    for (double a : grid)
      for (double b : grid)
        for (double c : grid) candidates.push_back({a, b, c});
  } else {
    for (double t : grid) candidates.push_back({t, t, t});
  }
  // fit from the heaviest penalty down, each fit warm-started from the last success
  std::vector<std::size_t> order(candidates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto tsum_of = [](const std::array<double, 3>& t) { return t[0] + t[1] + t[2]; };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return tsum_of(candidates[a]) > tsum_of(candidates[b]);
  });
  TauSelection best;
  best.scores.resize(candidates.size());
  double best_score = std::numeric_limits<double>::infinity();
  bool any = false;
  ParameterBlocks warm = start;
  for (std::size_t idx : order) {
    const auto& tau = candidates[idx];
    PenaltyConfig pen = base;
    pen.tau = tau;
    double score = std::numeric_limits<double>::infinity();
    try {
      FitResult fit;
      try {
        fit = fit_penalized_el(d, pen, psi_cfg, spec, warm, opts);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::ConvexHullViolation && e.kind() != ErrorKind::SingularHessian &&
            e.kind() != ErrorKind::NotConverged)
          throw;
        fit = fit_penalized_el(d, pen, psi_cfg, spec, start, opts);
      }
      warm = fit.blocks;
      score = bic_score(fit, d.n());
      if (!any || score < best_score - 1e-9 ||
          (std::abs(score - best_score) <= 1e-9 && tsum_of(tau) > tsum_of(best.tau))) {
        best_score = score;
        best.tau = tau;
        best.fit = std::move(fit);
        any = true;
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ConvexHullViolation && e.kind() != ErrorKind::SingularHessian &&
          e.kind() != ErrorKind::NotConverged)
        throw;
    }
    best.scores[idx] = {tau[0], tau[1], tau[2], score};
  }
  if (!any) throw Error(ErrorKind::AllInfeasible, "every tau on the grid failed to fit");
  return best;
}

}  // namespace robust_ate
