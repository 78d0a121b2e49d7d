#pragma once

// Doubly robust ATE: point estimate, target gradient, sandwich variance,
// the non-robust AIPW comparator and the full proposed pipeline
// (screening, tau selection, penalized EL fit, bounded augmentation).

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "robust_ate/cbps.hpp"
#include "robust_ate/data_model.hpp"
#include "robust_ate/error.hpp"
#include "robust_ate/penalized_el.hpp"
#include "robust_ate/robust_outcome.hpp"

namespace robust_ate {

/// How the observed outcome enters the augmentation term.
///   raw:     T (Y - m1) / pi + m1
///   bounded: T sigma psi((Y - m1) / sigma) / pi + m1
/// The two agree for every unit inside the psi linear region.
enum class Augmentation { raw, bounded };

struct AteResult {
  double ate = 0.0;
  double mu1 = 0.0;
  double mu0 = 0.0;
  double variance = 0.0;
  Index n_effective = 0;
  double pi_min = 0.0;
  double pi_max = 0.0;
};

/// Per-unit summands of mu1 and mu0.
struct DrTerms {
  Vector phi1;
  Vector phi0;
  Vector pi;
};

namespace detail {

inline double augmentation_residual(double y, double fitted, const ParameterBlocks& b, Augmentation aug) {
  if (aug == Augmentation::raw) return y - fitted;
  return b.sigma * psi((y - fitted) / b.sigma, b.psi_threshold);
}

inline double augmentation_slope(double y, double fitted, const ParameterBlocks& b, Augmentation aug) {
  if (aug == Augmentation::raw) return 1.0;
  return psi_slope((y - fitted) / b.sigma, b.psi_threshold);
}

}  // namespace detail

inline DrTerms dr_terms(const Dataset& d, const ParameterBlocks& b, Augmentation aug = Augmentation::raw,
                        double clip_eps = 1e-6) {
  if (b.beta0.size() != d.p() || b.beta1.size() != d.p() || b.beta2.size() != d.p())
    throw Error(ErrorKind::ShapeMismatch, "parameter blocks do not match dataset width");
  const Index n = d.n();
  DrTerms out{Vector(n), Vector(n), Vector(n)};
  const Vector m1 = d.view(Block::treated) * b.beta1;
  const Vector m0 = d.view(Block::control) * b.beta0;
  const Vector lin = d.view(Block::propensity) * b.beta2;
  for (Index i = 0; i < n; ++i) {
    const double pi = propensity_value(lin[i], clip_eps).pi;
    const double t = d.t()[i];
    const double y = d.y()[i];
    out.pi[i] = pi;
    out.phi1[i] = t * detail::augmentation_residual(y, m1[i], b, aug) / pi + m1[i];
    out.phi0[i] = (1.0 - t) * detail::augmentation_residual(y, m0[i], b, aug) / (1.0 - pi) + m0[i];
  }
  return out;
}

inline AteResult dr_ate(const Dataset& d, const ParameterBlocks& b, Augmentation aug = Augmentation::raw,
                        double clip_eps = 1e-6) {
  const DrTerms terms = dr_terms(d, b, aug, clip_eps);
  AteResult r;
  r.mu1 = terms.phi1.mean();
  r.mu0 = terms.phi0.mean();
  r.ate = r.mu1 - r.mu0;
  r.n_effective = d.n();
  r.pi_min = terms.pi.minCoeff();
  r.pi_max = terms.pi.maxCoeff();
  return r;
}

/// Gradient of h(eta) = mu1 - mu0 over all 3p stacked coordinates.
inline Vector grad_h_full(const Dataset& d, const ParameterBlocks& b, Augmentation aug = Augmentation::raw,
                          double clip_eps = 1e-6) {
  const Index n = d.n();
  const Index p = d.p();
  const Vector m1 = d.view(Block::treated) * b.beta1;
  const Vector m0 = d.view(Block::control) * b.beta0;
  const Vector lin = d.view(Block::propensity) * b.beta2;
  Vector c0(n), c1(n), c2(n);
  for (Index i = 0; i < n; ++i) {
    const auto pv = propensity_value(lin[i], clip_eps);
    const double t = d.t()[i];
    const double y = d.y()[i];
    const double r1 = detail::augmentation_residual(y, m1[i], b, aug);
    const double r0 = detail::augmentation_residual(y, m0[i], b, aug);
    c1[i] = 1.0 - t * detail::augmentation_slope(y, m1[i], b, aug) / pv.pi;
    // mu0 enters h with a minus sign
    c0[i] = -(1.0 - (1.0 - t) * detail::augmentation_slope(y, m0[i], b, aug) / (1.0 - pv.pi));
    const double dmu1 = -t * r1 / (pv.pi * pv.pi);
    const double dmu0 = (1.0 - t) * r0 / ((1.0 - pv.pi) * (1.0 - pv.pi));
    c2[i] = (dmu1 - dmu0) * pv.dpi;
  }
  Vector g(3 * p);
  const double inv_n = 1.0 / static_cast<double>(n);
  g.segment(0, p) = d.view(Block::control).transpose() * c0 * inv_n;
  g.segment(p, p) = d.view(Block::treated).transpose() * c1 * inv_n;
  g.segment(2 * p, p) = d.view(Block::propensity).transpose() * c2 * inv_n;
  return g;
}

inline Vector restrict(const Vector& full, const std::vector<Index>& coords) {
  Vector out(static_cast<Index>(coords.size()));
  for (std::size_t k = 0; k < coords.size(); ++k) out[static_cast<Index>(k)] = full[coords[k]];
  return out;
}

inline Vector grad_h(const Dataset& d, const ParameterBlocks& b, const ActiveSet& active,
                     Augmentation aug = Augmentation::raw, double clip_eps = 1e-6) {
  return restrict(grad_h_full(d, b, aug, clip_eps), active.stacked(d.p()));
}

// ---------------------------------------------------------------------------
// Sandwich

/// Pieces of the plug-in variance on the active coordinates.
/// R is the m x q mean Jacobian, S = mean Psi Psi', bread the q x m map
/// -(R' W R)^{-1} R' W with W = S^{-1} (B = -R^{-1} when m = q).
struct SandwichParts {
  Matrix r;
  Matrix s;
  Vector grad;
  Matrix bread;
  Matrix psi;     // n x m moment rows
  Vector direct;  // phi_i - theta_hat
  std::vector<Index> coords;
  double condition = 0.0;
};

/// Generalized bread for a (possibly over-identified) system.
inline Matrix general_bread(const Matrix& r, const Matrix& s, double* condition = nullptr) {
  const Index m = r.rows();
  const Index q = r.cols();
  if (m < q) throw Error(ErrorKind::SingularBread, "fewer estimating equations than parameters");
  if (q == 0) return Matrix(0, m);
  const Eigen::JacobiSVD<Matrix> svd(r);
  const auto sv = svd.singularValues();
  const double cond = sv[q - 1] > 0.0 ? sv[0] / sv[q - 1] : std::numeric_limits<double>::infinity();
  if (condition) *condition = cond;
  if (!(cond < 1e12)) throw Error(ErrorKind::SingularBread, "mean Jacobian is rank deficient");
  if (m == q) return -r.partialPivLu().inverse();
  Matrix sr = s;
  const double scale = s.trace() / static_cast<double>(m);
  sr.diagonal().array() += scale > 0.0 ? 1e-10 * scale : 1.0;
  const Eigen::LDLT<Matrix> sf(sr);
  const Matrix wr = sf.solve(r);
  const Matrix info = r.transpose() * wr;
  return -info.ldlt().solve(wr.transpose());
}

inline SandwichParts sandwich_parts(const Dataset& d, const ParameterBlocks& b, const ActiveSet& active,
                                    const MomentSpec& spec, Augmentation aug = Augmentation::raw) {
  SandwichParts parts;
  parts.coords = active.stacked(d.p());
  const MomentStack st = stack_moments(d, b, spec);
  const Index q = static_cast<Index>(parts.coords.size());
  parts.r.resize(st.jacobian.rows(), q);
  for (Index k = 0; k < q; ++k) parts.r.col(k) = st.jacobian.col(parts.coords[k]);
  parts.psi = st.psi;
  parts.s = st.psi.transpose() * st.psi / static_cast<double>(d.n());
  parts.grad = restrict(grad_h_full(d, b, aug, spec.clip_eps), parts.coords);
  parts.bread = general_bread(parts.r, parts.s, &parts.condition);
  const DrTerms terms = dr_terms(d, b, aug, spec.clip_eps);
  const Vector phi = terms.phi1 - terms.phi0;
  parts.direct = phi.array() - phi.mean();
  return parts;
}

/// augmented: the target is stacked with the nuisance system, so each unit
/// contributes (phi_i - theta) + grad' B Psi_i.
/// nuisance_only: grad' B S B' grad, the delta-method term alone.
enum class VarianceForm { augmented, nuisance_only };

inline Vector influence_values(const SandwichParts& parts) {
  Vector j = parts.direct;
  if (parts.grad.size() > 0) j += parts.psi * (parts.bread.transpose() * parts.grad);
  return j;
}

inline double sandwich_variance(const SandwichParts& parts, VarianceForm form = VarianceForm::augmented) {
  const double n = static_cast<double>(parts.psi.rows());
  if (form == VarianceForm::nuisance_only) {
    if (parts.grad.size() == 0) return 0.0;
    const Vector bg = parts.bread.transpose() * parts.grad;
    return std::max(0.0, bg.dot(parts.s * bg)) / n;
  }
  return influence_values(parts).squaredNorm() / (n * n);
}

inline double sandwich_variance(const Dataset& d, const ParameterBlocks& b, const ActiveSet& active,
                                const MomentSpec& spec, Augmentation aug = Augmentation::raw,
                                VarianceForm form = VarianceForm::augmented) {
  return sandwich_variance(sandwich_parts(d, b, active, spec, aug), form);
}

// ---------------------------------------------------------------------------
// Non-robust comparator

namespace detail {

/// Ridge least squares on a row subset; uses the n x n dual system when p > n.
inline Vector ridge_least_squares(const Matrix& x, const Vector& y, double ridge) {
  if (x.cols() <= x.rows()) {
    Matrix a = x.transpose() * x;
    a.diagonal().array() += ridge;
    return a.ldlt().solve(x.transpose() * y);
  }
  Matrix k = x * x.transpose();
  k.diagonal().array() += ridge;
  return x.transpose() * k.ldlt().solve(y);
}

inline Matrix arm_rows(const Matrix& x, const Dataset& d, bool treated) {
  Matrix out(treated ? d.n_treated() : d.n_control(), x.cols());
  Index r = 0;
  for (Index i = 0; i < d.n(); ++i)
    if (d.treated(i) == treated) out.row(r++) = x.row(i);
  return out;
}

inline Vector arm_values(const Vector& v, const Dataset& d, bool treated) {
  Vector out(treated ? d.n_treated() : d.n_control());
  Index r = 0;
  for (Index i = 0; i < d.n(); ++i)
    if (d.treated(i) == treated) out[r++] = v[i];
  return out;
}

}  // namespace detail

struct BaselineFit {
  AteResult ate;
  ParameterBlocks blocks;
};

/// AIPW with maximum-likelihood logistic propensity and least-squares
/// outcome models (both ridge-stabilized).
inline BaselineFit aipw_baseline(const Dataset& d, double ridge = 1e-4, double clip_eps = 1e-6) {
  BaselineFit out;
  out.blocks = ParameterBlocks::zeros(d.p());
  out.blocks.beta2 = fit_logistic_ridge(d.view(Block::propensity), d.t(), ridge);
  for (bool arm : {false, true}) {
    const Block blk = arm ? Block::treated : Block::control;
    out.blocks.beta(blk) = detail::ridge_least_squares(detail::arm_rows(d.view(blk), d, arm),
                                                       detail::arm_values(d.y(), d, arm), ridge);
  }
  const DrTerms terms = dr_terms(d, out.blocks, Augmentation::raw, clip_eps);
  out.ate = dr_ate(d, out.blocks, Augmentation::raw, clip_eps);
  const Vector phi = terms.phi1 - terms.phi0;
  const double n = static_cast<double>(d.n());
  out.ate.variance = (phi.array() - phi.mean()).square().sum() / (n * n);
  return out;
}

// ---------------------------------------------------------------------------
// Proposed pipeline

struct ProposedOptions {
  std::optional<BalanceMap> map;  // unset: squares unless screening is needed
  ScreeningOptions screening;
  PsiConfig psi;
  std::vector<double> tau_grid;            // empty: default grid
  std::optional<std::array<double, 3>> fixed_tau;
  bool per_block_tau = false;
  Augmentation augmentation = Augmentation::bounded;
  FitOptions fit;
  // Overlap floor for the fitted propensity. 1/pi is the one factor the
  // bounded augmentation leaves unbounded.
  double clip_eps = 0.01;
};

struct ProposedEstimate {
  AteResult ate;
  FitResult fit;
  std::array<double, 3> tau{0.0, 0.0, 0.0};
  SandwichParts parts;
};

namespace detail {

inline bool el_feasible(const Dataset& d, const ParameterBlocks& b, const MomentSpec& spec) {
  try {
    el_inner_solve(moment_rows(d, b, spec));
    return true;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::ConvexHullViolation && e.kind() != ErrorKind::SingularHessian &&
        e.kind() != ErrorKind::NotConverged)
      throw;
  }
  return false;
}

/// Per-arm robust regressions on the working sets, so the outcome moments
/// vanish at the start. beta2 from the balance fit when `balance` is set
/// (balance moments as small as the data allow), else from ridge logistic.
inline ParameterBlocks robust_initial(const Dataset& d, const MomentSpec& spec, const PsiConfig& psi_cfg,
                                      bool balance) {
  ParameterBlocks b = default_initial(d, spec, psi_cfg);
  if (balance) {
    const auto& s2 = spec.set(Block::propensity);
    const Vector sub = fit_cbps(gather_columns(d.view(Block::propensity), s2), d.t(), spec.map, spec.clip_eps);
    b.beta2.setZero();
    for (std::size_t c = 0; c < s2.size(); ++c) b.beta2[s2[c]] = sub[static_cast<Index>(c)];
  }
  for (int arm = 0; arm < 2; ++arm) {
    const Block blk = static_cast<Block>(arm);
    const auto& s = spec.set(blk);
    const Matrix xs = arm_rows(gather_columns(d.view(blk), s), d, arm == 1);
    if (xs.rows() <= xs.cols()) continue;
    const RobustRegressionFit f = fit_robust_regression(xs, arm_values(d.y(), d, arm == 1), psi_cfg);
    if (!f.beta.allFinite()) continue;
    b.beta(blk).setZero();
    for (std::size_t c = 0; c < s.size(); ++c) b.beta(blk)[s[c]] = f.beta[static_cast<Index>(c)];
  }
  const Tuning tu = resolve_outcome_tuning(d, b, psi_cfg);
  b.sigma = tu.sigma;
  b.psi_threshold = tu.a;
  return b;
}

}  // namespace detail

struct FeasibleStart {
  MomentSpec spec;
  ParameterBlocks blocks;
};

/// A starting point inside the EL domain. Outcome blocks start from
/// per-arm robust regressions; beta2 from ridge logistic, then from the
/// balance fit, then shrunk toward zero; the least-squares default comes
/// last. When every attempt fails the propensity working set loses its
/// last-picked covariate and the search repeats: if the arms are linearly
/// separable on that set, no beta2 puts zero inside the hull.
inline FeasibleStart feasible_start(const Dataset& d, const MomentSpec& spec, const PsiConfig& psi_cfg,
                                    const std::vector<Index>& propensity_order = {}) {
  std::vector<Index> order = propensity_order;
  if (order.empty()) order = spec.set(Block::propensity);
  for (Index k = static_cast<Index>(order.size()); k >= 1; --k) {
    MomentSpec s = spec;
    s.working[2] = detail::sorted_prefix(order, k);
    ParameterBlocks b = detail::robust_initial(d, s, psi_cfg, false);
    if (detail::el_feasible(d, b, s)) return {s, b};
    const ParameterBlocks bal = detail::robust_initial(d, s, psi_cfg, true);
    if (bal.beta2.allFinite() && detail::el_feasible(d, bal, s)) return {s, bal};
    for (int attempt = 0; attempt < 30; ++attempt) {
      b.beta2 *= 0.5;
      if (detail::el_feasible(d, b, s)) return {s, b};
    }
    const ParameterBlocks ls = default_initial(d, s, psi_cfg);
    if (detail::el_feasible(d, ls, s)) return {s, ls};
  }
  throw Error(ErrorKind::ConvexHullViolation, "no feasible starting point found");
}

inline ParameterBlocks feasible_initial(const Dataset& d, const MomentSpec& spec, const PsiConfig& psi_cfg) {
  return feasible_start(d, spec, psi_cfg).blocks;
}

inline MomentSpec proposed_spec(const Dataset& d, const ProposedOptions& opts,
                                std::vector<Index>* propensity_order = nullptr) {
  MomentSpec spec = choose_moment_spec(d, opts.map, opts.screening, propensity_order);
  spec.clip_eps = opts.clip_eps;
  return spec;
}

/// Point estimate and variance pieces at a given fit (no refitting).
inline ProposedEstimate evaluate_proposed(const Dataset& d, const FitResult& fit, const ProposedOptions& opts) {
  ProposedEstimate est;
  est.fit = fit;
  est.tau = fit.penalty.tau;
  est.ate = dr_ate(d, fit.blocks, opts.augmentation, opts.clip_eps);
  try {
    est.parts = sandwich_parts(d, fit.blocks, fit.active, fit.spec, opts.augmentation);
    est.ate.variance = sandwich_variance(est.parts, VarianceForm::augmented);
  } catch (const Error& e) {
    // the point estimate stands without a variance
    if (e.kind() != ErrorKind::SingularBread) throw;
    est.ate.variance = std::numeric_limits<double>::quiet_NaN();
  }
  return est;
}

inline FitResult fit_proposed_nuisance(const Dataset& d, const ProposedOptions& opts) {
  std::vector<Index> order;
  const MomentSpec screened = proposed_spec(d, opts, &order);
  const FeasibleStart start = feasible_start(d, screened, opts.psi, order);
  if (opts.fixed_tau) {
    PenaltyConfig pen;
    pen.tau = *opts.fixed_tau;
    return fit_penalized_el(d, pen, opts.psi, start.spec, start.blocks, opts.fit);
  }
  const std::vector<double> grid = opts.tau_grid.empty() ? default_tau_grid(d.n()) : opts.tau_grid;
  return select_tau(d, grid, opts.psi, start.spec, start.blocks, opts.per_block_tau, {}, opts.fit).fit;
}

inline ProposedEstimate estimate_proposed(const Dataset& d, const ProposedOptions& opts = {}) {
  return evaluate_proposed(d, fit_proposed_nuisance(d, opts), opts);
}

}  // namespace robust_ate
