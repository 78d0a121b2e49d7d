#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "robust_ate/error.hpp"

namespace robust_ate {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Covariate views used by the three coefficient blocks: 0 and 1 for the
/// outcome models, 2 for the propensity model.
enum class Block : int { control = 0, treated = 1, propensity = 2 };

/// Validated observational sample (Y, T, X). Immutable; construct through
/// validate_dataset().
class Dataset {
 public:
  const Matrix& x() const noexcept { return *x_; }
  const Vector& t() const noexcept { return t_; }
  const Vector& y() const noexcept { return y_; }

  /// Covariate view for a block; aliases x() unless an override was given.
  const Matrix& view(Block b) const noexcept {
    const auto& v = views_[static_cast<int>(b)];
    return v ? *v : *x_;
  }
  bool has_view_override(Block b) const noexcept {
    return static_cast<bool>(views_[static_cast<int>(b)]);
  }

  Index n() const noexcept { return x_->rows(); }
  Index p() const noexcept { return x_->cols(); }
  Index n_treated() const noexcept { return n_treated_; }
  Index n_control() const noexcept { return n() - n_treated_; }
  bool treated(Index i) const noexcept { return t_[i] > 0.5; }

  /// Row subset (bootstrap resampling); indices may repeat.
  Dataset subset(const std::vector<Index>& rows) const;

  bool operator==(const Dataset& other) const;

 private:
  friend Dataset validate_dataset(Matrix x, Vector t, Vector y,
                                  std::optional<std::array<Matrix, 3>> views);
  Dataset() = default;

  std::shared_ptr<const Matrix> x_;
  Vector t_;
  Vector y_;
  std::array<std::shared_ptr<const Matrix>, 3> views_{};
  Index n_treated_ = 0;
};

namespace detail {

inline void check_finite(const Matrix& m, const std::string& name) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      if (!std::isfinite(m(i, j)))
        throw Error(ErrorKind::NonFiniteValue, name + " has a non-finite entry",
                    static_cast<std::size_t>(i), static_cast<std::size_t>(j));
}

inline void check_finite(const Vector& v, const std::string& name) {
  for (Index i = 0; i < v.size(); ++i)
    if (!std::isfinite(v[i]))
      throw Error(ErrorKind::NonFiniteValue, name + " has a non-finite entry",
                  static_cast<std::size_t>(i));
}

}  // namespace detail

/// Checks shapes, finiteness, binary treatment and that both arms are
/// non-empty. Validating an already valid dataset is the identity.
inline Dataset validate_dataset(Matrix x, Vector t, Vector y,
                                std::optional<std::array<Matrix, 3>> views = std::nullopt) {
  const Index n = x.rows();
  const Index p = x.cols();
  if (n < 2 || p < 1)
    throw Error(ErrorKind::ShapeMismatch, "need n >= 2 rows and p >= 1 columns");
  if (t.size() != n || y.size() != n)
    throw Error(ErrorKind::ShapeMismatch, "T and Y must have one entry per row of X");
  detail::check_finite(x, "X");
  detail::check_finite(y, "Y");
  detail::check_finite(t, "T");
  Index treated = 0;
  for (Index i = 0; i < n; ++i) {
    if (t[i] != 0.0 && t[i] != 1.0)
      throw Error(ErrorKind::NonBinaryTreatment, "T must be 0 or 1", static_cast<std::size_t>(i));
    treated += t[i] == 1.0 ? 1 : 0;
  }
  if (treated == 0 || treated == n)
    throw Error(ErrorKind::DegenerateArm, treated == 0 ? "no treated units" : "no control units");

  Dataset d;
  d.x_ = std::make_shared<const Matrix>(std::move(x));
  d.t_ = std::move(t);
  d.y_ = std::move(y);
  d.n_treated_ = treated;
  if (views) {
    for (int k = 0; k < 3; ++k) {
      auto& v = (*views)[k];
      if (v.rows() != n || v.cols() != p)
        throw Error(ErrorKind::ShapeMismatch, "covariate view " + std::to_string(k) +
                                                  " must be n x p");
      detail::check_finite(v, "view " + std::to_string(k));
      d.views_[k] = std::make_shared<const Matrix>(std::move(v));
    }
  }
  return d;
}

inline Dataset validate_dataset(const Dataset& d) {
  if (d.has_view_override(Block::control) || d.has_view_override(Block::treated) ||
      d.has_view_override(Block::propensity)) {
    return validate_dataset(d.x(), d.t(), d.y(),
                            std::array<Matrix, 3>{d.view(Block::control), d.view(Block::treated),
                                                  d.view(Block::propensity)});
  }
  return validate_dataset(d.x(), d.t(), d.y());
}

inline Dataset Dataset::subset(const std::vector<Index>& rows) const {
  const Index m = static_cast<Index>(rows.size());
  auto take = [&](const Matrix& src) {
    Matrix out(m, src.cols());
    for (Index r = 0; r < m; ++r) out.row(r) = src.row(rows[r]);
    return out;
  };
  Vector t(m), y(m);
  for (Index r = 0; r < m; ++r) {
    t[r] = t_[rows[r]];
    y[r] = y_[rows[r]];
  }
  if (views_[0] || views_[1] || views_[2]) {
    return validate_dataset(take(*x_), std::move(t), std::move(y),
                            std::array<Matrix, 3>{take(view(Block::control)),
                                                  take(view(Block::treated)),
                                                  take(view(Block::propensity))});
  }
  return validate_dataset(take(*x_), std::move(t), std::move(y));
}

inline bool Dataset::operator==(const Dataset& other) const {
  if (x().rows() != other.x().rows() || x().cols() != other.x().cols()) return false;
  if (x() != other.x() || t_ != other.t_ || y_ != other.y_) return false;
  for (int k = 0; k < 3; ++k)
    if (view(static_cast<Block>(k)) != other.view(static_cast<Block>(k))) return false;
  return true;
}

/// eta = (beta0, beta1, beta2) plus the profiled outcome scale sigma and the
/// psi clipping threshold a.
struct ParameterBlocks {
  Vector beta0;
  Vector beta1;
  Vector beta2;
  double sigma = 1.0;
  double psi_threshold = 1.0;

  Index p() const noexcept { return beta0.size(); }

  const Vector& beta(Block b) const noexcept {
    switch (b) {
      case Block::control: return beta0;
      case Block::treated: return beta1;
      default: return beta2;
    }
  }
  Vector& beta(Block b) noexcept {
    switch (b) {
      case Block::control: return beta0;
      case Block::treated: return beta1;
      default: return beta2;
    }
  }

  static ParameterBlocks zeros(Index p) {
    return ParameterBlocks{Vector::Zero(p), Vector::Zero(p), Vector::Zero(p), 1.0, 1.0};
  }

  bool operator==(const ParameterBlocks&) const = default;
};

inline Vector stack_parameters(const ParameterBlocks& b) {
  const Index p = b.beta0.size();
  if (b.beta1.size() != p || b.beta2.size() != p)
    throw Error(ErrorKind::ShapeMismatch, "coefficient blocks must share length p");
  Vector v(3 * p);
  v << b.beta0, b.beta1, b.beta2;
  return v;
}

/// Inverse of stack_parameters; sigma and a are taken from `tuning` when given.
inline ParameterBlocks unstack_parameters(const Vector& v, Index p,
                                          const ParameterBlocks* tuning = nullptr) {
  if (p < 1 || v.size() != 3 * p)
    throw Error(ErrorKind::ShapeMismatch, "stacked vector must have length 3p");
  ParameterBlocks b;
  b.beta0 = v.segment(0, p);
  b.beta1 = v.segment(p, p);
  b.beta2 = v.segment(2 * p, p);
  if (tuning) {
    b.sigma = tuning->sigma;
    b.psi_threshold = tuning->psi_threshold;
  }
  return b;
}

/// Nonzero coefficients per block, strictly increasing indices in [0, p).
struct ActiveSet {
  std::array<std::vector<Index>, 3> indices;

  std::size_t size() const noexcept {
    return indices[0].size() + indices[1].size() + indices[2].size();
  }
  const std::vector<Index>& block(Block b) const noexcept { return indices[static_cast<int>(b)]; }

  /// Positions in the stacked (beta0, beta1, beta2) vector.
  std::vector<Index> stacked(Index p) const {
    std::vector<Index> out;
    out.reserve(size());
    for (int k = 0; k < 3; ++k)
      for (Index j : indices[k]) out.push_back(k * p + j);
    return out;
  }

  static ActiveSet of(const ParameterBlocks& b) {
    ActiveSet a;
    for (int k = 0; k < 3; ++k) {
      const Vector& beta = b.beta(static_cast<Block>(k));
      for (Index j = 0; j < beta.size(); ++j)
        if (beta[j] != 0.0) a.indices[k].push_back(j);
    }
    return a;
  }

  static ActiveSet full(Index p) {
    ActiveSet a;
    for (int k = 0; k < 3; ++k)
      for (Index j = 0; j < p; ++j) a.indices[k].push_back(j);
    return a;
  }

  bool operator==(const ActiveSet&) const = default;
};

}  // namespace robust_ate
