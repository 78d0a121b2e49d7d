#pragma once

// Expression-matrix loading, treatment labels, covariate preprocessing and
// semi-synthetic outcomes on real covariates.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "robust_ate/data_model.hpp"
#include "robust_ate/error.hpp"
#include "robust_ate/rng.hpp"

namespace robust_ate {

struct ExpressionMatrix {
  Matrix values;  // genes x samples
  std::vector<std::string> gene_ids;
  std::vector<std::string> sample_ids;

  Index genes() const noexcept { return values.rows(); }
  Index samples() const noexcept { return values.cols(); }
};

enum class Orientation { genes_in_rows, samples_in_rows };

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Splits one record; double quotes group fields and "" escapes a quote.
inline std::vector<std::string> split_record(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      out.push_back(trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline char detect_delimiter(const std::string& header) {
  const auto tabs = std::count(header.begin(), header.end(), '\t');
  const auto commas = std::count(header.begin(), header.end(), ',');
  return tabs > commas ? '\t' : ',';
}

inline bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (*first == '+') ++first;
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last && std::isfinite(out);
}

inline std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  return lines;
}

}  // namespace detail

/// Parses a delimited table with one header row of column ids and one
/// leading id column. Comma or tab is detected from the header.
inline ExpressionMatrix parse_expression_matrix(std::istream& in, Orientation orientation) {
  const auto lines = detail::read_lines(in);
  if (lines.empty()) throw Error(ErrorKind::EmptyMatrix, "no header row");
  const char delim = detail::detect_delimiter(lines[0]);
  const auto header = detail::split_record(lines[0], delim);
  if (header.size() < 2 || lines.size() < 2) throw Error(ErrorKind::EmptyMatrix, "no data rows or columns");
  const std::size_t cols = header.size() - 1;
  std::vector<std::string> row_ids;
  std::vector<std::vector<double>> rows;
  for (std::size_t l = 1; l < lines.size(); ++l) {
    if (detail::trim(lines[l]).empty()) continue;
    const auto fields = detail::split_record(lines[l], delim);
    if (fields.size() != header.size())
      throw Error(ErrorKind::RaggedRows, "line " + std::to_string(l + 1) + " has " + std::to_string(fields.size()) +
                                             " fields, header has " + std::to_string(header.size()),
                  l + 1);
    std::vector<double> vals(cols);
    for (std::size_t c = 0; c < cols; ++c)
      if (!detail::parse_number(fields[c + 1], vals[c]))
        throw Error(ErrorKind::ParseError, "line " + std::to_string(l + 1) + ": '" + fields[c + 1] +
                                               "' is not a finite number",
                    l + 1, c + 1);
    row_ids.push_back(fields[0]);
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw Error(ErrorKind::EmptyMatrix, "no data rows");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  std::vector<std::string> col_ids(header.begin() + 1, header.end());
  ExpressionMatrix out;
  if (orientation == Orientation::genes_in_rows) {
    out.values = std::move(m);
    out.gene_ids = std::move(row_ids);
    out.sample_ids = std::move(col_ids);
  } else {
    out.values = m.transpose();
    out.gene_ids = std::move(col_ids);
    out.sample_ids = std::move(row_ids);
  }
  return out;
}

inline ExpressionMatrix load_expression_matrix(const std::string& path,
                                               Orientation orientation = Orientation::genes_in_rows) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  return parse_expression_matrix(f, orientation);
}

/// Writes genes x samples with 17 significant digits.
inline void write_expression_matrix(const ExpressionMatrix& m, std::ostream& out) {
  out << "gene_id";
  for (const auto& s : m.sample_ids) out << ',' << s;
  out << '\n';
  std::ostringstream buf;
  buf.precision(17);
  for (Index g = 0; g < m.genes(); ++g) {
    buf.str("");
    buf << m.gene_ids[static_cast<std::size_t>(g)];
    for (Index s = 0; s < m.samples(); ++s) buf << ',' << m.values(g, s);
    out << buf.str() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Labels

struct LabelMap {
  std::map<std::string, std::string> classes;  // sample_id -> class
  std::set<std::string> treated_classes;

  std::set<std::string> observed() const {
    std::set<std::string> s;
    for (const auto& [id, c] : classes) s.insert(c);
    return s;
  }
};

inline LabelMap load_labels(const std::string& path, std::set<std::string> treated) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
  const auto lines = detail::read_lines(f);
  if (lines.empty()) throw Error(ErrorKind::EmptyMatrix, "label file is empty");
  const char delim = detail::detect_delimiter(lines[0]);
  const auto header = detail::split_record(lines[0], delim);
  const auto id_col = std::find(header.begin(), header.end(), "sample_id") - header.begin();
  const auto cls_col = std::find(header.begin(), header.end(), "class") - header.begin();
  if (id_col == static_cast<std::ptrdiff_t>(header.size()) || cls_col == static_cast<std::ptrdiff_t>(header.size()))
    throw Error(ErrorKind::ParseError, "label header must contain sample_id and class", 1);
  LabelMap labels;
  labels.treated_classes = std::move(treated);
  for (std::size_t l = 1; l < lines.size(); ++l) {
    if (detail::trim(lines[l]).empty()) continue;
    const auto fields = detail::split_record(lines[l], delim);
    if (fields.size() != header.size()) throw Error(ErrorKind::RaggedRows, "label row length", l + 1);
    labels.classes[fields[static_cast<std::size_t>(id_col)]] = fields[static_cast<std::size_t>(cls_col)];
  }
  return labels;
}

/// T_i = 1 iff the class of sample i is treated. The treated classes must
/// be a non-empty strict subset of the observed classes.
inline Vector derive_treatment(const LabelMap& labels, const std::vector<std::string>& samples) {
  const auto observed = labels.observed();
  if (labels.treated_classes.empty())
    throw Error(ErrorKind::InvalidLabels, "no treated classes given");
  bool strict = false;
  for (const auto& c : observed) strict = strict || !labels.treated_classes.count(c);
  if (!strict) throw Error(ErrorKind::InvalidLabels, "treated classes cover every observed class");
  for (const auto& c : labels.treated_classes)
    if (!observed.count(c)) throw Error(ErrorKind::InvalidLabels, "treated class '" + c + "' is not observed");
  Vector t(static_cast<Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto it = labels.classes.find(samples[i]);
    if (it == labels.classes.end()) throw Error(ErrorKind::UnknownLabel, "sample '" + samples[i] + "' has no label", i);
    t[static_cast<Index>(i)] = labels.treated_classes.count(it->second) ? 1.0 : 0.0;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct Standardized {
  Matrix x;  // samples x kept columns
  Vector means;
  Vector sds;
  std::vector<Index> kept;     // original column indices
  std::vector<Index> dropped;  // constant columns
};

/// Columns centred and scaled to population sd 1; constant columns removed.
inline Standardized standardize_covariates(const Matrix& x) {
  const double n = static_cast<double>(x.rows());
  Standardized out;
  std::vector<double> means, sds;
  for (Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    const double sd = std::sqrt((x.col(j).array() - mean).square().sum() / n);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      out.dropped.push_back(j);
      continue;
    }
    out.kept.push_back(j);
    means.push_back(mean);
    sds.push_back(sd);
  }
  out.x.resize(x.rows(), static_cast<Index>(out.kept.size()));
  out.means.resize(static_cast<Index>(out.kept.size()));
  out.sds.resize(static_cast<Index>(out.kept.size()));
  for (std::size_t k = 0; k < out.kept.size(); ++k) {
    const Index c = static_cast<Index>(k);
    out.means[c] = means[k];
    out.sds[c] = sds[k];
    out.x.col(c) = (x.col(out.kept[k]).array() - means[k]) / sds[k];
  }
  return out;
}

/// Indices of the k columns with largest variance, in original order.
inline std::vector<Index> top_variance_columns(const Matrix& x, Index k) {
  std::vector<double> var(static_cast<std::size_t>(x.cols()));
  for (Index j = 0; j < x.cols(); ++j) {
    const double mean = x.col(j).mean();
    var[static_cast<std::size_t>(j)] = (x.col(j).array() - mean).square().mean();
  }
  std::vector<Index> idx(var.size());
  std::iota(idx.begin(), idx.end(), Index{0});
  std::stable_sort(idx.begin(), idx.end(), [&](Index a, Index b) { return var[a] > var[b]; });
  idx.resize(static_cast<std::size_t>(std::min<Index>(k, x.cols())));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Samples x p covariates: top-k variance genes (raw scale), then standardized.
struct PreparedCovariates {
  Matrix x;
  std::vector<std::string> genes;
  Index p_raw = 0;
  std::vector<std::string> dropped_constant;
};

inline PreparedCovariates prepare_covariates(const ExpressionMatrix& m, Index top_k = 200) {
  const Matrix samples_by_genes = m.values.transpose();
  const Standardized nonconstant = standardize_covariates(samples_by_genes);
  PreparedCovariates out;
  out.p_raw = m.genes();
  for (Index j : nonconstant.dropped) out.dropped_constant.push_back(m.gene_ids[static_cast<std::size_t>(j)]);
  Matrix raw_kept(samples_by_genes.rows(), static_cast<Index>(nonconstant.kept.size()));
  for (std::size_t k = 0; k < nonconstant.kept.size(); ++k)
    raw_kept.col(static_cast<Index>(k)) = samples_by_genes.col(nonconstant.kept[k]);
  const auto top = top_variance_columns(raw_kept, top_k);
  Matrix sel(raw_kept.rows(), static_cast<Index>(top.size()));
  for (std::size_t k = 0; k < top.size(); ++k) {
    sel.col(static_cast<Index>(k)) = raw_kept.col(top[k]);
    out.genes.push_back(m.gene_ids[static_cast<std::size_t>(nonconstant.kept[static_cast<std::size_t>(top[k])])]);
  }
  out.x = standardize_covariates(sel).x;
  return out;
}

// ---------------------------------------------------------------------------
// Semi-synthetic outcomes

/// s nonzero entries of value +-1 on a support drawn from `seed`.
inline Vector random_sparse_beta(Index p, Index s, std::uint64_t seed) {
  CounterRng rng(seed);
  Vector b = Vector::Zero(p);
  const auto support = sample_without_replacement(static_cast<std::size_t>(p), static_cast<std::size_t>(std::min(p, s)), rng);
  for (std::size_t idx : support) b[static_cast<Index>(idx)] = rng.uniform() < 0.5 ? -1.0 : 1.0;
  return b;
}

struct SemiSynthetic {
  Vector y;
  Vector y0;
  Vector y1;
  double true_sate = 0.0;
};

/// Y(k) = X beta_k + e(k), Y by consistency. noise_scale = 0 disables noise;
/// shared_noise sets e(1) = e(0).
inline SemiSynthetic generate_semisynthetic(const Matrix& x, const Vector& t, const Vector& beta0,
                                            const Vector& beta1, std::uint64_t seed, double noise_scale = 1.0,
                                            bool shared_noise = false) {
  if (t.size() != x.rows() || beta0.size() != x.cols() || beta1.size() != x.cols())
    throw Error(ErrorKind::ShapeMismatch, "semi-synthetic inputs disagree in shape");
  CounterRng rng(seed);
  const Index n = x.rows();
  Vector e0(n), e1(n);
  for (Index i = 0; i < n; ++i) {
    e0[i] = noise_scale * rng.normal();
    e1[i] = shared_noise ? e0[i] : noise_scale * rng.normal();
  }
  SemiSynthetic out;
  out.y0 = x * beta0 + e0;
  out.y1 = x * beta1 + e1;
  out.y.resize(n);
  for (Index i = 0; i < n; ++i) out.y[i] = t[i] == 1.0 ? out.y1[i] : out.y0[i];
  out.true_sate = (out.y1 - out.y0).mean();
  return out;
}

}  // namespace robust_ate
