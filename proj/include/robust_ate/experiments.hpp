#pragma once

// Benchmark harness: configuration, per-replication runs, metric
// aggregation and report files.
//
// Replication r of a cell with sample size n draws its data from the
// substream (master_seed ^ mix64(n), r), so every method in the cell sees
// the same datasets and results do not depend on the number of workers.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "robust_ate/ate.hpp"
#include "robust_ate/data_model.hpp"
#include "robust_ate/datagen.hpp"
#include "robust_ate/error.hpp"
#include "robust_ate/finite_sample_ci.hpp"
#include "robust_ate/ingest.hpp"
#include "robust_ate/parallel.hpp"
#include "robust_ate/rng.hpp"

#ifndef ROBUST_ATE_GIT_DESCRIBE
#define ROBUST_ATE_GIT_DESCRIBE "unknown"
#endif

namespace robust_ate {

using Json = nlohmann::json;

enum class ExperimentKind { ate_benchmark, ci_benchmark, dataset_analysis };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::ate_benchmark: return "ate_benchmark";
    case ExperimentKind::ci_benchmark: return "ci_benchmark";
    case ExperimentKind::dataset_analysis: return "dataset_analysis";
  }
  return "unknown";
}

struct DatasetSource {
  std::string name;
  std::string expression_path;
  std::string labels_path;
  Orientation orientation = Orientation::genes_in_rows;
  std::set<std::string> treated_classes;
  Index top_k = 200;
  Index sparsity = 10;
  std::uint64_t support_seed = 2024;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::ate_benchmark;
  std::vector<Index> n_grid;
  std::vector<double> rho_grid{0.0, 0.1, 0.2};
  int replications = 100;
  std::uint64_t master_seed = 20240601;
  std::vector<std::string> methods;  // empty: every method of the kind
  std::string output_dir = "results";
  bool scaled = true;
  std::size_t workers = 1;

  // design A
  Index p = 100;
  Index sparsity = 10;
  double signal = 1.0;
  double propensity_signal = 1.0;
  double cauchy_scale = 5.0;
  // design B
  double sigma = 1.0;
  // intervals
  double level = 0.95;
  int bootstrap_replicates = 500;
  SaddlepointMode mode = SaddlepointMode::standard;
  // proposed estimator
  std::vector<double> tau_grid;
  std::optional<double> fixed_tau;
  std::optional<BalanceMap> balance_map;  // unset: "auto"
  double propensity_floor = 0.01;

  std::optional<DatasetSource> dataset;

  std::vector<std::string> resolved_methods() const {
    if (!methods.empty()) return methods;
    if (kind == ExperimentKind::ci_benchmark) return {"proposed", "wald", "bootstrap"};
    return {"proposed", "aipw"};
  }
};

inline ExperimentKind parse_kind(const std::string& s) {
  if (s == "ate_benchmark" || s == "ate-bench") return ExperimentKind::ate_benchmark;
  if (s == "ci_benchmark" || s == "ci-bench") return ExperimentKind::ci_benchmark;
  if (s == "dataset_analysis" || s == "dataset") return ExperimentKind::dataset_analysis;
  throw Error(ErrorKind::InvalidArgument, "unknown experiment kind '" + s + "'");
}

inline SaddlepointMode parse_mode(const std::string& s) {
  if (s == "default" || s == "standard") return SaddlepointMode::standard;
  if (s == "literal") return SaddlepointMode::literal;
  throw Error(ErrorKind::InvalidArgument, "mode must be 'default' or 'literal'");
}

/// Defaults by kind; `scaled` selects desk-scale replication counts.
inline ExperimentConfig default_config(ExperimentKind kind, bool scaled = true) {
  ExperimentConfig c;
  c.kind = kind;
  c.scaled = scaled;
  switch (kind) {
    case ExperimentKind::ate_benchmark:
      c.n_grid = scaled ? std::vector<Index>{40, 100} : std::vector<Index>{20, 40, 60, 80, 100};
      c.rho_grid = scaled ? std::vector<double>{0.0, 0.2} : std::vector<double>{0.0, 0.1, 0.2};
      c.replications = scaled ? 100 : 500;
      break;
    case ExperimentKind::ci_benchmark:
      c.n_grid = {50, 100};
      c.rho_grid = {0.0, 0.1, 0.2};
      c.replications = scaled ? 1000 : 10000;
      break;
    case ExperimentKind::dataset_analysis:
      c.n_grid = {};
      c.rho_grid = {0.0};
      c.replications = 100;
      break;
  }
  return c;
}

inline ExperimentConfig config_from_json(const Json& j) {
  const ExperimentKind kind = parse_kind(j.value("kind", std::string("ate_benchmark")));
  ExperimentConfig c = default_config(kind, j.value("scaled", true));
  if (j.contains("n_grid")) c.n_grid = j.at("n_grid").get<std::vector<Index>>();
  if (j.contains("rho_grid")) c.rho_grid = j.at("rho_grid").get<std::vector<double>>();
  c.replications = j.value("replications", c.replications);
  c.master_seed = j.value("master_seed", c.master_seed);
  if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<std::string>>();
  c.output_dir = j.value("output_dir", c.output_dir);
  c.workers = j.value("workers", c.workers);
  c.p = j.value("p", c.p);
  c.sparsity = j.value("sparsity", c.sparsity);
  c.signal = j.value("signal", c.signal);
  c.propensity_signal = j.value("propensity_signal", c.propensity_signal);
  c.cauchy_scale = j.value("cauchy_scale", c.cauchy_scale);
  c.sigma = j.value("sigma", c.sigma);
  c.level = j.value("level", c.level);
  c.bootstrap_replicates = j.value("bootstrap_replicates", c.bootstrap_replicates);
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  if (j.contains("tau_grid")) c.tau_grid = j.at("tau_grid").get<std::vector<double>>();
  c.propensity_floor = j.value("propensity_floor", c.propensity_floor);
  if (!(c.propensity_floor > 0.0 && c.propensity_floor < 0.5))
    throw Error(ErrorKind::InvalidArgument, "propensity_floor must lie in (0, 0.5)");
  if (j.contains("fixed_tau") && !j.at("fixed_tau").is_null()) c.fixed_tau = j.at("fixed_tau").get<double>();
  if (j.contains("balance_map")) {
    const std::string m = j.at("balance_map").get<std::string>();
    if (m == "identity") c.balance_map = BalanceMap::identity;
    else if (m == "identity_square") c.balance_map = BalanceMap::identity_square;
    else if (m == "auto") c.balance_map.reset();
    else throw Error(ErrorKind::InvalidArgument, "balance_map must be auto, identity or identity_square");
  }
  if (j.contains("dataset")) {
    const Json& d = j.at("dataset");
    DatasetSource s;
    s.name = d.value("name", std::string("dataset"));
    s.expression_path = d.at("expression").get<std::string>();
    s.labels_path = d.at("labels").get<std::string>();
    s.orientation = d.value("orientation", std::string("genes_in_rows")) == "samples_in_rows"
                        ? Orientation::samples_in_rows
                        : Orientation::genes_in_rows;
    for (const auto& t : d.at("treated_classes")) s.treated_classes.insert(t.get<std::string>());
    s.top_k = d.value("top_k", s.top_k);
    s.sparsity = d.value("sparsity", s.sparsity);
    s.support_seed = d.value("support_seed", s.support_seed);
    c.dataset = s;
  }
  if (c.replications < 1) throw Error(ErrorKind::InvalidArgument, "replications must be >= 1");
  if (c.rho_grid.empty()) throw Error(ErrorKind::InvalidArgument, "rho grid is empty");
  if (c.kind != ExperimentKind::dataset_analysis && c.n_grid.empty())
    throw Error(ErrorKind::InvalidArgument, "n grid is empty");
  if (c.kind == ExperimentKind::dataset_analysis && !c.dataset)
    throw Error(ErrorKind::InvalidArgument, "dataset analysis needs a dataset section");
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["kind"] = to_string(c.kind);
  j["n_grid"] = c.n_grid;
  j["rho_grid"] = c.rho_grid;
  j["replications"] = c.replications;
  j["master_seed"] = c.master_seed;
  j["methods"] = c.resolved_methods();
  j["output_dir"] = c.output_dir;
  j["scaled"] = c.scaled;
  j["workers"] = c.workers;
  j["p"] = c.p;
  j["sparsity"] = c.sparsity;
  j["signal"] = c.signal;
  j["propensity_signal"] = c.propensity_signal;
  j["cauchy_scale"] = c.cauchy_scale;
  j["sigma"] = c.sigma;
  j["level"] = c.level;
  j["bootstrap_replicates"] = c.bootstrap_replicates;
  j["mode"] = to_string(c.mode);
  j["tau_grid"] = c.tau_grid;
  j["fixed_tau"] = c.fixed_tau ? Json(*c.fixed_tau) : Json(nullptr);
  j["propensity_floor"] = c.propensity_floor;
  j["balance_map"] = !c.balance_map ? "auto" : *c.balance_map == BalanceMap::identity ? "identity" : "identity_square";
  if (c.dataset) {
    const auto& d = *c.dataset;
    j["dataset"] = {{"name", d.name},
                    {"expression", d.expression_path},
                    {"labels", d.labels_path},
                    {"orientation", d.orientation == Orientation::genes_in_rows ? "genes_in_rows" : "samples_in_rows"},
                    {"treated_classes", std::vector<std::string>(d.treated_classes.begin(), d.treated_classes.end())},
                    {"top_k", d.top_k},
                    {"sparsity", d.sparsity},
                    {"support_seed", d.support_seed}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRecord {
  std::string method;
  Index n = 0;
  double rho = 0.0;
  double bias = std::numeric_limits<double>::quiet_NaN();  // |mean error|
  double signed_bias = std::numeric_limits<double>::quiet_NaN();
  double mse = std::numeric_limits<double>::quiet_NaN();
  double mae = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double avg_length = std::numeric_limits<double>::quiet_NaN();
  double calibration_error = std::numeric_limits<double>::quiet_NaN();
  int replication_count = 0;
  int failures = 0;
};

struct EstimateMetrics {
  double bias;
  double signed_bias;
  double mse;
  double mae;
};

inline EstimateMetrics compute_metrics(const std::vector<double>& estimates, const std::vector<double>& truths) {
  if (estimates.empty()) throw Error(ErrorKind::EmptyInput, "no estimates");
  if (estimates.size() != truths.size()) throw Error(ErrorKind::ShapeMismatch, "estimates and truths differ in length");
  double s = 0.0, s2 = 0.0, sa = 0.0;
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    const double e = estimates[i] - truths[i];
    s += e;
    s2 += e * e;
    sa += std::abs(e);
  }
  const double m = static_cast<double>(estimates.size());
  return {std::abs(s / m), s / m, s2 / m, sa / m};
}

struct IntervalMetrics {
  double coverage;
  double avg_length;
  double calibration_error;
};

inline IntervalMetrics compute_ci_metrics(const std::vector<IntervalEstimate>& intervals,
                                          const std::vector<double>& truths, double nominal) {
  if (intervals.empty()) throw Error(ErrorKind::EmptyInput, "no intervals");
  if (intervals.size() != truths.size()) throw Error(ErrorKind::ShapeMismatch, "intervals and truths differ in length");
  double hits = 0.0, len = 0.0;
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    hits += intervals[i].contains(truths[i]) ? 1.0 : 0.0;
    len += intervals[i].length();
  }
  const double m = static_cast<double>(intervals.size());
  return {hits / m, len / m, std::abs(nominal - hits / m)};
}

/// One method's outcome on one replication.
struct ReplicationRow {
  std::string method;
  Index n = 0;
  double rho = 0.0;
  int replication = 0;
  bool failed = false;
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double truth = std::numeric_limits<double>::quiet_NaN();
  double lower = std::numeric_limits<double>::quiet_NaN();
  double upper = std::numeric_limits<double>::quiet_NaN();
  std::string note;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<MetricsRecord> records;
  std::vector<ReplicationRow> rows;
  Json metadata = Json::object();
};

inline MetricsRecord aggregate(const std::string& method, Index n, double rho, const std::vector<ReplicationRow>& rows,
                               double nominal) {
  MetricsRecord r;
  r.method = method;
  r.n = n;
  r.rho = rho;
  std::vector<double> est, truth, ci_truth;
  std::vector<IntervalEstimate> intervals;
  for (const auto& row : rows) {
    if (row.method != method || row.n != n || row.rho != rho) continue;
    if (row.failed) {
      ++r.failures;
      continue;
    }
    ++r.replication_count;
    est.push_back(row.estimate);
    truth.push_back(row.truth);
    if (std::isfinite(row.lower) && std::isfinite(row.upper)) {
      IntervalEstimate iv;
      iv.lower = row.lower;
      iv.upper = row.upper;
      intervals.push_back(iv);
      ci_truth.push_back(row.truth);
    }
  }
  if (!est.empty()) {
    const auto m = compute_metrics(est, truth);
    r.bias = m.bias;
    r.signed_bias = m.signed_bias;
    r.mse = m.mse;
    r.mae = m.mae;
  }
  if (!intervals.empty()) {
    const auto c = compute_ci_metrics(intervals, ci_truth, nominal);
    r.coverage = c.coverage;
    r.avg_length = c.avg_length;
    r.calibration_error = c.calibration_error;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Per-replication work

inline std::uint64_t replication_seed(std::uint64_t master, Index n, int replication, std::uint64_t purpose = 0) {
  CounterRng s = CounterRng::substream(master ^ mix64(static_cast<std::uint64_t>(n)), static_cast<std::uint64_t>(replication));
  return s.split(purpose)();
}

inline ProposedOptions proposed_options(const ExperimentConfig& cfg) {
  ProposedOptions o;
  o.map = cfg.balance_map;
  o.clip_eps = cfg.propensity_floor;
  o.tau_grid = cfg.tau_grid;
  if (cfg.fixed_tau) o.fixed_tau = std::array<double, 3>{*cfg.fixed_tau, *cfg.fixed_tau, *cfg.fixed_tau};
  o.fit.record_trace = false;
  return o;
}

/// Saddlepoint interval for the proposed ATE: centred, leverage-adjusted
/// influence values of the stacked target + nuisance system.
inline IntervalEstimate proposed_ate_interval(const Dataset& d, const ProposedEstimate& est, double level,
                                              SaddlepointMode mode) {
  if (!std::isfinite(est.ate.variance))
    throw Error(ErrorKind::SingularBread, "no variance pieces for the interval");
  const SandwichParts& parts = est.parts;
  std::vector<Matrix> unit_jac;
  unit_jac.reserve(static_cast<std::size_t>(d.n()));
  const Index q = static_cast<Index>(parts.coords.size());
  for (Index i = 0; i < d.n(); ++i) {
    const Matrix full = unit_moment_jacobian(d, est.fit.blocks, est.fit.spec, i, true);
    Matrix sub(full.rows(), q);
    for (Index k = 0; k < q; ++k) sub.col(k) = full.col(parts.coords[k]);
    unit_jac.push_back(std::move(sub));
  }
  const Vector lev = q > 0 ? generalized_leverage(parts.bread, unit_jac) : Vector::Zero(d.n());
  const Vector j = centered(leverage_adjusted(influence_values(parts), lev));
  return proposed_ci(j, est.ate.ate, 0.5 * (1.0 - level), d.n(), mode);
}

struct MethodOutcome {
  double estimate = 0.0;
  std::optional<IntervalEstimate> interval;
};

/// Runs one ATE method on a dataset. with_interval adds the method's own CI.
inline MethodOutcome run_ate_method(const std::string& method, const Dataset& d, const ExperimentConfig& cfg,
                                    bool with_interval) {
  MethodOutcome out;
  if (method == "proposed") {
    const ProposedEstimate est = estimate_proposed(d, proposed_options(cfg));
    out.estimate = est.ate.ate;
    if (with_interval) out.interval = proposed_ate_interval(d, est, cfg.level, cfg.mode);
  } else if (method == "aipw") {
    const BaselineFit fit = aipw_baseline(d);
    out.estimate = fit.ate.ate;
    if (with_interval) out.interval = wald_ci(fit.ate.ate, fit.ate.variance, cfg.level);
  } else {
    throw Error(ErrorKind::InvalidArgument, "unknown ATE method '" + method + "'");
  }
  return out;
}

inline DesignAConfig design_a_config(const ExperimentConfig& cfg, Index n, double rho, std::uint64_t seed) {
  DesignAConfig a;
  a.n = n;
  a.p = cfg.p;
  a.rho = rho;
  a.beta0_true = alternating_sparse(cfg.p, cfg.sparsity, cfg.signal);
  a.beta1_true = alternating_sparse(cfg.p, cfg.sparsity, cfg.signal);
  a.beta2_true = alternating_sparse(cfg.p, cfg.sparsity, cfg.propensity_signal);
  a.cauchy_scale = cfg.cauchy_scale;
  a.seed = seed;
  return a;
}

inline std::vector<ReplicationRow> run_cell(const ExperimentConfig& cfg, Index n, double rho,
                                            const std::function<std::vector<ReplicationRow>(int)>& one) {
  std::vector<std::vector<ReplicationRow>> slots(static_cast<std::size_t>(cfg.replications));
  parallel_for(slots.size(), cfg.workers, [&](std::size_t r) { slots[r] = one(static_cast<int>(r)); });
  std::vector<ReplicationRow> rows;
  for (auto& s : slots)
    for (auto& row : s) {
      row.n = n;
      row.rho = rho;
      rows.push_back(std::move(row));
    }
  return rows;
}

inline ExperimentResult run_ate_benchmark(const ExperimentConfig& cfg) {
  ExperimentResult res;
  res.config = cfg;
  const auto methods = cfg.resolved_methods();
  for (Index n : cfg.n_grid) {
    for (double rho : cfg.rho_grid) {
      auto rows = run_cell(cfg, n, rho, [&](int r) {
        std::vector<ReplicationRow> out;
        std::optional<SimulatedDataset> sim;
        std::string data_error;
        try {
          sim = simulate_design_a(design_a_config(cfg, n, rho, replication_seed(cfg.master_seed, n, r)));
        } catch (const Error& e) {
          data_error = e.what();
        }
        for (const auto& m : methods) {
          ReplicationRow row;
          row.method = m;
          row.replication = r;
          if (!sim) {
            row.failed = true;
            row.note = data_error;
          } else {
            row.truth = sim->true_sate;
            try {
              const MethodOutcome o = run_ate_method(m, sim->dataset, cfg, false);
              row.estimate = o.estimate;
              if (!std::isfinite(o.estimate)) throw Error(ErrorKind::NonFiniteValue, "estimate is not finite");
            } catch (const Error& e) {
              row.failed = true;
              row.note = e.what();
            }
          }
          out.push_back(std::move(row));
        }
        return out;
      });
      for (const auto& m : methods) res.records.push_back(aggregate(m, n, rho, rows, cfg.level));
      res.rows.insert(res.rows.end(), rows.begin(), rows.end());
    }
  }
  return res;
}

/// Robust slope estimate and its three intervals on one design-B sample.
struct RegressionIntervals {
  double point = 0.0;
  std::optional<IntervalEstimate> proposed;
  std::optional<IntervalEstimate> wald;
  std::optional<IntervalEstimate> bootstrap;
};

inline RegressionIntervals regression_intervals(const RegressionData& data, const ExperimentConfig& cfg,
                                                std::uint64_t bootstrap_seed, const std::set<std::string>& want) {
  RegressionIntervals out;
  const Matrix x = data.design();
  const RobustRegressionFit fit = fit_robust_regression(x, data.y);
  const RegressionSystem sys = robust_regression_system(x, data.y, fit, 1);
  out.point = sys.point;
  if (want.count("proposed")) {
    const Vector j = centered(leverage_adjusted(sys.system.influence, sys.leverage));
    out.proposed = proposed_ci(j, sys.point, 0.5 * (1.0 - cfg.level), x.rows(), cfg.mode);
  }
  if (want.count("wald")) out.wald = wald_ci(sys.point, sys.variance, cfg.level);
  if (want.count("bootstrap")) {
    const Vector start = fit.beta;
    auto estimator = [&](const std::vector<Index>& rows) {
      Matrix xb(static_cast<Index>(rows.size()), x.cols());
      Vector yb(static_cast<Index>(rows.size()));
      for (std::size_t k = 0; k < rows.size(); ++k) {
        xb.row(static_cast<Index>(k)) = x.row(rows[k]);
        yb[static_cast<Index>(k)] = data.y[rows[k]];
      }
      const Eigen::FullPivLU<Matrix> lu(xb);
      if (lu.rank() < x.cols()) throw Error(ErrorKind::SingularBread, "resample has a rank-deficient design");
      return fit_robust_regression(xb, yb, {}, 500, 1e-10, &start).beta[1];
    };
    out.bootstrap = bootstrap_ci(x.rows(), estimator, sys.point, cfg.level, cfg.bootstrap_replicates, bootstrap_seed);
  }
  return out;
}

inline ExperimentResult run_ci_benchmark(const ExperimentConfig& cfg) {
  ExperimentResult res;
  res.config = cfg;
  const auto methods = cfg.resolved_methods();
  const std::set<std::string> want(methods.begin(), methods.end());
  for (const auto& m : methods)
    if (m != "proposed" && m != "wald" && m != "bootstrap")
      throw Error(ErrorKind::InvalidArgument, "unknown interval method '" + m + "'");
  for (Index n : cfg.n_grid) {
    for (double rho : cfg.rho_grid) {
      auto rows = run_cell(cfg, n, rho, [&](int r) {
        DesignBConfig b;
        b.n = n;
        b.rho = rho;
        b.sigma = cfg.sigma;
        b.cauchy_scale = cfg.cauchy_scale;
        b.seed = replication_seed(cfg.master_seed, n, r);
        const RegressionData data = simulate_design_b(b);
        std::vector<ReplicationRow> out;
        std::optional<RegressionIntervals> iv;
        std::string err;
        try {
          iv = regression_intervals(data, cfg, replication_seed(cfg.master_seed, n, r, 1), want);
        } catch (const Error& e) {
          err = e.what();
        }
        for (const auto& m : methods) {
          ReplicationRow row;
          row.method = m;
          row.replication = r;
          row.truth = b.beta1;
          const std::optional<IntervalEstimate>* chosen =
              !iv ? nullptr : (m == "proposed" ? &iv->proposed : m == "wald" ? &iv->wald : &iv->bootstrap);
          if (!chosen || !chosen->has_value()) {
            row.failed = true;
            row.note = err;
          } else {
            row.estimate = iv->point;
            row.lower = (*chosen)->lower;
            row.upper = (*chosen)->upper;
          }
          out.push_back(std::move(row));
        }
        return out;
      });
      for (const auto& m : methods) res.records.push_back(aggregate(m, n, rho, rows, cfg.level));
      res.rows.insert(res.rows.end(), rows.begin(), rows.end());
    }
  }
  return res;
}

/// Covariates, treatment and fixed coefficient vectors of a real dataset.
struct PreparedDataset {
  Matrix x;
  Vector t;
  Vector beta0;
  Vector beta1;
  Json metadata;
};

inline PreparedDataset prepare_dataset(const DatasetSource& src) {
  const ExpressionMatrix m = load_expression_matrix(src.expression_path, src.orientation);
  const LabelMap labels = load_labels(src.labels_path, src.treated_classes);
  PreparedDataset out;
  out.t = derive_treatment(labels, m.sample_ids);
  const PreparedCovariates cov = prepare_covariates(m, src.top_k);
  out.x = cov.x;
  const Index p = out.x.cols();
  out.beta0 = random_sparse_beta(p, src.sparsity, src.support_seed);
  out.beta1 = random_sparse_beta(p, src.sparsity, src.support_seed + 1);
  const Index treated = static_cast<Index>(out.t.sum());
  out.metadata = {{"name", src.name},
                  {"n", m.samples()},
                  {"p_raw", m.genes()},
                  {"p_used", p},
                  {"treated", treated},
                  {"control", m.samples() - treated},
                  {"treated_classes", std::vector<std::string>(src.treated_classes.begin(), src.treated_classes.end())},
                  {"screening", {{"rule", "top_variance"}, {"k", src.top_k}}},
                  {"standardization", "population sd, constant columns dropped"},
                  {"dropped_constant", cov.dropped_constant.size()},
                  {"support_seed", src.support_seed},
                  {"sparsity", src.sparsity}};
  return out;
}

inline ExperimentResult run_dataset_analysis(const ExperimentConfig& cfg) {
  if (!cfg.dataset) throw Error(ErrorKind::InvalidArgument, "dataset analysis needs a dataset section");
  ExperimentResult res;
  res.config = cfg;
  const PreparedDataset prep = prepare_dataset(*cfg.dataset);
  res.metadata = prep.metadata;
  const auto methods = cfg.resolved_methods();
  const Index n = prep.x.rows();
  const double rho = 0.0;
  auto rows = run_cell(cfg, n, rho, [&](int r) {
    const SemiSynthetic s =
        generate_semisynthetic(prep.x, prep.t, prep.beta0, prep.beta1, replication_seed(cfg.master_seed, n, r));
    const Dataset d = validate_dataset(prep.x, prep.t, s.y);
    std::vector<ReplicationRow> out;
    for (const auto& m : methods) {
      ReplicationRow row;
      row.method = m;
      row.replication = r;
      row.truth = s.true_sate;
      try {
        const MethodOutcome o = run_ate_method(m, d, cfg, true);
        row.estimate = o.estimate;
        if (o.interval) {
          row.lower = o.interval->lower;
          row.upper = o.interval->upper;
        }
      } catch (const Error& e) {
        row.failed = true;
        row.note = e.what();
      }
      out.push_back(std::move(row));
    }
    return out;
  });
  for (const auto& m : methods) res.records.push_back(aggregate(m, n, rho, rows, cfg.level));
  res.rows = std::move(rows);
  return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  switch (cfg.kind) {
    case ExperimentKind::ate_benchmark: return run_ate_benchmark(cfg);
    case ExperimentKind::ci_benchmark: return run_ci_benchmark(cfg);
    case ExperimentKind::dataset_analysis: return run_dataset_analysis(cfg);
  }
  throw Error(ErrorKind::InvalidArgument, "unknown experiment kind");
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

inline double parse_field_number(const std::string& s) {
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (!parse_number(s, v)) throw Error(ErrorKind::ParseError, "bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline const std::vector<std::string>& metrics_header() {
  static const std::vector<std::string> h{"method", "n", "rho", "bias", "signed_bias", "mse", "mae", "coverage",
                                          "avg_length", "calibration_error", "replication_count", "failures"};
  return h;
}

inline void write_metrics_csv(const std::vector<MetricsRecord>& records, std::ostream& out) {
  const auto& h = metrics_header();
  for (std::size_t i = 0; i < h.size(); ++i) out << (i ? "," : "") << h[i];
  out << "\r\n";
  using detail::format_number;
  for (const auto& r : records) {
    out << detail::csv_field(r.method) << ',' << r.n << ',' << format_number(r.rho) << ',' << format_number(r.bias)
        << ',' << format_number(r.signed_bias) << ',' << format_number(r.mse) << ',' << format_number(r.mae) << ','
        << format_number(r.coverage) << ',' << format_number(r.avg_length) << ','
        << format_number(r.calibration_error) << ',' << r.replication_count << ',' << r.failures << "\r\n";
  }
}

inline std::vector<MetricsRecord> parse_metrics_csv(std::istream& in) {
  const auto lines = detail::read_lines(in);
  if (lines.empty()) throw Error(ErrorKind::ParseError, "missing header");
  const auto header = detail::split_record(lines[0], ',');
  if (header != metrics_header()) throw Error(ErrorKind::ParseError, "unexpected metrics header", 1);
  std::vector<MetricsRecord> out;
  for (std::size_t l = 1; l < lines.size(); ++l) {
    const auto f = detail::split_record(lines[l], ',');
    if (f.size() != header.size()) throw Error(ErrorKind::RaggedRows, "metrics row length", l + 1);
    MetricsRecord r;
    r.method = f[0];
    r.n = static_cast<Index>(detail::parse_field_number(f[1]));
    r.rho = detail::parse_field_number(f[2]);
    r.bias = detail::parse_field_number(f[3]);
    r.signed_bias = detail::parse_field_number(f[4]);
    r.mse = detail::parse_field_number(f[5]);
    r.mae = detail::parse_field_number(f[6]);
    r.coverage = detail::parse_field_number(f[7]);
    r.avg_length = detail::parse_field_number(f[8]);
    r.calibration_error = detail::parse_field_number(f[9]);
    r.replication_count = static_cast<int>(detail::parse_field_number(f[10]));
    r.failures = static_cast<int>(detail::parse_field_number(f[11]));
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_replications_csv(const std::vector<ReplicationRow>& rows, std::ostream& out) {
  out << "method,n,rho,replication,failed,estimate,truth,lower,upper,note\r\n";
  using detail::format_number;
  for (const auto& r : rows)
    out << detail::csv_field(r.method) << ',' << r.n << ',' << format_number(r.rho) << ',' << r.replication << ','
        << (r.failed ? 1 : 0) << ',' << format_number(r.estimate) << ',' << format_number(r.truth) << ','
        << format_number(r.lower) << ',' << format_number(r.upper) << ',' << detail::csv_field(r.note) << "\r\n";
}

/// One file per rho: rows (n, method) with the metric columns.
inline std::map<double, std::vector<const MetricsRecord*>> figure_series(const std::vector<MetricsRecord>& records) {
  std::map<double, std::vector<const MetricsRecord*>> by_rho;
  for (const auto& r : records) by_rho[r.rho].push_back(&r);
  return by_rho;
}

inline std::string rho_tag(double rho) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << rho;
  return s.str();
}

inline Json summary_json(const ExperimentResult& res) {
  Json j;
  j["config"] = config_to_json(res.config);
  j["git_describe"] = ROBUST_ATE_GIT_DESCRIBE;
  j["seeds"] = {{"master_seed", res.config.master_seed},
                {"replication_stream", "substream(master_seed ^ mix64(n), replication)"}};
  j["cells"] = Json::array();
  for (const auto& r : res.records) {
    auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
    j["cells"].push_back({{"method", r.method},
                          {"n", r.n},
                          {"rho", r.rho},
                          {"bias", num(r.bias)},
                          {"signed_bias", num(r.signed_bias)},
                          {"mse", num(r.mse)},
                          {"mae", num(r.mae)},
                          {"coverage", num(r.coverage)},
                          {"avg_length", num(r.avg_length)},
                          {"calibration_error", num(r.calibration_error)},
                          {"replication_count", r.replication_count},
                          {"failures", r.failures}});
  }
  j["metadata"] = res.metadata;
  return j;
}

/// Writes metrics.csv, replications.csv, summary.json and figure_rho<rho>.csv.
inline std::vector<std::string> emit_report(const ExperimentResult& res, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + dir + ": " + ec.message());
  std::vector<std::string> written;
  auto open = [&](const std::string& name) {
    const std::string path = (fs::path(dir) / name).string();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::IoError, "cannot open " + path);
    written.push_back(path);
    return f;
  };
  {
    auto f = open("metrics.csv");
    write_metrics_csv(res.records, f);
  }
  {
    auto f = open("replications.csv");
    write_replications_csv(res.rows, f);
  }
  {
    auto f = open("summary.json");
    f << summary_json(res).dump(2) << '\n';
  }
  for (const auto& [rho, recs] : figure_series(res.records)) {
    auto f = open("figure_rho" + rho_tag(rho) + ".csv");
    std::vector<MetricsRecord> copy;
    for (const auto* r : recs) copy.push_back(*r);
    write_metrics_csv(copy, f);
  }
  for (const auto& p : written)
    if (!fs::exists(p)) throw Error(ErrorKind::IoError, "failed to write " + p);
  return written;
}

}  // namespace robust_ate
