// Command-line driver for the benchmark harness.
//
//   robust-ate ate-bench  [--config cfg.json] [--seed S] [--out DIR] [--scaled|--full] ...
//   robust-ate ci-bench   ...
//   robust-ate dataset    --config cfg.json | --name khan --data-dir data

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "robust_ate/robust_ate.hpp"

namespace {

using namespace robust_ate;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool full = false;
  bool scaled = false;
  std::string mode;
  std::vector<std::string> methods;
  std::optional<std::size_t> workers;
  std::optional<int> replications;
  std::vector<Index> n_grid;
  std::vector<double> rho_grid;
  std::optional<int> bootstrap;
  // dataset shortcut
  std::string name;
  std::string data_dir = "data";
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_path, "JSON experiment configuration")->check(CLI::ExistingFile);
  app->add_option("--seed", f.seed, "master seed");
  app->add_option("--out", f.out, "output directory");
  app->add_flag("--scaled", f.scaled, "desk-scale replication counts (default)");
  app->add_flag("--full", f.full, "full-scale replication counts");
  app->add_option("--mode", f.mode, "tail-probability mode")->check(CLI::IsMember({"default", "literal"}));
  app->add_option("--methods", f.methods, "methods to run");
  app->add_option("--workers", f.workers, "worker threads");
  app->add_option("--replications", f.replications, "replications per cell");
  app->add_option("--n", f.n_grid, "sample-size grid");
  app->add_option("--rho", f.rho_grid, "contamination grid");
  app->add_option("--bootstrap", f.bootstrap, "bootstrap replicates");
}

ExperimentConfig build_config(ExperimentKind kind, const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path);
    Json j = Json::parse(in);
    if (!j.contains("kind")) j["kind"] = to_string(kind);
    if (f.full) j["scaled"] = false;
    cfg = config_from_json(j);
    if (cfg.kind != kind)
      throw Error(ErrorKind::InvalidArgument, std::string("config kind is ") + to_string(cfg.kind));
  } else {
    cfg = default_config(kind, !f.full);
  }
  if (kind == ExperimentKind::dataset_analysis && !cfg.dataset) {
    DatasetSource s;
    if (f.name == "khan") {
      s.treated_classes = {"EWS", "BL"};
    } else if (f.name == "golub") {
      s.treated_classes = {"ALL"};
    } else {
      throw Error(ErrorKind::InvalidArgument, "dataset needs --config or --name khan|golub");
    }
    s.name = f.name;
    s.expression_path = f.data_dir + "/" + f.name + "/" + f.name + "_expression.csv";
    s.labels_path = f.data_dir + "/" + f.name + "/" + f.name + "_labels.csv";
    cfg.dataset = s;
  }
  if (f.seed) cfg.master_seed = *f.seed;
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (!f.mode.empty()) cfg.mode = parse_mode(f.mode);
  if (!f.methods.empty()) cfg.methods = f.methods;
  if (f.workers) cfg.workers = *f.workers;
  if (f.replications) cfg.replications = *f.replications;
  if (!f.n_grid.empty()) cfg.n_grid = f.n_grid;
  if (!f.rho_grid.empty()) cfg.rho_grid = f.rho_grid;
  if (f.bootstrap) cfg.bootstrap_replicates = *f.bootstrap;
  return cfg;
}

void print_records(const std::vector<MetricsRecord>& records) {
  std::cout << "method        n    rho      bias        mse         mae   coverage     length   fail\n";
  for (const auto& r : records) {
    std::printf("%-10s %4ld %6.2f %9.4g %10.4g %11.4g %10.4g %10.4g %6d\n", r.method.c_str(), static_cast<long>(r.n),
                r.rho, r.bias, r.mse, r.mae, r.coverage, r.avg_length, r.failures);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Outlier-robust doubly robust ATE benchmarks"};
  app.require_subcommand(1);
  CommonFlags ate_flags, ci_flags, ds_flags;
  auto* ate = app.add_subcommand("ate-bench", "ATE estimator benchmark on simulation design A");
  add_common(ate, ate_flags);
  auto* ci = app.add_subcommand("ci-bench", "confidence-interval benchmark on simulation design B");
  add_common(ci, ci_flags);
  auto* ds = app.add_subcommand("dataset", "semi-synthetic analysis on an expression dataset");
  add_common(ds, ds_flags);
  ds->add_option("--name", ds_flags.name, "khan or golub (when no --config is given)");
  ds->add_option("--data-dir", ds_flags.data_dir, "directory holding <name>/<name>_{expression,labels}.csv");
  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    if (ate->parsed()) cfg = build_config(ExperimentKind::ate_benchmark, ate_flags);
    else if (ci->parsed()) cfg = build_config(ExperimentKind::ci_benchmark, ci_flags);
    else cfg = build_config(ExperimentKind::dataset_analysis, ds_flags);
    const auto start = std::chrono::steady_clock::now();
    const ExperimentResult res = run_experiment(cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    print_records(res.records);
    if (!res.metadata.empty()) std::cout << res.metadata.dump() << '\n';
    for (const auto& path : emit_report(res, cfg.output_dir)) std::cout << "wrote " << path << '\n';
    std::cout << "elapsed " << secs << " s\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
