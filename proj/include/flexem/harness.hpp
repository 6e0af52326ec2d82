#pragma once

// Experiment orchestration: data generation or loading, repeated fits across
// algorithms and seeds, metric aggregation and result files.

#include "flexem/baselines.hpp"
#include "flexem/config.hpp"
#include "flexem/elliptic.hpp"
#include "flexem/fem.hpp"
#include "flexem/format.hpp"
#include "flexem/kmeans.hpp"
#include "flexem/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace flexem {

// ---------------------------------------------------------------------------
// CSV

/// Reads a numeric CSV. With `has_labels` the last column holds integer labels.
/// A first line with any non-numeric cell is treated as a header.
/// `labels_only` accepts a file whose single column is the label.
inline DataSet read_csv(std::istream& in, bool has_labels, bool labels_only = false) {
  DataSet out;
  std::vector<std::vector<double>> rows;
  std::string raw;
  int lineno = 0;
  std::size_t width = 0;
  bool first = true;
  while (std::getline(in, raw)) {
    ++lineno;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    if (trim(raw).empty()) continue;
    const auto cells = split(raw, ',');
    if (first) {
      first = false;
      const bool header = std::any_of(cells.begin(), cells.end(), [](auto c) {
        const auto t = trim(c);
        return !parse_double(t) && t != "nan" && t != "inf" && t != "-inf";
      });
      if (header) {
        width = cells.size();
        continue;
      }
    }
    if (width == 0) width = cells.size();
    if (cells.size() != width) {
      throw Error("row " + std::to_string(lineno) + ": expected " + std::to_string(width) + " fields, got " +
                  std::to_string(cells.size()));
    }
    std::vector<double> row;
    row.reserve(width);
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const auto cell = trim(cells[j]);
      const auto v = parse_double(cell);
      if (!v) {
        throw Error("row " + std::to_string(lineno) + ", column " + std::to_string(j + 1) + ": non-numeric value '" +
                    std::string(cell) + "'");
      }
      if (!std::isfinite(*v)) {
        throw Error("row " + std::to_string(lineno) + ", column " + std::to_string(j + 1) + ": non-finite value");
      }
      if (has_labels && j + 1 == cells.size()) {
        if (*v != std::floor(*v) || (*v < 0 && *v != kNoise)) {
          throw Error("row " + std::to_string(lineno) + ": label must be a non-negative integer or -1");
        }
      }
      row.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error("empty file: no data rows");
  const auto cols = static_cast<Eigen::Index>(width) - (has_labels ? 1 : 0);
  if (cols < 1 && !(has_labels && labels_only)) throw Error("no feature columns");
  out.x.resize(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) out.x(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    if (has_labels) out.labels.push_back(static_cast<int>(rows[i].back()));
  }
  return out;
}

inline DataSet load_csv(const std::string& path, bool has_labels) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  return read_csv(in, has_labels);
}

/// Integer labels from the last column of each row (header auto-detected).
inline std::vector<int> load_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  return read_csv(in, true, true).labels;
}

/// Rows of `x`, then the label column when labels are given. Doubles round-trip exactly.
inline void write_csv(std::ostream& out, const Matrix& x, const std::vector<int>& labels = {}) {
  require(labels.empty() || static_cast<Eigen::Index>(labels.size()) == x.rows(), "label count differs from rows");
  for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? "," : "") << "x" << j + 1;
  if (!labels.empty()) out << ",label";
  out << '\n';
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? "," : "") << format_double(x(i, j));
    if (!labels.empty()) out << ',' << labels[static_cast<std::size_t>(i)];
    out << '\n';
  }
}

inline void write_csv(const std::string& path, const Matrix& x, const std::vector<int>& labels = {}) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  write_csv(out, x, labels);
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::json matrix_rows(const Matrix& a) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    auto r = nlohmann::json::array();
    for (Eigen::Index j = 0; j < a.cols(); ++j) r.push_back(a(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline nlohmann::json model_json(const MixtureModel& model) {
  nlohmann::json j;
  j["pi"] = std::vector<double>(model.pi.data(), model.pi.data() + model.pi.size());
  auto mus = nlohmann::json::array();
  for (const auto& mu : model.mu) mus.push_back(std::vector<double>(mu.data(), mu.data() + mu.size()));
  j["mu"] = std::move(mus);
  auto sig = nlohmann::json::array();
  for (const auto& s : model.sigma) sig.push_back(matrix_rows(s));
  j["Sigma"] = std::move(sig);
  return j;
}

inline nlohmann::json report_json(const FitReport& rep) {
  nlohmann::json j;
  j["schema"] = 1;
  j["algorithm"] = rep.algorithm;
  j["labels"] = rep.labels;
  j["model"] = model_json(rep.model);
  j["loglik_trace"] = rep.loglik_trace;
  nlohmann::json d;
  d["em_iters"] = rep.em_iters;
  d["converged"] = rep.converged;
  d["reseeds"] = rep.reseeds;
  d["monotonicity_violations"] = rep.monotonicity_violations;
  d["fixed_point_iters"] = rep.per_cluster_fp_iters;
  d["warnings"] = rep.warnings;
  j["diagnostics"] = std::move(d);
  return j;
}

/// k-means expressed as a mixture: proportions, centers and identity scatter.
inline FitReport kmeans_report(const Matrix& x, int k, std::uint64_t seed, int restarts,
                               const IsolationRule& isolation = {}) {
  const auto km = kmeans(x, k, seed, restarts, isolation);
  FitReport rep;
  rep.algorithm = "kmeans";
  rep.labels = km.labels;
  rep.model.pi = Vector::Zero(k);
  for (int l : km.labels) rep.model.pi(l) += 1.0 / static_cast<double>(x.rows());
  for (int c = 0; c < k; ++c) {
    rep.model.mu.push_back(km.centers.row(c).transpose());
    rep.model.sigma.push_back(Matrix::Identity(x.cols(), x.cols()));
  }
  rep.em_iters = km.iterations;
  rep.converged = true;
  return rep;
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct AlgorithmSpec {
  enum class Kind { Fem, Gmm, KMeans };
  Kind kind = Kind::Fem;
  int version = 1;

  std::string name() const {
    switch (kind) {
      case Kind::Fem:
        return "fem_v" + std::to_string(version);
      case Kind::Gmm:
        return "gmm";
      case Kind::KMeans:
        break;
    }
    return "kmeans";
  }

  /// "fem", "fem:2", "gmm" or "kmeans".
  static AlgorithmSpec parse(std::string_view text) {
    const auto t = trim(text);
    AlgorithmSpec a;
    if (t == "gmm") {
      a.kind = Kind::Gmm;
    } else if (t == "kmeans") {
      a.kind = Kind::KMeans;
    } else if (t == "fem") {
      a.kind = Kind::Fem;
    } else if (t.substr(0, 4) == "fem:") {
      const auto v = parse_int(t.substr(4));
      if (!v || *v < 1 || *v > 4) throw Error("fem version must be in 1..4: '" + std::string(t) + "'");
      a.version = static_cast<int>(*v);
    } else {
      throw Error("unknown algorithm '" + std::string(t) + "'");
    }
    return a;
  }
};

inline const std::vector<std::string>& known_metrics() {
  static const std::vector<std::string> names{"ari",          "ami",          "accuracy", "ari_nonoise",
                                              "ami_nonoise",  "accuracy_nonoise", "mu_error", "sigma_error"};
  return names;
}

struct ExperimentConfig {
  /// Generated setup, or a CSV path whose last column holds labels when `csv_labels` is set.
  std::variant<SetupSpec, std::string> source = setup_spec(1);
  bool csv_labels = true;
  int k = 0;  // 0: number of clusters in the setup
  std::vector<AlgorithmSpec> algorithms{AlgorithmSpec{}};
  int nrep = 50;
  std::uint64_t base_seed = 0;
  std::vector<std::string> metrics{"ari"};
  std::string output;
  int jobs = 1;
  int kmeans_restarts = 10;
  IsolationRule isolation{};
  FitConfig fit{};

  bool generated() const { return std::holds_alternative<SetupSpec>(source); }

  int clusters() const {
    if (k > 0) return k;
    if (generated()) return static_cast<int>(std::get<SetupSpec>(source).clusters.size());
    return 0;
  }

  void validate() const {
    require(nrep >= 1, "nrep must be >= 1");
    require(!algorithms.empty(), "algorithms must not be empty");
    require(jobs >= 1, "jobs must be >= 1");
    require(clusters() >= 1, "k must be given when data come from a file");
    for (const auto& m : metrics) {
      require(std::find(known_metrics().begin(), known_metrics().end(), m) != known_metrics().end(),
              "unknown metric '" + m + "'");
      const bool needs_truth = m == "mu_error" || m == "sigma_error";
      require(!needs_truth || generated(), "metric '" + m + "' needs a generated setup");
      require(generated() || csv_labels, "metric '" + m + "' needs labelled data");
    }
    if (generated()) flexem::validate(std::get<SetupSpec>(source));
  }
};

/// Parses an experiment config.
///
/// Keys: setup (1..5) | setup_file | data, labels, k, algorithms, nrep, base_seed,
/// metrics, output, jobs, restarts, em_max_iters, em_tol, fp_max_iters, fp_tol,
/// loglik_monitor (off | gaussian | student:nu).
/// [cluster] sections define an inline setup together with m, n and the other setup keys.
inline ExperimentConfig parse_experiment(const config::Document& doc, const std::string& base_dir = ".") {
  const auto& root = doc.root;
  static const std::set<std::string> experiment_keys{
      "setup", "setup_file", "data", "labels", "k", "algorithms", "nrep", "base_seed", "metrics", "output", "jobs",
      "restarts", "isolated_size", "isolated_fraction", "isolation_rounds", "em_max_iters", "em_tol",
      "fp_max_iters", "fp_tol", "loglik_monitor"};
  static const std::set<std::string> setup_keys{"setup_id", "m", "n", "noise_fraction", "noise_range",
                                                "proportions", "dirichlet_alpha", "min_proportion", "tau"};
  std::set<std::string> allowed = experiment_keys;
  allowed.insert(setup_keys.begin(), setup_keys.end());
  root.only(allowed);

  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? p : (std::filesystem::path(base_dir) / path).string();
  };

  ExperimentConfig cfg;
  const int sources = int(root.has("setup")) + int(root.has("setup_file")) + int(root.has("data")) +
                      int(!doc.all("cluster").empty());
  if (sources != 1) throw Error("line 1: exactly one of setup, setup_file, data or [cluster] sections is required");
  if (root.has("setup")) {
    const auto id = root.integer("setup");
    if (id < 1 || id > 5) root.fail("setup", "must be in 1..5");
    cfg.source = setup_spec(static_cast<int>(id));
  } else if (root.has("setup_file")) {
    cfg.source = parse_setup(config::parse_file(resolve(root.str("setup_file"))));
  } else if (root.has("data")) {
    cfg.source = resolve(root.str("data"));
    const auto& lab = root.has("labels") ? root.str("labels") : std::string("true");
    if (lab != "true" && lab != "false") root.fail("labels", "expected true or false");
    cfg.csv_labels = lab == "true";
  } else {
    config::Document setup_doc;
    for (const auto& [key, entry] : root.entries)
      if (setup_keys.count(key)) setup_doc.root.entries[key] = entry;
    setup_doc.root.line = root.line;
    setup_doc.sections = doc.sections;
    cfg.source = parse_setup(setup_doc);
  }
  if (!root.has("data")) {
    for (const auto& s : doc.sections)
      if (s.name != "cluster") throw Error("line " + std::to_string(s.line) + ": unknown section [" + s.name + "]");
  }

  cfg.k = static_cast<int>(root.integer("k", 0));
  if (cfg.k < 0) root.fail("k", "must be positive");
  if (root.has("algorithms")) {
    cfg.algorithms.clear();
    for (auto part : split(root.str("algorithms"), ',')) {
      try {
        cfg.algorithms.push_back(AlgorithmSpec::parse(part));
      } catch (const Error& e) {
        root.fail("algorithms", e.what());
      }
    }
  }
  cfg.nrep = static_cast<int>(root.integer("nrep", cfg.nrep));
  if (cfg.nrep < 1) root.fail("nrep", "must be >= 1");
  if (root.has("base_seed")) {
    const auto s = parse_int(root.str("base_seed"));
    if (!s || *s < 0) root.fail("base_seed", "expected a non-negative integer");
    cfg.base_seed = static_cast<std::uint64_t>(*s);
  }
  if (root.has("metrics")) {
    cfg.metrics.clear();
    for (auto part : split(root.str("metrics"), ',')) {
      const std::string name(trim(part));
      if (name.empty()) continue;
      if (std::find(known_metrics().begin(), known_metrics().end(), name) == known_metrics().end())
        root.fail("metrics", "unknown metric '" + name + "'");
      cfg.metrics.push_back(name);
    }
  }
  if (root.has("output")) cfg.output = root.str("output");
  cfg.jobs = static_cast<int>(root.integer("jobs", 1));
  if (cfg.jobs < 1) root.fail("jobs", "must be >= 1");
  cfg.kmeans_restarts = static_cast<int>(root.integer("restarts", cfg.kmeans_restarts));
  if (cfg.kmeans_restarts < 1) root.fail("restarts", "must be >= 1");
  cfg.isolation.max_size = static_cast<int>(root.integer("isolated_size", cfg.isolation.max_size));
  cfg.isolation.max_fraction = root.num("isolated_fraction", cfg.isolation.max_fraction);
  cfg.isolation.max_rounds = static_cast<int>(root.integer("isolation_rounds", cfg.isolation.max_rounds));
  if (cfg.isolation.max_size < 0) root.fail("isolated_size", "must be >= 0");
  if (cfg.isolation.max_fraction < 0.0 || cfg.isolation.max_fraction >= 1.0)
    root.fail("isolated_fraction", "must lie in [0, 1)");
  if (cfg.isolation.max_rounds < 0) root.fail("isolation_rounds", "must be >= 0");
  cfg.fit.em_max_iters = static_cast<int>(root.integer("em_max_iters", cfg.fit.em_max_iters));
  cfg.fit.em_tol = root.num("em_tol", cfg.fit.em_tol);
  cfg.fit.fixed_point.max_iters = static_cast<int>(root.integer("fp_max_iters", cfg.fit.fixed_point.max_iters));
  cfg.fit.fixed_point.tol = root.num("fp_tol", cfg.fit.fixed_point.tol);
  if (cfg.fit.em_max_iters < 1) root.fail("em_max_iters", "must be >= 1");
  if (!(cfg.fit.em_tol > 0.0)) root.fail("em_tol", "must be positive");
  if (cfg.fit.fixed_point.max_iters < 1) root.fail("fp_max_iters", "must be >= 1");
  if (!(cfg.fit.fixed_point.tol > 0.0)) root.fail("fp_tol", "must be positive");
  if (root.has("loglik_monitor")) {
    const auto& mon = root.str("loglik_monitor");
    if (mon == "off") {
      cfg.fit.likelihood_monitor = MonitorOff{};
    } else if (mon == "gaussian") {
      cfg.fit.likelihood_monitor = MonitorGaussian{};
    } else if (mon.rfind("student:", 0) == 0) {
      const auto nu = parse_double(std::string_view(mon).substr(8));
      if (!nu || *nu <= 0.0) root.fail("loglik_monitor", "student needs a positive nu");
      const int k = cfg.clusters();
      if (k < 1) root.fail("loglik_monitor", "student monitor needs k");
      cfg.fit.likelihood_monitor = MonitorStudent{Vector::Constant(k, *nu)};
    } else {
      root.fail("loglik_monitor", "expected off, gaussian or student:nu");
    }
  }
  // monotonicity is a reported diagnostic inside batches, never a batch abort
  cfg.fit.assert_monotone = false;
  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_experiment_file(const std::string& path) {
  const auto dir = std::filesystem::path(path).parent_path().string();
  return parse_experiment(config::parse_file(path), dir.empty() ? "." : dir);
}

// ---------------------------------------------------------------------------
// Running

struct RunRecord {
  int rep = 0;
  std::uint64_t seed = 0;
  std::string algorithm;
  bool ok = false;
  std::string error;
  int em_iters = 0;
  bool converged = false;
  /// Values in ExperimentResult::columns order; NaN where not applicable.
  std::vector<double> values;
  double runtime_ms = 0.0;
  std::vector<double> loglik_trace;
};

struct Aggregate {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
};

struct AlgorithmSummary {
  std::string algorithm;
  int runs = 0;
  int failures = 0;
  std::vector<Aggregate> columns;  // parallel to ExperimentResult::columns
  Aggregate em_iters;
  Aggregate runtime_ms;
};

struct ExperimentResult {
  std::vector<std::string> columns;
  std::vector<RunRecord> records;  // rep-major, algorithms in config order
  std::vector<AlgorithmSummary> summary;
};

/// Mean, sample standard deviation and median over the finite values.
inline Aggregate aggregate(const std::vector<double>& values) {
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  Aggregate a;
  a.count = static_cast<int>(v.size());
  if (v.empty()) return a;
  double sum = 0.0;
  for (double x : v) sum += x;
  a.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - a.mean) * (x - a.mean);
  a.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  std::sort(v.begin(), v.end());
  const auto h = v.size() / 2;
  a.median = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  return a;
}

namespace detail {

/// SplitMix64 finalizer; decorrelates the init seed from the data seed.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::vector<std::string> metric_columns(const ExperimentConfig& cfg) {
  std::vector<std::string> cols;
  const int k = cfg.clusters();
  for (const auto& m : cfg.metrics) {
    if (m == "mu_error" || m == "sigma_error") {
      const std::string stem = m == "mu_error" ? "mu" : "sigma";
      for (int c = 1; c <= k; ++c) cols.push_back(stem + std::to_string(c) + "_error");
    } else {
      cols.push_back(m);
    }
  }
  return cols;
}

inline std::vector<double> score(const ExperimentConfig& cfg, const FitReport& rep, const std::vector<int>& truth,
                                 const MixtureModel* truth_model) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> out;
  std::optional<std::vector<int>> perm;
  auto matching = [&]() -> const std::vector<int>& {
    if (!perm) perm = match_clusters(*truth_model, rep.model, truth, rep.labels);
    return *perm;
  };
  const int k = cfg.clusters();
  for (const auto& m : cfg.metrics) {
    if (m == "ari") out.push_back(ari(rep.labels, truth));
    else if (m == "ami") out.push_back(ami(rep.labels, truth));
    else if (m == "accuracy") out.push_back(accuracy(rep.labels, truth));
    else if (m == "ari_nonoise") out.push_back(ari(rep.labels, truth, true));
    else if (m == "ami_nonoise") out.push_back(ami(rep.labels, truth, true));
    else if (m == "accuracy_nonoise") out.push_back(accuracy(rep.labels, truth, true));
    else {
      const bool mu = m == "mu_error";
      const bool usable = truth_model && truth_model->k() == k && rep.model.k() == k &&
                          (mu || rep.algorithm != "kmeans");
      for (int c = 0; c < k; ++c) {
        if (!usable) {
          out.push_back(nan);
          continue;
        }
        const int e = matching()[static_cast<std::size_t>(c)];
        if (e < 0) {
          out.push_back(nan);
          continue;
        }
        out.push_back(mu ? mu_error(truth_model->mu[c], rep.model.mu[e])
                         : sigma_error(truth_model->sigma[c], rep.model.sigma[e]));
      }
    }
  }
  return out;
}

inline FitReport run_algorithm(const AlgorithmSpec& algo, const Matrix& x, int k, const ExperimentConfig& cfg,
                               std::uint64_t init_seed) {
  FitConfig fc = cfg.fit;
  fc.init = KMeansInit{init_seed, cfg.kmeans_restarts, cfg.isolation};
  switch (algo.kind) {
    case AlgorithmSpec::Kind::Fem: {
      fc.version = algo.version;
      auto rep = fit(x, k, fc);
      rep.algorithm = algo.name();
      return rep;
    }
    case AlgorithmSpec::Kind::Gmm:
      return gmm_em(x, k, fc);
    case AlgorithmSpec::Kind::KMeans:
      break;
  }
  return kmeans_report(x, k, init_seed, cfg.kmeans_restarts, cfg.isolation);
}

/// One repetition: all algorithms on the same data and initialization seed.
inline std::vector<RunRecord> run_repetition(const ExperimentConfig& cfg, const DataSet* fixed, int r,
                                             std::size_t ncols) {
  const std::uint64_t seed = cfg.base_seed ^ static_cast<std::uint64_t>(r);
  std::vector<RunRecord> out;
  auto fail_all = [&](const std::string& what) {
    for (const auto& a : cfg.algorithms) {
      RunRecord rec;
      rec.rep = r;
      rec.seed = seed;
      rec.algorithm = a.name();
      rec.error = what;
      rec.values.assign(ncols, std::numeric_limits<double>::quiet_NaN());
      out.push_back(std::move(rec));
    }
  };

  LabeledSample sample;
  const Matrix* x = nullptr;
  const std::vector<int>* truth = nullptr;
  const MixtureModel* truth_model = nullptr;
  if (fixed) {
    x = &fixed->x;
    truth = &fixed->labels;
  } else {
    try {
      std::mt19937_64 rng(seed);
      sample = generate_setup(std::get<SetupSpec>(cfg.source), rng);
    } catch (const std::exception& e) {
      fail_all(std::string("data generation: ") + e.what());
      return out;
    }
    x = &sample.data;
    truth = &sample.labels;
    truth_model = &sample.truth;
  }

  const std::uint64_t init_seed = mix_seed(seed);
  for (const auto& algo : cfg.algorithms) {
    RunRecord rec;
    rec.rep = r;
    rec.seed = seed;
    rec.algorithm = algo.name();
    const auto start = std::chrono::steady_clock::now();
    try {
      const auto rep = run_algorithm(algo, *x, cfg.clusters(), cfg, init_seed);
      rec.values = score(cfg, rep, *truth, truth_model);
      rec.em_iters = rep.em_iters;
      rec.converged = rep.converged;
      rec.loglik_trace = rep.loglik_trace;
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.error = e.what();
      rec.values.assign(ncols, std::numeric_limits<double>::quiet_NaN());
    }
    rec.runtime_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace detail

/// Per-algorithm aggregates over successful runs, in config order.
inline std::vector<AlgorithmSummary> summarize(const std::vector<std::string>& algorithms, std::size_t ncols,
                                               const std::vector<RunRecord>& records) {
  std::vector<AlgorithmSummary> out;
  for (const auto& name : algorithms) {
    AlgorithmSummary s;
    s.algorithm = name;
    std::vector<std::vector<double>> cols(ncols);
    std::vector<double> iters, times;
    for (const auto& rec : records) {
      if (rec.algorithm != name) continue;
      ++s.runs;
      if (!rec.ok) {
        ++s.failures;
        continue;
      }
      for (std::size_t j = 0; j < ncols; ++j) cols[j].push_back(rec.values[j]);
      iters.push_back(rec.em_iters);
      times.push_back(rec.runtime_ms);
    }
    for (const auto& c : cols) s.columns.push_back(aggregate(c));
    s.em_iters = aggregate(iters);
    s.runtime_ms = aggregate(times);
    out.push_back(std::move(s));
  }
  return out;
}

/// Runs every repetition (up to cfg.jobs concurrently) and aggregates in fixed order.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentResult res;
  res.columns = detail::metric_columns(cfg);

  std::optional<DataSet> fixed;
  if (!cfg.generated()) {
    fixed = load_csv(std::get<std::string>(cfg.source), cfg.csv_labels);
    if (!cfg.csv_labels) fixed->labels.assign(static_cast<std::size_t>(fixed->x.rows()), 0);
  }

  std::vector<std::vector<RunRecord>> slots(static_cast<std::size_t>(cfg.nrep));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int r = next++; r < cfg.nrep; r = next++) {
      slots[static_cast<std::size_t>(r)] =
          detail::run_repetition(cfg, fixed ? &*fixed : nullptr, r, res.columns.size());
    }
  };
  const int threads = std::min(cfg.jobs, cfg.nrep);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& s : slots)
    for (auto& rec : s) res.records.push_back(std::move(rec));

  std::vector<std::string> names;
  for (const auto& a : cfg.algorithms) names.push_back(a.name());
  res.summary = summarize(names, res.columns.size(), res.records);
  return res;
}

// ---------------------------------------------------------------------------
// Result files

namespace detail {

inline std::string csv_value(double v) { return std::isfinite(v) ? format_double(v) : std::string("nan"); }

inline std::string csv_text(std::string s) {
  for (auto& ch : s)
    if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = ' ';
  return s;
}

inline nlohmann::json aggregate_json(const Aggregate& a) {
  nlohmann::json j;
  j["count"] = a.count;
  if (a.count > 0) {
    j["mean"] = a.mean;
    j["std"] = a.std;
    j["median"] = a.median;
  } else {
    j["mean"] = nullptr;
    j["std"] = nullptr;
    j["median"] = nullptr;
  }
  return j;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  return out;
}

}  // namespace detail

/// records.csv: rep,seed,algorithm,status,em_iters,converged,<metrics...>,error
inline void write_records(std::ostream& out, const ExperimentResult& res) {
  out << "rep,seed,algorithm,status,em_iters,converged";
  for (const auto& c : res.columns) out << ',' << c;
  out << ",error\n";
  for (const auto& r : res.records) {
    out << r.rep << ',' << r.seed << ',' << r.algorithm << ',' << (r.ok ? "ok" : "failed") << ',' << r.em_iters << ','
        << (r.converged ? 1 : 0);
    for (double v : r.values) out << ',' << detail::csv_value(v);
    out << ',' << detail::csv_text(r.error) << '\n';
  }
}

/// Reads a records file back; values are exact because doubles are written shortest-round-trip.
inline ExperimentResult read_records(std::istream& in) {
  ExperimentResult res;
  std::string line;
  if (!std::getline(in, line)) throw Error("empty records file");
  const auto head = split(line, ',');
  require(head.size() >= 7, "records header too short");
  for (std::size_t j = 6; j + 1 < head.size(); ++j) res.columns.emplace_back(head[j]);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != head.size()) throw Error("row " + std::to_string(lineno) + ": wrong field count");
    RunRecord r;
    r.rep = static_cast<int>(parse_int(cells[0]).value_or(0));
    r.seed = static_cast<std::uint64_t>(std::stoull(std::string(cells[1])));
    r.algorithm = std::string(cells[2]);
    r.ok = cells[3] == "ok";
    r.em_iters = static_cast<int>(parse_int(cells[4]).value_or(0));
    r.converged = cells[5] == "1";
    for (std::size_t j = 6; j + 1 < cells.size(); ++j) {
      const auto v = parse_double(cells[j]);
      r.values.push_back(v ? *v : std::numeric_limits<double>::quiet_NaN());
    }
    r.error = std::string(cells.back());
    res.records.push_back(std::move(r));
  }
  return res;
}

inline nlohmann::json summary_json(const ExperimentResult& res) {
  nlohmann::json j;
  j["schema"] = 1;
  j["columns"] = res.columns;
  auto algos = nlohmann::json::array();
  for (const auto& s : res.summary) {
    nlohmann::json a;
    a["algorithm"] = s.algorithm;
    a["runs"] = s.runs;
    a["failures"] = s.failures;
    nlohmann::json metrics = nlohmann::json::object();
    for (std::size_t c = 0; c < res.columns.size(); ++c) metrics[res.columns[c]] = detail::aggregate_json(s.columns[c]);
    a["metrics"] = std::move(metrics);
    a["em_iters"] = detail::aggregate_json(s.em_iters);
    a["runtime_ms"] = detail::aggregate_json(s.runtime_ms);
    algos.push_back(std::move(a));
  }
  j["algorithms"] = std::move(algos);
  return j;
}

/// Writes <prefix>_records.csv, <prefix>_summary.json, <prefix>_loglik.csv and <prefix>_timing.csv.
inline void emit_results(const ExperimentResult& res, const std::string& prefix) {
  require(!prefix.empty(), "output prefix is empty");
  {
    auto out = detail::open_out(prefix + "_records.csv");
    write_records(out, res);
  }
  {
    auto out = detail::open_out(prefix + "_summary.json");
    out << summary_json(res).dump(2) << '\n';
  }
  {
    auto out = detail::open_out(prefix + "_loglik.csv");
    out << "rep,algorithm,iteration,value\n";
    for (const auto& r : res.records)
      for (std::size_t t = 0; t < r.loglik_trace.size(); ++t)
        out << r.rep << ',' << r.algorithm << ',' << t << ',' << detail::csv_value(r.loglik_trace[t]) << '\n';
  }
  {
    auto out = detail::open_out(prefix + "_timing.csv");
    out << "rep,algorithm,runtime_ms\n";
    for (const auto& r : res.records) out << r.rep << ',' << r.algorithm << ',' << format_double(r.runtime_ms) << '\n';
  }
}

}  // namespace flexem
