// flexem command-line front end: generate, fit, bench, metrics.
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "flexem/flexem.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace flexem;

int cmd_generate(std::optional<int> setup, const std::string& config, const std::string& out, std::uint64_t seed,
                 const std::string& truth_out) {
  SetupSpec spec;
  if (setup) {
    spec = setup_spec(*setup);
  } else {
    spec = parse_setup(config::parse_file(config));
  }
  std::mt19937_64 rng(seed);
  const auto sample = generate_setup(spec, rng);
  write_csv(out, sample.data, sample.labels);
  if (!truth_out.empty()) {
    std::ofstream t(truth_out);
    if (!t) throw Error("cannot write '" + truth_out + "'");
    nlohmann::json j;
    j["schema"] = 1;
    j["model"] = model_json(sample.truth);
    j["noise_rows"] = sample.noise_rows;
    t << j.dump(2) << '\n';
  }
  std::cout << "wrote " << sample.data.rows() << " rows x " << sample.data.cols() << " columns to " << out << '\n';
  return 0;
}

struct FitArgs {
  std::string in;
  bool labels = false;
  int k = 0;
  std::string algo = "fem";
  int version = 1;
  std::uint64_t seed = 0;
  int restarts = 10;
  IsolationRule isolation{};
  std::string monitor = "off";
  std::string out;
};

int cmd_fit(const FitArgs& a) {
  const auto data = load_csv(a.in, a.labels);
  FitConfig cfg;
  cfg.version = a.version;
  cfg.init = KMeansInit{a.seed, a.restarts, a.isolation};
  cfg.assert_monotone = false;
  if (a.monitor == "gaussian") {
    cfg.likelihood_monitor = MonitorGaussian{};
  } else if (a.monitor.rfind("student:", 0) == 0) {
    const auto nu = parse_double(std::string_view(a.monitor).substr(8));
    if (!nu || *nu <= 0.0) throw Error("--monitor student needs a positive nu");
    cfg.likelihood_monitor = MonitorStudent{Vector::Constant(a.k, *nu)};
  } else if (a.monitor != "off") {
    throw Error("--monitor must be off, gaussian or student:nu");
  }

  FitReport rep;
  if (a.algo == "fem") {
    rep = fit(data.x, a.k, cfg);
    rep.algorithm = "fem_v" + std::to_string(a.version);
  } else if (a.algo == "gmm") {
    rep = gmm_em(data.x, a.k, cfg);
  } else {
    rep = kmeans_report(data.x, a.k, a.seed, a.restarts, a.isolation);
  }
  auto j = report_json(rep);
  if (data.has_labels()) {
    j["metrics"] = {{"ari", ari(rep.labels, data.labels)},
                    {"ami", ami(rep.labels, data.labels)},
                    {"accuracy", accuracy(rep.labels, data.labels)}};
  }
  if (a.out.empty() || a.out == "-") {
    std::cout << j.dump(2) << '\n';
  } else {
    std::ofstream o(a.out);
    if (!o) throw Error("cannot write '" + a.out + "'");
    o << j.dump(2) << '\n';
    std::cout << rep.algorithm << ": " << rep.em_iters << " iterations, " << (rep.converged ? "converged" : "not converged")
              << ", report written to " << a.out << '\n';
  }
  return 0;
}

int cmd_bench(const std::string& path, std::optional<int> jobs, const std::string& out) {
  auto cfg = parse_experiment_file(path);
  if (jobs) cfg.jobs = *jobs;
  if (!out.empty()) cfg.output = out;
  if (cfg.output.empty()) throw Error("no output prefix: set 'output' in the config or pass --out");
  const auto res = run_experiment(cfg);
  emit_results(res, cfg.output);
  for (const auto& s : res.summary) {
    std::cout << s.algorithm << ": " << s.runs - s.failures << "/" << s.runs << " runs ok";
    for (std::size_t c = 0; c < res.columns.size(); ++c) {
      if (s.columns[c].count == 0) continue;
      std::cout << "  " << res.columns[c] << " mean=" << format_double(s.columns[c].mean)
                << " median=" << format_double(s.columns[c].median);
    }
    std::cout << '\n';
  }
  std::cout << "results written with prefix " << cfg.output << '\n';
  return 0;
}

int cmd_metrics(const std::string& pred_path, const std::string& truth_path, bool exclude_noise) {
  const auto pred = load_labels(pred_path);
  const auto truth = load_labels(truth_path);
  if (pred.size() != truth.size()) {
    throw Error("label files differ in length: " + std::to_string(pred.size()) + " vs " + std::to_string(truth.size()));
  }
  nlohmann::json j;
  j["n"] = pred.size();
  j["exclude_noise"] = exclude_noise;
  j["ari"] = ari(pred, truth, exclude_noise);
  j["ami"] = ami(pred, truth, exclude_noise);
  j["accuracy"] = accuracy(pred, truth, exclude_noise);
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust clustering with flexible EM"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "Draw a labelled sample from a benchmark setup");
  std::optional<int> setup;
  std::string setup_config, gen_out, truth_out;
  std::uint64_t gen_seed = 0;
  auto* setup_opt = gen->add_option("--setup", setup, "Benchmark setup 1..5")->check(CLI::Range(1, 5));
  gen->add_option("--config", setup_config, "Setup config file")->excludes(setup_opt)->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "Output CSV")->required();
  gen->add_option("--seed", gen_seed, "RNG seed");
  gen->add_option("--truth", truth_out, "Write the true parameters as JSON");

  auto* fit_cmd = app.add_subcommand("fit", "Cluster a CSV file");
  FitArgs fa;
  fit_cmd->add_option("--in", fa.in, "Input CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_flag("--labels", fa.labels, "Last column holds ground-truth labels");
  fit_cmd->add_option("--k", fa.k, "Number of clusters")->required()->check(CLI::PositiveNumber);
  fit_cmd->add_option("--algo", fa.algo, "fem, gmm or kmeans")->check(CLI::IsMember({"fem", "gmm", "kmeans"}));
  fit_cmd->add_option("--version", fa.version, "F-EM fixed-point version")->check(CLI::Range(1, 4));
  fit_cmd->add_option("--seed", fa.seed, "Initialization seed");
  fit_cmd->add_option("--restarts", fa.restarts, "k-means restarts")->check(CLI::PositiveNumber);
  fit_cmd->add_option("--isolated-fraction", fa.isolation.max_fraction,
                      "k-means clusters below this share of points are rerun without")
      ->check(CLI::Range(0.0, 0.99));
  fit_cmd->add_option("--isolation-rounds", fa.isolation.max_rounds, "Maximum k-means exclusion reruns")
      ->check(CLI::NonNegativeNumber);
  fit_cmd->add_option("--monitor", fa.monitor, "Likelihood monitor: off, gaussian or student:nu");
  fit_cmd->add_option("--out", fa.out, "Report JSON (default stdout)");

  auto* bench = app.add_subcommand("bench", "Run a configured experiment");
  std::string bench_config, bench_out;
  std::optional<int> jobs;
  bench->add_option("--config", bench_config, "Experiment config")->required()->check(CLI::ExistingFile);
  bench->add_option("--jobs", jobs, "Concurrent repetitions")->check(CLI::PositiveNumber);
  bench->add_option("--out", bench_out, "Output prefix (overrides the config)");

  auto* met = app.add_subcommand("metrics", "Compare two label columns");
  std::string pred, truth;
  bool exclude_noise = false;
  met->add_option("--pred", pred, "Predicted labels CSV")->required()->check(CLI::ExistingFile);
  met->add_option("--truth", truth, "True labels CSV")->required()->check(CLI::ExistingFile);
  met->add_flag("--exclude-noise", exclude_noise, "Drop rows labelled -1");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      if (!setup && setup_config.empty()) {
        std::cerr << "generate: one of --setup or --config is required\n";
        return 1;
      }
      return cmd_generate(setup, setup_config, gen_out, gen_seed, truth_out);
    }
    if (*fit_cmd) return cmd_fit(fa);
    if (*bench) return cmd_bench(bench_config, jobs, bench_out);
    if (*met) return cmd_metrics(pred, truth, exclude_noise);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
