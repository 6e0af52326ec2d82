#pragma once

// Flexible EM: distribution-free E-step, robust fixed-point M-step,
// initialization, likelihood monitoring and the Student-t E-step variant.

#include "flexem/elliptic.hpp"
#include "flexem/estimators.hpp"
#include "flexem/format.hpp"
#include "flexem/kmeans.hpp"
#include "flexem/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace flexem {

namespace detail {

/// log L0_ik = -1/2 log|Sigma_k| - m/2 log q_ik, with q floored.
inline Matrix log_profile_terms(const Matrix& x, const MixtureModel& model, double tau_floor) {
  const auto m = static_cast<double>(x.cols());
  Matrix out(x.rows(), model.k());
  for (int c = 0; c < model.k(); ++c) {
    const auto llt = spd_factor(model.sigma[c]);
    const Vector q = quadratic_forms(x, model.mu[c], llt).cwiseMax(tau_floor);
    out.col(c) = (-0.5 * log_det(llt)) - 0.5 * m * q.array().log();
  }
  return out;
}

/// Row-wise softmax of log weights.
inline Responsibilities normalize_log_rows(const Matrix& logw) {
  Responsibilities p(logw.rows(), logw.cols());
  for (Eigen::Index i = 0; i < logw.rows(); ++i) {
    const double top = logw.row(i).maxCoeff();
    p.row(i) = (logw.row(i).array() - top).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double top = v.maxCoeff();
  if (!std::isfinite(top)) return top;
  return top + std::log((v.array() - top).exp().sum());
}

inline void check_model(const MixtureModel& model, Eigen::Index m) {
  require(model.k() >= 1, "model has no clusters");
  require(model.pi.size() == model.k() && static_cast<int>(model.sigma.size()) == model.k(),
          "model component counts disagree");
  for (int c = 0; c < model.k(); ++c) {
    require(model.mu[c].size() == m && model.sigma[c].rows() == m && model.sigma[c].cols() == m,
            "model dimension differs from data");
    require(model.pi(c) > 0.0, "mixing proportions must be positive");
  }
}

}  // namespace detail

/// Distribution-free responsibilities:
/// p_ik ∝ pi_k q_ik^{-m/2} |Sigma_k|^{-1/2}, evaluated in log space.
inline Responsibilities e_step(const Matrix& x, const MixtureModel& model, double tau_floor = 1e-12) {
  detail::check_model(model, x.cols());
  Matrix logw = detail::log_profile_terms(x, model, tau_floor);
  logw.rowwise() += model.pi.array().log().matrix().transpose();
  return detail::normalize_log_rows(logw);
}

enum class StudentEStep { Exact, Approximate };

/// log sup_t t^{m/2} g_k(t) for the Student-t generator with its Gamma normalization.
inline double student_log_sup(double nu, int m) {
  const double md = m;
  return std::lgamma(0.5 * (nu + md)) - std::lgamma(0.5 * nu) - 0.5 * md * std::log(nu) + 0.5 * md * std::log(md) -
         0.5 * (nu + md) * std::log1p(md / nu);
}

/// Responsibilities for clusters with Student-t generators of known nu_k.
/// Exact: Bayes rule with the sup term; Approximate: sqrt(c_k / (1 + c_k)), c_k = nu_k / m.
inline Responsibilities e_step_student(const Matrix& x, const MixtureModel& model, const Vector& nu,
                                       StudentEStep mode = StudentEStep::Exact, double tau_floor = 1e-12) {
  detail::check_model(model, x.cols());
  require(nu.size() == model.k(), "need one nu per cluster");
  const int m = static_cast<int>(x.cols());
  Matrix logw = detail::log_profile_terms(x, model, tau_floor);
  for (int c = 0; c < model.k(); ++c) {
    require(nu(c) > 0.0, "nu must be positive");
    double extra = 0.0;
    if (mode == StudentEStep::Exact) {
      extra = student_log_sup(nu(c), m);
    } else {
      const double ratio = nu(c) / m;
      extra = 0.5 * std::log(ratio / (1.0 + ratio));
    }
    logw.col(c).array() += std::log(model.pi(c)) + extra;
  }
  return detail::normalize_log_rows(logw);
}

/// Observed mixture log-likelihood with the supplied scales plugged in.
/// Only Gaussian and Student-t generators have closed-form normalizations.
inline double log_likelihood(const Matrix& x, const MixtureModel& model, std::span<const DensityGenerator> gens,
                             const ScaleEstimates& tau) {
  detail::check_model(model, x.cols());
  require(static_cast<int>(gens.size()) == model.k(), "need one generator per cluster");
  require(tau.rows() == x.rows() && tau.cols() == model.k(), "scale matrix has wrong shape");
  const double m = static_cast<double>(x.cols());
  Matrix logf(x.rows(), model.k());
  for (int c = 0; c < model.k(); ++c) {
    const auto llt = spd_factor(model.sigma[c]);
    const Vector q = quadratic_forms(x, model.mu[c], llt);
    const double half_logdet = 0.5 * log_det(llt);
    const auto& g = gens[static_cast<std::size_t>(c)];
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double t = tau(i, c);
      double v = 0.0;
      if (g.is_gaussian()) {
        v = -0.5 * m * std::log(2.0 * std::numbers::pi * t) - half_logdet - 0.5 * q(i) / t;
      } else if (g.is_student()) {
        const double nu = std::get<StudentT>(g.kind()).nu;
        v = std::lgamma(0.5 * (nu + m)) - std::lgamma(0.5 * nu) - half_logdet -
            0.5 * m * std::log(nu * std::numbers::pi * t) - 0.5 * (nu + m) * std::log1p(q(i) / (t * nu));
      } else {
        throw Error("log-likelihood unsupported for generator " + g.str());
      }
      logf(i, c) = std::log(model.pi(c)) + v;
    }
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) total += detail::log_sum_exp(logf.row(i));
  return total;
}

// ---------------------------------------------------------------------------
// Driver

struct KMeansInit {
  std::uint64_t seed = 0;
  int restarts = 10;
  IsolationRule isolation{};
};
struct GivenInit {
  MixtureModel model;
};

struct MonitorOff {};
struct MonitorGaussian {};
struct MonitorStudent {
  Vector nu;
};
using LikelihoodMonitor = std::variant<MonitorOff, MonitorGaussian, MonitorStudent>;

struct DistributionFreeEStep {};
struct StudentBayesEStep {
  Vector nu;
  StudentEStep mode = StudentEStep::Exact;
};
using EStepRule = std::variant<DistributionFreeEStep, StudentBayesEStep>;

struct FitConfig {
  int version = 1;
  int em_max_iters = 200;
  double em_tol = 1e-6;
  FixedPointConfig fixed_point{};
  std::variant<KMeansInit, GivenInit> init = KMeansInit{};
  LikelihoodMonitor likelihood_monitor = MonitorOff{};
  EStepRule e_step = DistributionFreeEStep{};
  /// Throw when a monitored iteration loses likelihood beyond the slack.
  bool assert_monotone = true;
  double monotone_slack = 1e-8;
  /// Recompute tau at every iteration (stored in tau_trace) instead of only at exit.
  bool track_tau = false;
  int max_reseeds = 3;
};

struct FitReport {
  std::string algorithm = "fem";
  std::vector<int> labels;
  MixtureModel model;
  Responsibilities responsibilities;
  ScaleEstimates tau;
  std::vector<double> loglik_trace;
  int em_iters = 0;
  bool converged = false;
  /// Fixed-point iterations per EM iteration and cluster.
  std::vector<std::vector<int>> per_cluster_fp_iters;
  std::vector<std::vector<bool>> per_cluster_fp_converged;
  std::vector<ScaleEstimates> tau_trace;
  int reseeds = 0;
  int monotonicity_violations = 0;
  std::vector<std::string> warnings;
};

struct MStepResult {
  MixtureModel model;
  std::vector<int> fp_iters;
  std::vector<bool> fp_converged;
};

/// pi from column means; each (mu_k, Sigma_k) from the fixed point seeded at `prev`.
inline MStepResult m_step(const Matrix& x, const Responsibilities& p, const MixtureModel& prev, const FitConfig& cfg) {
  require(p.rows() == x.rows() && p.cols() == prev.k(), "responsibilities have wrong shape");
  MStepResult out;
  out.model.pi = update_pi(p);
  FixedPointConfig fp = cfg.fixed_point;
  fp.version = cfg.version;
  for (int c = 0; c < prev.k(); ++c) {
    try {
      auto r = fixed_point_mu_sigma(x, p.col(c), prev.mu[c], prev.sigma[c], fp);
      out.model.mu.push_back(std::move(r.mu));
      out.model.sigma.push_back(std::move(r.sigma));
      out.fp_iters.push_back(r.iters);
      out.fp_converged.push_back(r.converged);
    } catch (const DegenerateCluster&) {
      throw DegenerateCluster(c);
    } catch (const Error& e) {
      if (p.col(c).sum() > 0.0) throw;
      throw DegenerateCluster(c);
    }
  }
  return out;
}

namespace detail {

inline double relative_change(const MixtureModel& a, const MixtureModel& b) {
  double num = (a.pi - b.pi).squaredNorm();
  double den = b.pi.squaredNorm();
  for (int c = 0; c < a.k(); ++c) {
    num += (a.mu[c] - b.mu[c]).squaredNorm() + (a.sigma[c] - b.sigma[c]).squaredNorm();
    den += b.mu[c].squaredNorm() + b.sigma[c].squaredNorm();
  }
  return std::sqrt(num / std::max(den, 1e-300));
}

inline std::vector<DensityGenerator> monitor_generators(const LikelihoodMonitor& mon, int k) {
  if (const auto* st = std::get_if<MonitorStudent>(&mon)) {
    require(st->nu.size() == k, "student monitor needs one nu per cluster");
    std::vector<DensityGenerator> g;
    for (int c = 0; c < k; ++c) g.push_back(DensityGenerator::student(st->nu(c)));
    return g;
  }
  return std::vector<DensityGenerator>(static_cast<std::size_t>(k), DensityGenerator::gaussian());
}

/// True when the E-step is the exact posterior of the monitored likelihood,
/// which is what makes the monitored value non-decreasing.
inline bool monitor_matches_estep(const LikelihoodMonitor& mon, const EStepRule& rule) {
  if (std::holds_alternative<MonitorOff>(mon)) return false;
  const auto* st = std::get_if<MonitorStudent>(&mon);
  if (std::holds_alternative<DistributionFreeEStep>(rule)) {
    return !st || (st->nu.array() == st->nu(0)).all();
  }
  const auto& bayes = std::get<StudentBayesEStep>(rule);
  return st && bayes.mode == StudentEStep::Exact && bayes.nu.size() == st->nu.size() &&
         (bayes.nu.array() == st->nu.array()).all();
}

inline MixtureModel kmeans_init(const Matrix& x, int k, const KMeansInit& init) {
  const auto km = kmeans(x, k, init.seed, init.restarts, init.isolation);
  MixtureModel model;
  model.pi = Vector::Zero(k);
  for (int l : km.labels) model.pi(l) += 1.0;
  model.pi /= static_cast<double>(x.rows());
  const auto m = x.cols();
  for (int c = 0; c < k; ++c) {
    model.mu.push_back(km.centers.row(c).transpose());
    model.sigma.push_back(Matrix::Identity(m, m));
    model.pi(c) = std::max(model.pi(c), 1.0 / static_cast<double>(x.rows()));
  }
  model.pi /= model.pi.sum();
  return model;
}

/// Moves cluster `c` onto the worst-explained point and resets its scatter.
inline void reseed_cluster(const Matrix& x, const Responsibilities& p, MixtureModel& model, int c) {
  Eigen::Index worst = 0;
  double lowest = 2.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double top = p.row(i).maxCoeff();
    if (top < lowest) {
      lowest = top;
      worst = i;
    }
  }
  model.mu[c] = x.row(worst).transpose();
  model.sigma[c] = Matrix::Identity(x.cols(), x.cols());
  model.pi(c) = std::max(model.pi(c), 1.0 / static_cast<double>(x.rows()));
  model.pi /= model.pi.sum();
}

}  // namespace detail

/// Responsibilities under the configured E-step rule.
inline Responsibilities fem_e_step(const Matrix& x, const MixtureModel& model, const FitConfig& cfg) {
  if (const auto* b = std::get_if<StudentBayesEStep>(&cfg.e_step))
    return e_step_student(x, model, b->nu, b->mode, cfg.fixed_point.tau_floor);
  return e_step(x, model, cfg.fixed_point.tau_floor);
}

/// Runs F-EM with K clusters.
inline FitReport fit(const Matrix& x, int k, const FitConfig& cfg = {}) {
  require(k >= 1, "K must be >= 1");
  require(x.rows() >= k, "n < K");
  require(cfg.version >= 1 && cfg.version <= 4, "version must be in 1..4");
  require(cfg.em_max_iters >= 1 && cfg.em_tol > 0.0, "invalid EM stopping rule");
  require(x.allFinite(), "data contains non-finite values");
  const auto n = x.rows();
  const auto m = x.cols();

  FitReport rep;
  if (n <= m * (2 * m - 1)) {
    rep.warnings.push_back("n <= m(2m-1): scale estimates may be unreliable");
  }

  MixtureModel model;
  if (const auto* given = std::get_if<GivenInit>(&cfg.init)) {
    model = given->model;
    detail::check_model(model, m);
    require(model.k() == k, "initial model has wrong K");
  } else {
    model = detail::kmeans_init(x, k, std::get<KMeansInit>(cfg.init));
  }

  const bool monitored = !std::holds_alternative<MonitorOff>(cfg.likelihood_monitor);
  const auto gens = detail::monitor_generators(cfg.likelihood_monitor, k);
  const bool check_monotone = detail::monitor_matches_estep(cfg.likelihood_monitor, cfg.e_step);
  auto monitor = [&](const MixtureModel& mdl) {
    return log_likelihood(x, mdl, gens, estimate_tau(x, mdl, std::span<const DensityGenerator>(gens),
                                                     cfg.fixed_point.tau_floor));
  };
  if (monitored) rep.loglik_trace.push_back(monitor(model));

  for (int iter = 1; iter <= cfg.em_max_iters; ++iter) {
    Responsibilities p = fem_e_step(x, model, cfg);
    MStepResult step;
    bool reseeded = false;
    while (true) {
      try {
        step = m_step(x, p, model, cfg);
        break;
      } catch (const DegenerateCluster& e) {
        if (rep.reseeds >= cfg.max_reseeds) {
          throw Error("degenerate cluster " + std::to_string(e.cluster()) + " at EM iteration " +
                      std::to_string(iter) + " after " + std::to_string(rep.reseeds) + " reseeds");
        }
        ++rep.reseeds;
        reseeded = true;
        detail::reseed_cluster(x, p, model, std::max(e.cluster(), 0));
        p = fem_e_step(x, model, cfg);
      }
    }
    const double change = detail::relative_change(step.model, model);
    model = std::move(step.model);
    rep.per_cluster_fp_iters.push_back(std::move(step.fp_iters));
    rep.per_cluster_fp_converged.push_back(step.fp_converged);
    rep.em_iters = iter;
    if (cfg.track_tau) {
      rep.tau_trace.push_back(estimate_tau(x, model, std::span<const DensityGenerator>(gens), cfg.fixed_point.tau_floor));
    }

    if (monitored) {
      const double ll = monitor(model);
      const double prev = rep.loglik_trace.back();
      rep.loglik_trace.push_back(ll);
      const bool all_converged =
          std::all_of(step.fp_converged.begin(), step.fp_converged.end(), [](bool b) { return b; });
      if (check_monotone && !reseeded && ll < prev - cfg.monotone_slack * std::abs(prev)) {
        ++rep.monotonicity_violations;
        if (cfg.assert_monotone && all_converged) {
          throw Error("log-likelihood decreased at EM iteration " + std::to_string(iter) + ": " +
                      format_double(prev) + " -> " + format_double(ll));
        }
      }
    }
    if (change < cfg.em_tol) {
      rep.converged = true;
      break;
    }
  }

  rep.responsibilities = fem_e_step(x, model, cfg);
  rep.labels = argmax_rows(rep.responsibilities);
  rep.tau = estimate_tau(x, model, std::span<const DensityGenerator>(gens), cfg.fixed_point.tau_floor);
  rep.model = std::move(model);
  return rep;
}

inline FitReport fit(const DataSet& data, int k, const FitConfig& cfg = {}) { return fit(data.x, k, cfg); }

}  // namespace flexem
