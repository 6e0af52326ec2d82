#pragma once

// Comparison algorithms: k-means (see kmeans.hpp) and the classical
// full-covariance Gaussian-mixture EM.

#include "flexem/fem.hpp"
#include "flexem/kmeans.hpp"

#include <cmath>
#include <numbers>

namespace flexem {

namespace detail {

/// Cholesky of a covariance, adding 1e-9 * trace/m * I when it is near-singular.
inline Eigen::LLT<Matrix> regularized_factor(Matrix& cov) {
  const auto m = cov.rows();
  Eigen::LLT<Matrix> llt(cov);
  const double scale = cov.trace() / static_cast<double>(m);
  const bool ok = llt.info() == Eigen::Success && scale > 0.0 &&
                  llt.matrixLLT().diagonal().minCoeff() > 1e-7 * std::sqrt(scale);
  if (!ok) {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw DegenerateCluster();
    cov += 1e-9 * scale * Matrix::Identity(m, m);
    llt.compute(cov);
    if (llt.info() != Eigen::Success) throw DegenerateCluster();
  }
  return llt;
}

/// log pi_k + log N(x_i | mu_k, Sigma_k) for every row and cluster.
inline Matrix gaussian_log_joint(const Matrix& x, MixtureModel& model) {
  const double m = static_cast<double>(x.cols());
  Matrix out(x.rows(), model.k());
  for (int c = 0; c < model.k(); ++c) {
    const auto llt = regularized_factor(model.sigma[c]);
    const Vector q = quadratic_forms(x, model.mu[c], llt);
    out.col(c) = (std::log(model.pi(c)) - 0.5 * m * std::log(2.0 * std::numbers::pi) - 0.5 * log_det(llt)) -
                 0.5 * q.array();
  }
  return out;
}

}  // namespace detail

/// Gaussian-mixture EM with full covariances. Shares the F-EM initialization and
/// stopping rule; always records the observed log-likelihood.
inline FitReport gmm_em(const Matrix& x, int k, const FitConfig& cfg = {}) {
  require(k >= 1, "K must be >= 1");
  require(x.rows() >= k, "n < K");
  require(x.allFinite(), "data contains non-finite values");
  const auto n = x.rows();
  const auto m = x.cols();

  FitReport rep;
  rep.algorithm = "gmm";
  MixtureModel model;
  if (const auto* given = std::get_if<GivenInit>(&cfg.init)) {
    model = given->model;
    detail::check_model(model, m);
  } else {
    model = detail::kmeans_init(x, k, std::get<KMeansInit>(cfg.init));
  }

  auto posterior = [&](MixtureModel& mdl, double& loglik) {
    const Matrix logj = detail::gaussian_log_joint(x, mdl);
    loglik = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) loglik += detail::log_sum_exp(logj.row(i));
    return detail::normalize_log_rows(logj);
  };

  double ll = 0.0;
  Responsibilities p = posterior(model, ll);
  rep.loglik_trace.push_back(ll);
  for (int iter = 1; iter <= cfg.em_max_iters; ++iter) {
    MixtureModel next;
    next.pi = update_pi(p);
    bool reseeded = false;
    for (int c = 0; c < k; ++c) {
      const double weight = p.col(c).sum();
      if (!(weight > 0.0)) {
        if (rep.reseeds >= cfg.max_reseeds) throw Error("degenerate cluster " + std::to_string(c));
        ++rep.reseeds;
        reseeded = true;
        break;
      }
      const Vector w = p.col(c) / weight;
      Vector mu = x.transpose() * w;
      const Matrix d = x.rowwise() - mu.transpose();
      Matrix cov = symmetrized(d.transpose() * w.asDiagonal() * d);
      next.mu.push_back(std::move(mu));
      next.sigma.push_back(std::move(cov));
    }
    if (reseeded) {
      for (int c = 0; c < k; ++c)
        if (!(p.col(c).sum() > 0.0)) detail::reseed_cluster(x, p, model, c);
      p = posterior(model, ll);
      continue;
    }
    next.pi = next.pi.cwiseMax(1e-300);
    const double change = detail::relative_change(next, model);
    try {
      p = posterior(next, ll);
    } catch (const DegenerateCluster&) {
      throw Error("degenerate covariance at EM iteration " + std::to_string(iter));
    }
    model = std::move(next);
    rep.loglik_trace.push_back(ll);
    rep.em_iters = iter;
    if (change < cfg.em_tol) {
      rep.converged = true;
      break;
    }
  }
  rep.responsibilities = p;
  rep.labels = argmax_rows(p);
  rep.model = std::move(model);
  return rep;
}

inline FitReport gmm_em(const DataSet& data, int k, const FitConfig& cfg = {}) { return gmm_em(data.x, k, cfg); }

}  // namespace flexem
