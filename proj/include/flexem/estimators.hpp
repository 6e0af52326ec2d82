#pragma once

// Robust parameter estimation: nuisance scales, mixture proportions and the
// coupled location/scatter fixed point, plus a reference Tyler estimator.

#include "flexem/elliptic.hpp"
#include "flexem/types.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace flexem {

/// (x - mu)^T Sigma^{-1} (x - mu) with an explicit inverse.
inline double mahalanobis_sq(const Vector& x, const Vector& mu, const Matrix& sigma_inv) {
  require(x.size() == mu.size() && sigma_inv.rows() == x.size() && sigma_inv.cols() == x.size(),
          "dimension mismatch");
  const Vector d = x - mu;
  return std::max(0.0, d.dot(sigma_inv * d));
}

/// Cholesky factor of an SPD matrix; throws on failure.
inline Eigen::LLT<Matrix> spd_factor(const Matrix& sigma) {
  Eigen::LLT<Matrix> llt(sigma);
  if (llt.info() != Eigen::Success) throw Error("Sigma not SPD");
  return llt;
}

inline double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// Quadratic forms of every row of `x` around `mu` under the factored scatter.
inline Vector quadratic_forms(const Matrix& x, const Vector& mu, const Eigen::LLT<Matrix>& llt) {
  require(x.cols() == mu.size() && llt.rows() == mu.size(), "dimension mismatch");
  Matrix d = (x.rowwise() - mu.transpose()).transpose();
  llt.matrixL().solveInPlace(d);
  return d.colwise().squaredNorm().transpose();
}

/// tau_ik = quadratic form / a_ik, with a_ik = argsup t^{m/2} g_ik(t).
/// `a` holds one column of maxima per cluster (n x K) or one row (1 x K).
inline ScaleEstimates estimate_tau(const Matrix& x, const MixtureModel& model, const Matrix& a,
                                   double tau_floor = 1e-12) {
  const auto n = x.rows();
  const int k = model.k();
  require(a.cols() == k && (a.rows() == 1 || a.rows() == n), "argsup matrix has wrong shape");
  ScaleEstimates tau(n, k);
  for (int c = 0; c < k; ++c) {
    const Vector q = quadratic_forms(x, model.mu[c], spd_factor(model.sigma[c]));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double ai = a.rows() == 1 ? a(0, c) : a(i, c);
      tau(i, c) = std::max(q(i) / ai, tau_floor);
    }
  }
  return tau;
}

/// One generator per cluster.
inline ScaleEstimates estimate_tau(const Matrix& x, const MixtureModel& model,
                                   std::span<const DensityGenerator> gens, double tau_floor = 1e-12) {
  require(static_cast<int>(gens.size()) == model.k(), "need one generator per cluster");
  Matrix a(1, model.k());
  for (int c = 0; c < model.k(); ++c) a(0, c) = argsup_density(gens[c], static_cast<int>(x.cols()));
  return estimate_tau(x, model, a, tau_floor);
}

/// Per-(i, k) generators supplied by `gen_of(i, k)`.
template <class GenOf>
  requires std::is_invocable_r_v<DensityGenerator, GenOf, Eigen::Index, int>
ScaleEstimates estimate_tau(const Matrix& x, const MixtureModel& model, GenOf&& gen_of, double tau_floor = 1e-12) {
  const int m = static_cast<int>(x.cols());
  Matrix a(x.rows(), model.k());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (int c = 0; c < model.k(); ++c) a(i, c) = argsup_density(gen_of(i, c), m);
  return estimate_tau(x, model, a, tau_floor);
}

/// pi_k = column means of the responsibilities.
inline Vector update_pi(const Responsibilities& p) {
  require(p.rows() > 0, "empty responsibilities");
  return p.colwise().sum().transpose() / static_cast<double>(p.rows());
}

struct FixedPointConfig {
  /// 1: exponent-1 weights, Sigma centred on the fresh mu.
  /// 2: exponent-1 weights, Sigma centred on the previous mu.
  /// 3: square-root mu weights, Sigma centred on the previous mu.
  /// 4: square-root mu weights, Sigma centred on the fresh mu.
  int version = 1;
  int max_iters = 20;
  double tol = 1e-6;
  double tau_floor = 1e-12;
  /// When false mu stays at its seed (known-location scatter estimation).
  bool update_mu = true;

  void validate() const {
    require(version >= 1 && version <= 4, "version must be in 1..4");
    require(max_iters >= 1, "max_iters must be >= 1");
    require(tol > 0.0, "tol must be positive");
    require(tau_floor > 0.0, "tau_floor must be positive");
  }
};

struct FixedPointResult {
  Vector mu;
  Matrix sigma;
  int iters = 0;
  bool converged = false;
};

namespace detail {

/// Relative pivot below which a trace-m scatter is treated as singular.
inline constexpr double kRankTolerance = 1e-12;

inline Matrix checked_scatter(Matrix s, double m) {
  s = symmetrized(s);
  const double tr = s.trace();
  if (!(tr > 0.0) || !std::isfinite(tr)) throw DegenerateCluster();
  s *= m / tr;
  Eigen::LLT<Matrix> llt(s);
  if (llt.info() != Eigen::Success) throw DegenerateCluster();
  const double min_pivot = llt.matrixLLT().diagonal().minCoeff();
  if (min_pivot * min_pivot < kRankTolerance) throw DegenerateCluster();
  return s;
}

/// m * sum_i w_i d_i d_i^T / q_i over rows with positive weight.
inline Matrix weighted_scatter(const Matrix& x, const Vector& center, const Vector& weights, const Vector& q) {
  const auto m = static_cast<double>(x.cols());
  const Matrix d = x.rowwise() - center.transpose();
  const Vector c = (weights.array() / q.array()).matrix() * m;
  return d.transpose() * c.asDiagonal() * d;
}

}  // namespace detail

/// Solves the coupled location/scatter equations for one cluster with weights `p`.
///
/// mu  = sum_i p_i x_i / q_i^e  /  sum_i p_i / q_i^e       (e = 1, or 1/2 for versions 3-4)
/// Sigma = m sum_i w_i (x_i - mu)(x_i - mu)^T / q_i,       w_i = p_i / sum_l p_l
///
/// q_i are the quadratic forms under the current iterate, floored at tau_floor.
/// Sigma is symmetrized and rescaled to trace m after every update.
inline FixedPointResult fixed_point_mu_sigma(const Matrix& x, const Vector& p, const Vector& mu0,
                                             const Matrix& sigma0, const FixedPointConfig& cfg) {
  cfg.validate();
  const auto m = x.cols();
  require(p.size() == x.rows(), "weight vector length differs from n");
  require(mu0.size() == m && sigma0.rows() == m && sigma0.cols() == m, "dimension mismatch");
  const double total = p.sum();
  require(total > 0.0, "cluster weights sum to zero");

  // rows with zero weight never contribute
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) rows.push_back(i);
  Matrix xs(static_cast<Eigen::Index>(rows.size()), m);
  Vector ps(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    xs.row(static_cast<Eigen::Index>(r)) = x.row(rows[r]);
    ps(static_cast<Eigen::Index>(r)) = p(rows[r]);
  }
  const Vector w = ps / total;
  const bool sqrt_weights = cfg.version >= 3;
  const bool fresh_center = cfg.version == 1 || cfg.version == 4;

  FixedPointResult res{mu0, sigma0, 0, false};
  auto floored = [&](Vector q) { return q.cwiseMax(cfg.tau_floor); };

  for (int it = 1; it <= cfg.max_iters; ++it) {
    const auto llt = spd_factor(res.sigma);
    const Vector q_old = floored(quadratic_forms(xs, res.mu, llt));

    Vector mu_new = res.mu;
    if (cfg.update_mu) {
      const Vector c = sqrt_weights ? Vector(ps.array() / q_old.array().sqrt()) : Vector(ps.array() / q_old.array());
      mu_new = xs.transpose() * c / c.sum();
    }

    Matrix sigma_new;
    if (fresh_center && cfg.update_mu) {
      const Vector q_fresh = floored(quadratic_forms(xs, mu_new, llt));
      sigma_new = detail::weighted_scatter(xs, mu_new, w, q_fresh);
    } else {
      sigma_new = detail::weighted_scatter(xs, res.mu, w, q_old);
    }
    sigma_new = detail::checked_scatter(std::move(sigma_new), static_cast<double>(m));

    const double delta = (mu_new - res.mu).norm() + (sigma_new - res.sigma).norm();
    res.mu = std::move(mu_new);
    res.sigma = std::move(sigma_new);
    res.iters = it;
    if (delta < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

/// Known-location Tyler M-estimator, trace-m normalized on every pass.
inline Matrix tyler_estimator(const Matrix& x, const Vector& mu, int iters = 1000, double tol = 1e-12) {
  const auto n = x.rows();
  const auto m = x.cols();
  require(mu.size() == m, "dimension mismatch");
  require(n > m, "Tyler estimator needs n > m");
  const Vector w = Vector::Constant(n, 1.0 / static_cast<double>(n));
  Matrix sigma = Matrix::Identity(m, m);
  for (int it = 0; it < iters; ++it) {
    const Vector q = quadratic_forms(x, mu, spd_factor(sigma)).cwiseMax(1e-300);
    Matrix next = detail::checked_scatter(detail::weighted_scatter(x, mu, w, q), static_cast<double>(m));
    const double delta = (next - sigma).norm();
    sigma = std::move(next);
    if (delta < tol) break;
  }
  return sigma;
}

}  // namespace flexem
