#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace flexem;
using testutil::gaussian_sample;
using testutil::random_spd;
using testutil::random_vector;

namespace {

MixtureModel random_model(int k, int m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  MixtureModel model;
  model.pi.resize(k);
  for (int c = 0; c < k; ++c) {
    model.pi(c) = u(rng);
    model.mu.push_back(random_vector(m, rng, 2.0));
    model.sigma.push_back(random_spd(m, rng));
  }
  model.pi /= model.pi.sum();
  return model;
}

Matrix two_blobs(int n_each, int m, double sep, std::mt19937_64& rng, const Matrix& sigma2) {
  Matrix x(2 * n_each, m);
  x.topRows(n_each) = gaussian_sample(n_each, Vector::Zero(m), Matrix::Identity(m, m), rng);
  x.bottomRows(n_each) = gaussian_sample(n_each, Vector::Constant(m, sep), sigma2, rng);
  return x;
}

Matrix study_diagonal() {
  return make_covariance({DiagonalCov{{0.25, 3.5, 0.25, 0.75, 1.5, 0.5, 1, 0.25, 1, 1}}, 10.0}, 10);
}

double gaussian_density_log(const Vector& x, const Vector& mu, const Matrix& cov) {
  const double m = static_cast<double>(x.size());
  const Vector d = x - mu;
  return -0.5 * m * std::log(2 * std::numbers::pi) - 0.5 * std::log(cov.determinant()) -
         0.5 * d.dot(cov.inverse() * d);
}

double student_density_log(const Vector& x, const Vector& mu, const Matrix& scatter, double nu) {
  const double m = static_cast<double>(x.size());
  const Vector d = x - mu;
  return std::lgamma((nu + m) / 2) - std::lgamma(nu / 2) - 0.5 * m * std::log(nu * std::numbers::pi) -
         0.5 * std::log(scatter.determinant()) - 0.5 * (nu + m) * std::log(1 + d.dot(scatter.inverse() * d) / nu);
}

FitConfig seeded(std::uint64_t seed) {
  FitConfig cfg;
  cfg.init = KMeansInit{seed, 10, {}};
  return cfg;
}

}  // namespace

TEST(EStep, SingleClusterIsCertain) {
  std::mt19937_64 rng(1);
  const Matrix x = gaussian_sample(40, Vector::Zero(3), Matrix::Identity(3, 3), rng);
  const auto model = random_model(1, 3, rng);
  EXPECT_EQ(e_step(x, model), Matrix::Ones(40, 1));
  EXPECT_EQ(e_step_student(x, model, Vector::Constant(1, 4.0)), Matrix::Ones(40, 1));
  EXPECT_EQ(e_step_student(x, model, Vector::Constant(1, 4.0), StudentEStep::Approximate), Matrix::Ones(40, 1));
}

TEST(EStep, EquidistantPointSplitsEvenly) {
  MixtureModel model;
  model.pi = Vector::Constant(2, 0.5);
  model.mu = {Vector::Zero(3), Vector::Constant(3, 2.0)};
  model.sigma = {Matrix::Identity(3, 3), Matrix::Identity(3, 3)};
  Matrix x(1, 3);
  x << 1, 1, 1;
  const auto p = e_step(x, model);
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.5);
}

TEST(EStep, RowsSumToOne) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    const int m = 2 + rep % 30, k = 1 + rep % 5;
    const auto model = random_model(k, m, rng);
    const Matrix x = gaussian_sample(30, Vector::Zero(m), 9.0 * Matrix::Identity(m, m), rng);
    const auto p = e_step(x, model);
    for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
    EXPECT_GE(p.minCoeff(), 0.0);
  }
}

TEST(EStep, PointOnSeveralMeansStaysFinite) {
  MixtureModel model;
  model.pi = Vector::Constant(2, 0.5);
  model.mu = {Vector::Zero(2), Vector::Zero(2)};
  model.sigma = {Matrix::Identity(2, 2), 2.0 * Matrix::Identity(2, 2)};
  const auto p = e_step(Matrix::Zero(1, 2), model);
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
}

TEST(EStep, InvariantToCommonScatterScaling) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 30; ++rep) {
    auto model = random_model(3, 6, rng);
    const Matrix x = gaussian_sample(50, Vector::Zero(6), 4.0 * Matrix::Identity(6, 6), rng);
    const auto p = e_step(x, model);
    for (double c : {1e-3, 0.5, 17.0}) {
      auto scaled = model;
      for (auto& s : scaled.sigma) s *= c;
      EXPECT_LT((e_step(x, scaled) - p).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(EStep, ClusterPermutationPermutesColumns) {
  std::mt19937_64 rng(4);
  const auto model = random_model(4, 5, rng);
  const Matrix x = gaussian_sample(60, Vector::Zero(5), 4.0 * Matrix::Identity(5, 5), rng);
  const std::vector<int> perm{2, 0, 3, 1};
  MixtureModel permuted;
  permuted.pi.resize(4);
  for (int c = 0; c < 4; ++c) {
    permuted.pi(c) = model.pi(perm[c]);
    permuted.mu.push_back(model.mu[perm[c]]);
    permuted.sigma.push_back(model.sigma[perm[c]]);
  }
  const auto p = e_step(x, model);
  const auto q = e_step(x, permuted);
  for (int c = 0; c < 4; ++c) EXPECT_LT((q.col(c) - p.col(perm[c])).cwiseAbs().maxCoeff(), 1e-14);
  const auto lp = argmax_rows(p), lq = argmax_rows(q);
  for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_EQ(perm[lq[i]], lp[i]);
}

TEST(StudentEStep, EqualNuCoincidesWithDistributionFree) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const int m = 2 + rep;
    const auto model = random_model(3, m, rng);
    const Matrix x = gaussian_sample(40, Vector::Zero(m), 4.0 * Matrix::Identity(m, m), rng);
    const auto p = e_step(x, model);
    const Vector nu = Vector::Constant(3, 1.0 + rep);
    EXPECT_LT((e_step_student(x, model, nu, StudentEStep::Exact) - p).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((e_step_student(x, model, nu, StudentEStep::Approximate) - p).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(StudentEStep, SupTermMatchesNumericalSupremum) {
  for (double nu : {1.0, 3.0, 10.0}) {
    for (int m : {2, 8, 40}) {
      // log sup_t t^{m/2} g(t) with g normalized as the t density generator
      const double lg = std::lgamma((nu + m) / 2) - std::lgamma(nu / 2) - 0.5 * m * std::log(nu);
      const double at_m = 0.5 * m * std::log(double(m)) - 0.5 * (nu + m) * std::log1p(m / nu);
      double best = -1e300;
      for (int i = 0; i <= 200000; ++i) {
        const double t = std::exp(-10.0 + 20.0 * i / 200000.0);
        best = std::max(best, 0.5 * m * std::log(t) - 0.5 * (nu + m) * std::log1p(t / nu));
      }
      EXPECT_NEAR(student_log_sup(nu, m), lg + at_m, 1e-12);
      EXPECT_NEAR(at_m, best, 1e-6);
    }
  }
}

TEST(StudentEStep, ApproximationGapShrinksWithDimension) {
  // fixed c_k = nu_k / m; the log-weight offset between clusters converges to the approximation
  auto gap = [](int m) {
    const double c1 = 0.5, c2 = 3.0;
    const double exact = student_log_sup(c1 * m, m) - student_log_sup(c2 * m, m);
    const double approx = 0.5 * std::log(c1 / (1 + c1)) - 0.5 * std::log(c2 / (1 + c2));
    return std::abs(exact - approx);
  };
  double prev = gap(4);
  for (int m : {8, 16, 32, 64, 128, 256}) {
    const double g = gap(m);
    EXPECT_LT(g, prev) << "m=" << m;
    prev = g;
  }
  EXPECT_LT(gap(256), 0.01);
}

TEST(MStep, HardAssignmentRecoversBlockMeans) {
  std::mt19937_64 rng(6);
  const int m = 3, n = 2000;
  const Matrix x = two_blobs(n, m, 10.0, rng, Matrix::Identity(m, m));
  Matrix p = Matrix::Zero(2 * n, 2);
  p.topRows(n).col(0).setOnes();
  p.bottomRows(n).col(1).setOnes();
  MixtureModel prev;
  prev.pi = Vector::Constant(2, 0.5);
  prev.mu = {Vector::Constant(m, 0.5), Vector::Constant(m, 9.0)};
  prev.sigma = {Matrix::Identity(m, m), Matrix::Identity(m, m)};
  FitConfig cfg;
  cfg.fixed_point.max_iters = 200;
  const auto r = m_step(x, p, prev, cfg);
  EXPECT_LT((r.model.mu[0] - x.topRows(n).colwise().mean().transpose()).norm(), 0.1);
  EXPECT_LT((r.model.mu[1] - x.bottomRows(n).colwise().mean().transpose()).norm(), 0.1);
  EXPECT_DOUBLE_EQ(r.model.pi(0), 0.5);
}

TEST(MStep, IdenticalCopiesGetIdenticalScatter) {
  std::mt19937_64 rng(7);
  const Matrix x = gaussian_sample(300, Vector::Zero(4), random_spd(4, rng), rng);
  MixtureModel prev;
  prev.pi = Vector::Constant(2, 0.5);
  prev.mu = {Vector::Zero(4), Vector::Zero(4)};
  prev.sigma = {Matrix::Identity(4, 4), Matrix::Identity(4, 4)};
  const auto r = m_step(x, Matrix::Constant(300, 2, 0.5), prev, FitConfig{});
  EXPECT_LT((r.model.sigma[0] - r.model.sigma[1]).norm(), 1e-8);
}

TEST(MStep, SingleClusterUsesTheFixedPoint) {
  std::mt19937_64 rng(8);
  const Matrix x = gaussian_sample(250, Vector::Ones(5), random_spd(5, rng), rng);
  MixtureModel prev;
  prev.pi = Vector::Ones(1);
  prev.mu = {Vector::Zero(5)};
  prev.sigma = {Matrix::Identity(5, 5)};
  for (int v = 1; v <= 4; ++v) {
    FitConfig cfg;
    cfg.version = v;
    const auto r = m_step(x, Matrix::Ones(250, 1), prev, cfg);
    auto fp_cfg = cfg.fixed_point;
    fp_cfg.version = v;
    const auto oracle = fixed_point_mu_sigma(x, Vector::Ones(250), prev.mu[0], prev.sigma[0], fp_cfg);
    EXPECT_EQ(r.model.mu[0], oracle.mu);
    EXPECT_EQ(r.model.sigma[0], oracle.sigma);
  }
}

TEST(LogLikelihood, StandardGaussianAtMean) {
  for (int m : {1, 3, 10}) {
    MixtureModel model;
    model.pi = Vector::Ones(1);
    model.mu = {Vector::Zero(m)};
    model.sigma = {Matrix::Identity(m, m)};
    const std::vector gens{DensityGenerator::gaussian()};
    const double ll = log_likelihood(Matrix::Zero(1, m), model, gens, Matrix::Ones(1, 1));
    EXPECT_NEAR(ll, -0.5 * m * std::log(2 * std::numbers::pi), 1e-12);
  }
}

TEST(LogLikelihood, MatchesDirectDensities) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.3, 3.0);
  const int m = 4, n = 25;
  const auto model = random_model(2, m, rng);
  const Matrix x = gaussian_sample(n, Vector::Zero(m), 4.0 * Matrix::Identity(m, m), rng);
  Matrix tau(n, 2);
  for (int i = 0; i < n; ++i) tau.row(i) << u(rng), u(rng);
  const std::vector gens{DensityGenerator::gaussian(), DensityGenerator::student(3.5)};
  double oracle = 0.0;
  for (int i = 0; i < n; ++i) {
    const Vector xi = x.row(i).transpose();
    const double a = model.pi(0) * std::exp(gaussian_density_log(xi, model.mu[0], tau(i, 0) * model.sigma[0]));
    const double b = model.pi(1) * std::exp(student_density_log(xi, model.mu[1], tau(i, 1) * model.sigma[1], 3.5));
    oracle += std::log(a + b);
  }
  EXPECT_NEAR(log_likelihood(x, model, gens, tau), oracle, 1e-9 * std::abs(oracle));
  const std::vector bad{DensityGenerator::gaussian(), DensityGenerator::k_dist(2.0)};
  EXPECT_THROW(log_likelihood(x, model, bad, tau), Error);
}

TEST(Fit, InvariantsOfTheResult) {
  std::mt19937_64 rng(10);
  const Matrix x = two_blobs(150, 5, 4.0, rng, random_spd(5, rng));
  for (int v = 1; v <= 4; ++v) {
    auto cfg = seeded(3);
    cfg.version = v;
    const auto rep = fit(x, 2, cfg);
    EXPECT_NEAR(rep.model.pi.sum(), 1.0, 1e-12);
    for (int c = 0; c < 2; ++c) {
      EXPECT_GT(rep.model.pi(c), 0.0);
      EXPECT_LT(rep.model.pi(c), 1.0);
      EXPECT_NEAR(rep.model.sigma[c].trace() / 5.0, 1.0, 1e-10);
      EXPECT_EQ(rep.model.sigma[c], rep.model.sigma[c].transpose());
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) EXPECT_NEAR(rep.responsibilities.row(i).sum(), 1.0, 1e-12);
    EXPECT_EQ(rep.labels, argmax_rows(rep.responsibilities));
  }
}

TEST(Fit, SeparatedClustersRecovered) {
  std::mt19937_64 rng(11);
  const Matrix x = two_blobs(200, 10, 2.0, rng, study_diagonal());
  std::vector<int> truth(400, 0);
  std::fill(truth.begin() + 200, truth.end(), 1);
  const auto rep = fit(x, 2, seeded(1));
  EXPECT_GT(ari(rep.labels, truth), 0.95);
}

TEST(Fit, Deterministic) {
  std::mt19937_64 rng(12);
  const Matrix x = two_blobs(120, 4, 3.0, rng, Matrix::Identity(4, 4));
  auto cfg = seeded(77);
  cfg.likelihood_monitor = MonitorGaussian{};
  const auto a = fit(x, 2, cfg);
  const auto b = fit(x, 2, cfg);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.responsibilities, b.responsibilities);
  EXPECT_EQ(a.tau, b.tau);
  EXPECT_EQ(a.loglik_trace, b.loglik_trace);
  EXPECT_EQ(a.per_cluster_fp_iters, b.per_cluster_fp_iters);
  for (int c = 0; c < 2; ++c) {
    EXPECT_EQ(a.model.mu[c], b.model.mu[c]);
    EXPECT_EQ(a.model.sigma[c], b.model.sigma[c]);
  }
}

TEST(Fit, FixedPointConvergesQuicklyOnGaussianPair) {
  std::mt19937_64 rng(13);
  const Matrix x = two_blobs(500, 10, 2.0, rng, study_diagonal());
  for (int v = 1; v <= 4; ++v) {
    auto cfg = seeded(2);
    cfg.version = v;
    cfg.fixed_point.max_iters = 200;
    const auto rep = fit(x, 2, cfg);
    std::vector<int> iters;
    for (const auto& row : rep.per_cluster_fp_iters) iters.insert(iters.end(), row.begin(), row.end());
    std::nth_element(iters.begin(), iters.begin() + iters.size() / 2, iters.end());
    EXPECT_LE(iters[iters.size() / 2], 20) << "version " << v;
  }
}

TEST(Fit, SingleClusterMatchesFixedPoint) {
  std::mt19937_64 rng(14);
  const Matrix x = gaussian_sample(400, Vector::Ones(4), random_spd(4, rng), rng);
  auto cfg = seeded(0);
  cfg.em_tol = 1e-12;
  cfg.fixed_point.max_iters = 100;
  cfg.fixed_point.tol = 1e-12;
  const auto rep = fit(x, 1, cfg);
  FixedPointConfig fp;
  fp.max_iters = 5000;
  fp.tol = 1e-13;
  const auto oracle = fixed_point_mu_sigma(x, Vector::Ones(400), x.colwise().mean().transpose(), Matrix::Identity(4, 4), fp);
  EXPECT_LT((rep.model.mu[0] - oracle.mu).norm(), 1e-8);
  EXPECT_LT((rep.model.sigma[0] - oracle.sigma).norm(), 1e-8);
  EXPECT_EQ(rep.responsibilities, Matrix::Ones(400, 1));
}

TEST(Fit, GaussianMonitorTauIsMahalanobisOverM) {
  std::mt19937_64 rng(15);
  const Matrix x = two_blobs(100, 3, 4.0, rng, Matrix::Identity(3, 3));
  auto cfg = seeded(5);
  cfg.likelihood_monitor = MonitorGaussian{};
  const auto rep = fit(x, 2, cfg);
  for (int c = 0; c < 2; ++c) {
    const Vector q = quadratic_forms(x, rep.model.mu[c], spd_factor(rep.model.sigma[c]));
    const Matrix inv = rep.model.sigma[c].inverse();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      EXPECT_EQ(rep.tau(i, c), std::max(q(i) / 3.0, 1e-12));
      const double direct = mahalanobis_sq(x.row(i).transpose(), rep.model.mu[c], inv) / 3.0;
      EXPECT_NEAR(rep.tau(i, c), direct, 1e-10 * std::max(direct, 1.0));
    }
  }
}

TEST(Fit, MonitoredLikelihoodNeverDecreases) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto s = generate_setup(setup_spec(seed % 2 ? 1 : 2), rng);
    const double nu = seed % 2 ? 3.0 : 10.0;
    for (const LikelihoodMonitor mon : {LikelihoodMonitor{MonitorGaussian{}}, LikelihoodMonitor{MonitorStudent{Vector::Constant(3, nu)}}}) {
      auto cfg = seeded(seed);
      cfg.init = KMeansInit{seed, 10, IsolationRule{1, 0.05, 50}};
      cfg.likelihood_monitor = mon;
      cfg.fixed_point.max_iters = 500;
      cfg.fixed_point.tol = 1e-10;
      FitReport rep;
      try {
        rep = fit(s.data, 3, cfg);
      } catch (const std::exception& e) {
        FAIL() << "seed " << seed << ": " << e.what();
      }
      EXPECT_EQ(rep.monotonicity_violations, 0);
      for (std::size_t t = 1; t < rep.loglik_trace.size(); ++t)
        EXPECT_GE(rep.loglik_trace[t], rep.loglik_trace[t - 1] - 1e-8 * std::abs(rep.loglik_trace[t - 1]));
    }
  }
}

TEST(Fit, ExactStudentEStepWithMatchingMonitor) {
  std::mt19937_64 rng(16);
  auto spec = setup_spec(1);
  spec.clusters[2].generator = setups::pure(DensityGenerator::student(6.0));
  const auto s = generate_setup(spec, rng);
  const Vector nu = (Vector(3) << 3.0, 3.0, 6.0).finished();
  auto cfg = seeded(4);
  cfg.e_step = StudentBayesEStep{nu, StudentEStep::Exact};
  cfg.likelihood_monitor = MonitorStudent{nu};
  cfg.fixed_point.max_iters = 500;
  cfg.fixed_point.tol = 1e-10;
  const auto rep = fit(s.data, 3, cfg);
  EXPECT_EQ(rep.monotonicity_violations, 0);
  EXPECT_GT(ari(rep.labels, s.labels), 0.8);
}

TEST(Fit, TrackTauRecordsEveryIteration) {
  std::mt19937_64 rng(17);
  const Matrix x = two_blobs(80, 3, 5.0, rng, Matrix::Identity(3, 3));
  auto cfg = seeded(1);
  cfg.track_tau = true;
  const auto rep = fit(x, 2, cfg);
  EXPECT_EQ(static_cast<int>(rep.tau_trace.size()), rep.em_iters);
  EXPECT_EQ(rep.tau_trace.back(), rep.tau);
}

TEST(Fit, WarnsBelowDimensionBound) {
  std::mt19937_64 rng(18);
  const Matrix x = two_blobs(30, 6, 6.0, rng, Matrix::Identity(6, 6));
  const auto rep = fit(x, 2, seeded(0));
  ASSERT_FALSE(rep.warnings.empty());
  EXPECT_NE(rep.warnings[0].find("m(2m-1)"), std::string::npos);
}

TEST(Fit, RejectsBadInput) {
  Matrix x = Matrix::Zero(5, 2);
  EXPECT_THROW(fit(x, 6), Error);
  EXPECT_THROW(fit(x, 0), Error);
  x(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(fit(x, 2), Error);
  FitConfig cfg;
  cfg.version = 5;
  EXPECT_THROW(fit(Matrix::Random(20, 2), 2, cfg), Error);
}
