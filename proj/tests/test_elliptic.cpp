#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace flexem;
using testutil::random_spd;

namespace {

// Maximizer of f over a uniform log grid of `points` nodes on [lo, hi].
template <class F>
double grid_argmax(F f, double lo, double hi, int points) {
  double best_u = lo, best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < points; ++i) {
    const double u = lo + (hi - lo) * i / (points - 1);
    const double v = f(u);
    if (v > best) {
      best = v;
      best_u = u;
    }
  }
  return best_u;
}

double grid_argsup(const DensityGenerator& g, int m) {
  auto f = [&](double u) { return 0.5 * m * u + g.log_g(std::exp(u), m); };
  const double coarse = grid_argmax(f, -20.0, 20.0, 1000000);
  const double step = 40.0 / 999999.0;
  return std::exp(grid_argmax(f, coarse - 2 * step, coarse + 2 * step, 1000000));
}

}  // namespace

TEST(Argsup, GaussianIsDimension) { EXPECT_DOUBLE_EQ(argsup_density(DensityGenerator::gaussian(), 4), 4.0); }

TEST(Argsup, StudentIsDimension) { EXPECT_DOUBLE_EQ(argsup_density(DensityGenerator::student(3.0), 8), 8.0); }

TEST(Argsup, GenGaussianMatchesGridSearch) {
  const auto g = DensityGenerator::gen_gaussian(0.5);
  const double a = argsup_density(g, 6);
  EXPECT_NEAR(a / grid_argsup(g, 6), 1.0, 1e-6);
}

TEST(Argsup, KDistMatchesGridSearch) {
  for (int m : {2, 8, 40}) {
    const auto g = DensityGenerator::k_dist(3.0);
    EXPECT_NEAR(argsup_density(g, m) / grid_argsup(g, m), 1.0, 1e-6) << "m=" << m;
  }
}

TEST(Argsup, GenGaussianClosedForm) {
  // d/dt [m/2 log t - (t/b)^s / 2] = 0  =>  t = b (m/s)^{1/s}
  for (double s : {0.1, 0.5, 1.0, 2.0}) {
    for (int m : {1, 6, 40}) {
      const double b = detail::gen_gaussian_scale(s, m);
      const double expected = b * std::pow(m / s, 1.0 / s);
      EXPECT_NEAR(argsup_density(DensityGenerator::gen_gaussian(s), m) / expected, 1.0, 1e-8) << s << " " << m;
    }
  }
}

TEST(Argsup, NumericalPathAgreesWithClosedForms) {
  for (int m : {1, 2, 5, 8, 40, 64}) {
    const auto gauss = DensityGenerator::gaussian();
    EXPECT_NEAR(argsup_log_profile([&](double t) { return gauss.log_g(t, m); }, m) / m, 1.0, 1e-8);
    for (double nu : {0.5, 3.0, 10.0}) {
      const auto st = DensityGenerator::student(nu);
      EXPECT_NEAR(argsup_log_profile([&](double t) { return st.log_g(t, m); }, m) / m, 1.0, 1e-8);
    }
  }
}

TEST(Argsup, DivergentProfileHasNoMaximizer) {
  try {
    argsup_log_profile([](double) { return 0.0; }, 3);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "no finite maximizer");
  }
  // t^{m/2} (1 + t)^{-1} grows without bound for m = 4
  EXPECT_THROW(argsup_log_profile([](double t) { return -std::log1p(t); }, 4), Error);
}

TEST(Covariance, ToeplitzZeroIsIdentity) {
  const Matrix s = make_covariance({ToeplitzCov{0.0}, 3.0}, 3);
  EXPECT_EQ(s, Matrix::Identity(3, 3));
}

TEST(Covariance, ToeplitzHalf) {
  Matrix expected(3, 3);
  expected << 1, .5, .25, .5, 1, .5, .25, .5, 1;
  EXPECT_EQ(make_covariance({ToeplitzCov{0.5}, std::nullopt}, 3), expected);
}

TEST(Covariance, ConvergenceStudyDiagonal) {
  const std::vector<double> d{0.25, 3.5, 0.25, 0.75, 1.5, 0.5, 1, 0.25, 1, 1};
  const Matrix s = make_covariance({DiagonalCov{d}, 10.0}, 10);
  EXPECT_NEAR(s.trace(), 10.0, 1e-12);
  for (int i = 0; i < 10; ++i) EXPECT_NEAR(s(i, i), d[static_cast<std::size_t>(i)], 1e-12);
  EXPECT_EQ(s.norm(), s.diagonal().norm());
}

TEST(Covariance, NonPositiveDiagonalRejected) {
  EXPECT_THROW(make_covariance({DiagonalCov{{1.0, 0.0}}, std::nullopt}, 2), Error);
  EXPECT_THROW(make_covariance({DiagonalCov{{1.0, -2.0}}, std::nullopt}, 2), Error);
  EXPECT_THROW(make_covariance({IdentityCov{0.0}, std::nullopt}, 2), Error);
}

TEST(Covariance, SymmetricPositiveWithTargetTrace) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.01, 5.0), rho(0.0, 0.99);
  for (int rep = 0; rep < 200; ++rep) {
    const int m = 1 + static_cast<int>(rng() % 40);
    const double target = u(rng) * m;
    CovarianceSpec spec;
    switch (rep % 3) {
      case 0: spec.kind = ToeplitzCov{rho(rng)}; break;
      case 1: spec.kind = IdentityCov{u(rng)}; break;
      default: {
        std::vector<double> d(static_cast<std::size_t>(m));
        for (auto& v : d) v = u(rng);
        spec.kind = DiagonalCov{d};
      }
    }
    spec.target_trace = target;
    const Matrix s = make_covariance(spec, m);
    EXPECT_EQ(s, s.transpose());
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<Matrix>(s).eigenvalues().minCoeff(), 0.0);
    EXPECT_NEAR(s.trace() / target, 1.0, 1e-12);
  }
}

TEST(Sampler, GaussianMoments) {
  const int m = 5, n = 100000;
  std::mt19937_64 rng(3);
  EllipticalSampler draw(Vector::Zero(m), Matrix::Identity(m, m), DensityGenerator::gaussian());
  Matrix x(n, m);
  for (int i = 0; i < n; ++i) x.row(i) = draw(rng).transpose();
  const Vector mean = x.colwise().mean();
  for (int j = 0; j < m; ++j) EXPECT_LT(std::abs(mean(j)), 4.0 / std::sqrt(double(n)));
  const Matrix d = x.rowwise() - mean.transpose();
  const Matrix cov = d.transpose() * d / (n - 1);
  EXPECT_LT((cov - Matrix::Identity(m, m)).norm(), 0.1);
}

TEST(Sampler, TauScalesCovariance) {
  const int m = 3, n = 100000;
  std::mt19937_64 rng(5);
  std::mt19937_64 srng(9);
  const Matrix sigma = random_spd(m, srng);
  EllipticalSampler draw(Vector::Zero(m), sigma, DensityGenerator::k_dist(3.0));
  Matrix x(n, m);
  for (int i = 0; i < n; ++i) x.row(i) = draw(rng, 4.0).transpose();
  const Matrix cov = x.transpose() * x / n;
  EXPECT_LT((cov - 4.0 * sigma).norm() / (4.0 * sigma).norm(), 0.05);
}

TEST(Sampler, StudentMarginalKurtosis) {
  // excess kurtosis of a multivariate t marginal is 6 / (nu - 4)
  const double nu = 10.0;
  const int n = 400000;
  std::mt19937_64 rng(17);
  EllipticalSampler draw(Vector::Zero(3), Matrix::Identity(3, 3), DensityGenerator::student(nu));
  double s2 = 0.0, s4 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = draw(rng)(0);
    s2 += v * v;
    s4 += v * v * v * v;
  }
  s2 /= n;
  s4 /= n;
  EXPECT_NEAR(s2, 1.0, 0.02);
  EXPECT_NEAR(s4 / (s2 * s2) - 3.0, 6.0 / (nu - 4.0), 0.25);
}

TEST(Sampler, RejectsNonSpdScatter) {
  Matrix s(2, 2);
  s << 1, 2, 2, 1;
  try {
    EllipticalSampler(Vector::Zero(2), s, DensityGenerator::gaussian());
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "Sigma not SPD");
  }
}

TEST(Sampler, ModularMeanIsDimension) {
  const std::vector<DensityGenerator> gens{DensityGenerator::gaussian(),     DensityGenerator::student(6.0),
                                           DensityGenerator::student(10.0),  DensityGenerator::k_dist(3.0),
                                           DensityGenerator::k_dist(0.5),    DensityGenerator::gen_gaussian(0.5),
                                           DensityGenerator::gen_gaussian(1.0), DensityGenerator::gen_gaussian(2.0)};
  std::mt19937_64 rng(23);
  const int draws = 100000;
  for (const auto& g : gens) {
    for (int m : {1, 2, 8, 40, 64}) {
      double s = 0.0, ss = 0.0;
      for (int i = 0; i < draws; ++i) {
        const double q = sample_modular(g, m, rng);
        s += q;
        ss += q * q;
      }
      const double mean = s / draws;
      const double se = std::sqrt((ss / draws - mean * mean) / draws);
      EXPECT_LT(std::abs(mean - m), 3.0 * se) << g.str() << " m=" << m;
    }
  }
}

TEST(StandardTau, Values) {
  EXPECT_DOUBLE_EQ(standard_tau(DensityGenerator::gaussian(), 5), 1.0);
  EXPECT_DOUBLE_EQ(standard_tau(DensityGenerator::student(3.0), 5), 3.0);
  EXPECT_DOUBLE_EQ(standard_tau(DensityGenerator::k_dist(3.0), 5), 1.0);
  EXPECT_DOUBLE_EQ(standard_tau(DensityGenerator::gen_gaussian(0.5), 6),
                   1.0 / detail::gen_gaussian_scale(0.5, 6));
  EXPECT_THROW(standard_tau(DensityGenerator::student(2.0), 5), Error);
}

TEST(Setup, ThreeMatchesTables) {
  const auto spec = setup_spec(3);
  std::mt19937_64 rng(1);
  const auto s = generate_setup(spec, rng);
  EXPECT_EQ(s.data.rows(), 1300);
  EXPECT_EQ(s.data.cols(), 40);
  ASSERT_EQ(s.truth.k(), 3);
  EXPECT_EQ(spec.clusters[0].generator.parts[0].second, DensityGenerator::k_dist(3.0));
  EXPECT_EQ(spec.clusters[1].generator.parts[0].second, DensityGenerator::student(6.0));
  EXPECT_EQ(spec.clusters[2].generator.parts[0].second, DensityGenerator::gaussian());
  EXPECT_EQ(s.truth.mu[0], Vector::Constant(40, 2.0));
  EXPECT_EQ(s.truth.mu[1], Vector::Constant(40, 6.0));
  EXPECT_EQ(s.truth.mu[2], Vector::Constant(40, 7.0));
  EXPECT_LT((s.truth.sigma[0] - make_covariance({ToeplitzCov{0.2}, 40.0}, 40)).norm(), 1e-12);
  EXPECT_EQ(s.truth.sigma[1], Matrix::Identity(40, 40));
  EXPECT_LT((s.truth.sigma[2] - make_covariance({ToeplitzCov{0.5}, 40.0}, 40)).norm(), 1e-12);
  EXPECT_NEAR(s.truth.pi.sum(), 1.0, 1e-12);
  const std::set<int> labels(s.labels.begin(), s.labels.end());
  EXPECT_EQ(labels, (std::set<int>{0, 1, 2}));
}

TEST(Setup, FourHasTenPercentBoxNoise) {
  std::mt19937_64 rng(2);
  const auto s = generate_setup(setup_spec(4), rng);
  int noise = 0;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    if (s.labels[i] != kNoise) continue;
    ++noise;
    const auto row = s.data.row(static_cast<Eigen::Index>(i));
    EXPECT_GE(row.minCoeff(), 0.0);
    EXPECT_LE(row.maxCoeff(), 14.0);
  }
  EXPECT_EQ(noise, 120);
  EXPECT_EQ(s.noise_rows, 120);
}

TEST(Setup, NoNoiseLabelWithoutNoise) {
  for (int id : {1, 2, 3, 5}) {
    std::mt19937_64 rng(id);
    const auto s = generate_setup(setup_spec(id), rng);
    for (int l : s.labels) EXPECT_NE(l, kNoise);
    for (int c = 0; c < s.truth.k(); ++c) EXPECT_GT(std::count(s.labels.begin(), s.labels.end(), c), 0);
  }
}

TEST(Setup, RandomDiagonalTraces) {
  std::mt19937_64 rng(4);
  const auto s = generate_setup(setup_spec(1), rng);
  EXPECT_NEAR(s.truth.sigma[0].trace(), 8.0, 1e-10);
  EXPECT_NEAR(s.truth.sigma[1].trace(), 12.0, 1e-10);
  for (int c : {0, 1}) {
    const Vector d = s.truth.sigma[c].diagonal();
    EXPECT_EQ(s.truth.sigma[c], Matrix(d.asDiagonal()));
  }
}

TEST(Setup, SingleGaussianClusterCovariance) {
  SetupSpec spec;
  spec.m = 4;
  spec.n = 50000;
  spec.clusters = {ClusterSpec{}};
  spec.clusters[0].covariance = setups::identity();
  spec.proportions = std::vector<double>{1.0};
  std::mt19937_64 rng(8);
  const auto s = generate_setup(spec, rng);
  const Matrix d = s.data.rowwise() - s.data.colwise().mean();
  const Matrix cov = d.transpose() * d / (spec.n - 1);
  EXPECT_LT((cov - Matrix::Identity(4, 4)).norm(), 0.06);
}

TEST(Setup, BitReproducible) {
  for (int id = 1; id <= 5; ++id) {
    std::mt19937_64 a(99), b(99);
    const auto x = generate_setup(setup_spec(id), a);
    const auto y = generate_setup(setup_spec(id), b);
    EXPECT_EQ(x.data, y.data);
    EXPECT_EQ(x.labels, y.labels);
    EXPECT_EQ(x.tau, y.tau);
  }
}

TEST(Setup, StandardTauRecordedPerRow) {
  std::mt19937_64 rng(6);
  const auto s = generate_setup(setup_spec(1), rng);
  for (double t : s.tau) EXPECT_DOUBLE_EQ(t, 3.0);
  auto unit = setup_spec(1);
  unit.tau_rule = TauRule::Unit;
  std::mt19937_64 rng2(6);
  for (double t : generate_setup(unit, rng2).tau) EXPECT_DOUBLE_EQ(t, 1.0);
}

TEST(Setup, ConfigRoundTrip) {
  for (int id = 1; id <= 5; ++id) {
    auto spec = setup_spec(id);
    if (id == 2) spec.tau_rule = TauRule::Unit;
    if (id == 4) spec.proportions = std::vector<double>{0.5, 0.25, 0.25};
    const auto text = setup_to_string(spec);
    const auto back = parse_setup(config::parse_string(text));
    EXPECT_EQ(setup_to_string(back), text);
    std::mt19937_64 a(5), b(5);
    EXPECT_EQ(generate_setup(spec, a).data, generate_setup(back, b).data);
  }
}

TEST(Setup, ConfigErrorsCiteLines) {
  const std::string text = "m = 2\nn = 10\ntau = sometimes\n[cluster]\ngenerator = gaussian\n";
  try {
    parse_setup(config::parse_string(text));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Setup, InvalidSpecsRejected) {
  auto s = setup_spec(4);
  s.noise_fraction = 0.5;
  EXPECT_THROW(validate(s), Error);
  s = setup_spec(1);
  s.clusters[0].generator.parts = {{0.5, DensityGenerator::gaussian()}, {0.3, DensityGenerator::gaussian()}};
  EXPECT_THROW(validate(s), Error);
  EXPECT_THROW(setup_spec(6), Error);
}
