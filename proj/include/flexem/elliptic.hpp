#pragma once

// Elliptically-symmetric distributions: density generators, the stochastic
// representation x = mu + sqrt(Q) sqrt(tau) A u, structured scatter matrices
// and the five synthetic benchmark setups.

#include "flexem/config.hpp"
#include "flexem/format.hpp"
#include "flexem/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace flexem {

// ---------------------------------------------------------------------------
// Density generators

struct Gaussian {};
struct StudentT {
  double nu;
};
/// Compound-Gaussian with Gamma(shape, 1/shape) texture.
struct KDist {
  double shape;
};
/// Multivariate generalized Gaussian, g(t) = exp(-(t/b)^s / 2).
struct GenGaussian {
  double shape;
};

namespace detail {

/// log K_nu(x) with asymptotic fallbacks where the library value under/overflows.
inline double log_bessel_k(double nu, double x) {
  nu = std::abs(nu);
  const double v = std::cyl_bessel_k(nu, x);
  if (v > 0.0 && std::isfinite(v)) return std::log(v);
  if (v == 0.0) return 0.5 * std::log(std::numbers::pi / (2.0 * x)) - x;
  // small-argument overflow: K_nu(x) ~ Gamma(nu)/2 (2/x)^nu
  return std::lgamma(nu) - std::log(2.0) + nu * std::log(2.0 / x);
}

/// Scale b making E[Q] = m for the generalized Gaussian of dimension m.
inline double gen_gaussian_scale(double shape, int m) {
  const double s = shape;
  return std::exp(std::log(static_cast<double>(m)) + std::lgamma(m / (2.0 * s)) -
                  std::log(2.0) / s - std::lgamma((m + 2.0) / (2.0 * s)));
}

}  // namespace detail

/// Radial profile g of an elliptical density |Sigma|^{-1/2} g(quadratic form).
///
/// Gaussian, K and generalized-Gaussian generators are normalized so that the
/// covariance equals the scatter matrix (E[Q] = m). The Student-t generator is
/// kept in scatter form, g(t) = (1 + t/nu)^{-(nu+m)/2}, whose argsup is m.
class DensityGenerator {
 public:
  using Kind = std::variant<Gaussian, StudentT, KDist, GenGaussian>;

  DensityGenerator() : kind_(Gaussian{}) {}
  DensityGenerator(Kind kind) : kind_(kind) { validate(); }  // NOLINT(implicit)

  static DensityGenerator gaussian() { return {Gaussian{}}; }
  static DensityGenerator student(double nu) { return {StudentT{nu}}; }
  static DensityGenerator k_dist(double shape) { return {KDist{shape}}; }
  static DensityGenerator gen_gaussian(double shape) { return {GenGaussian{shape}}; }

  const Kind& kind() const { return kind_; }
  bool is_gaussian() const { return std::holds_alternative<Gaussian>(kind_); }
  bool is_student() const { return std::holds_alternative<StudentT>(kind_); }

  /// log g(t) up to an additive constant independent of t.
  double log_g(double t, int m) const {
    return std::visit(
        [&](const auto& g) -> double {
          using G = std::decay_t<decltype(g)>;
          if constexpr (std::is_same_v<G, Gaussian>) {
            return -0.5 * t;
          } else if constexpr (std::is_same_v<G, StudentT>) {
            return -0.5 * (g.nu + m) * std::log1p(t / g.nu);
          } else if constexpr (std::is_same_v<G, KDist>) {
            const double order = g.shape - 0.5 * m;
            return 0.5 * order * std::log(t) + detail::log_bessel_k(order, std::sqrt(2.0 * g.shape * t));
          } else {
            const double b = detail::gen_gaussian_scale(g.shape, m);
            return -0.5 * std::pow(t / b, g.shape);
          }
        },
        kind_);
  }

  /// Textual form used by config files: gaussian, student:3, kdist:3, gengaussian:0.1.
  std::string str() const {
    return std::visit(
        [](const auto& g) -> std::string {
          using G = std::decay_t<decltype(g)>;
          if constexpr (std::is_same_v<G, Gaussian>) return "gaussian";
          else if constexpr (std::is_same_v<G, StudentT>) return "student:" + format_double(g.nu);
          else if constexpr (std::is_same_v<G, KDist>) return "kdist:" + format_double(g.shape);
          else return "gengaussian:" + format_double(g.shape);
        },
        kind_);
  }

  static DensityGenerator parse(std::string_view text) {
    text = trim(text);
    const auto colon = text.find(':');
    const auto name = trim(text.substr(0, colon));
    std::optional<double> param;
    if (colon != std::string_view::npos) {
      param = parse_double(text.substr(colon + 1));
      if (!param) throw Error("bad generator parameter in '" + std::string(text) + "'");
    }
    auto need = [&]() {
      if (!param) throw Error("generator '" + std::string(name) + "' needs a parameter");
      return *param;
    };
    if (name == "gaussian" || name == "normal") return gaussian();
    if (name == "student" || name == "t") return student(need());
    if (name == "kdist" || name == "k") return k_dist(need());
    if (name == "gengaussian" || name == "gn") return gen_gaussian(need());
    throw Error("unknown generator '" + std::string(name) + "'");
  }

  friend bool operator==(const DensityGenerator& a, const DensityGenerator& b) { return a.str() == b.str(); }

 private:
  void validate() const {
    std::visit(
        [](const auto& g) {
          using G = std::decay_t<decltype(g)>;
          if constexpr (std::is_same_v<G, StudentT>) {
            require(g.nu > 0.0 && std::isfinite(g.nu), "student generator needs nu > 0");
          } else if constexpr (!std::is_same_v<G, Gaussian>) {
            require(g.shape > 0.0 && std::isfinite(g.shape), "generator shape must be positive");
          }
        },
        kind_);
  }

  Kind kind_;
};

/// Global maximizer of t -> t^{m/2} exp(log_g(t)) over t > 0.
///
/// Golden-section search on u = log t, polished by bisection on the sign of a
/// centred difference so the result is accurate well below sqrt(eps).
template <class LogG>
double argsup_log_profile(LogG&& log_g, int m) {
  require(m >= 1, "dimension must be >= 1");
  const double half_m = 0.5 * m;
  auto f = [&](double u) { return half_m * u + log_g(std::exp(u)); };
  constexpr double kLimit = 690.0;  // exp(690) is close to the double range

  // bracket [a, c] around an interior maximum b
  double b = std::log(static_cast<double>(m));
  double fb = f(b);
  double step = 1.0;
  double a = b - step, c = b + step;
  double fa = f(a), fc = f(c);
  while (fc >= fb) {
    a = b;
    fa = fb;
    b = c;
    fb = fc;
    step *= 2.0;
    c = b + step;
    if (c > kLimit || !std::isfinite(fb)) throw Error("no finite maximizer");
    fc = f(c);
  }
  while (fa >= fb) {
    c = b;
    fc = fb;
    b = a;
    fb = fa;
    step *= 2.0;
    a = b - step;
    if (a < -kLimit || !std::isfinite(fb)) throw Error("no finite maximizer");
    fa = f(a);
  }

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = c - inv_phi * (c - a);
  double x2 = a + inv_phi * (c - a);
  double f1 = f(x1), f2 = f(x2);
  while (c - a > 1e-6) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + inv_phi * (c - a);
      f2 = f(x2);
    } else {
      c = x2;
      x2 = x1;
      f2 = f1;
      x1 = c - inv_phi * (c - a);
      f1 = f(x1);
    }
  }

  constexpr double h = 1e-5;
  auto rising = [&](double u) { return f(u + h) > f(u - h); };
  a -= 1e-6;
  c += 1e-6;
  while (c - a > 1e-11) {
    const double mid = 0.5 * (a + c);
    if (rising(mid)) a = mid;
    else c = mid;
  }
  return std::exp(0.5 * (a + c));
}

/// a = argsup_t t^{m/2} g(t). Closed form (m) for Gaussian and Student-t.
inline double argsup_density(const DensityGenerator& gen, int m) {
  require(m >= 1, "dimension must be >= 1");
  if (gen.is_gaussian() || gen.is_student()) return static_cast<double>(m);
  return argsup_log_profile([&](double t) { return gen.log_g(t, m); }, m);
}

/// Draws the modular variate Q with E[Q] = m.
template <class Rng>
double sample_modular(const DensityGenerator& gen, int m, Rng& rng) {
  auto chi2 = [&](double dof) { return 2.0 * std::gamma_distribution<double>(0.5 * dof, 1.0)(rng); };
  return std::visit(
      [&](const auto& g) -> double {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, Gaussian>) {
          return chi2(m);
        } else if constexpr (std::is_same_v<G, StudentT>) {
          require(g.nu > 2.0, "student sampling needs nu > 2 for a finite covariance");
          const double num = chi2(m);
          const double den = chi2(g.nu);
          return (g.nu - 2.0) * num / den;
        } else if constexpr (std::is_same_v<G, KDist>) {
          const double texture = std::gamma_distribution<double>(g.shape, 1.0 / g.shape)(rng);
          return texture * chi2(m);
        } else {
          const double y = std::gamma_distribution<double>(m / (2.0 * g.shape), 1.0)(rng);
          return detail::gen_gaussian_scale(g.shape, m) * std::pow(2.0 * y, 1.0 / g.shape);
        }
      },
      gen.kind());
}

/// Uniform draw on the unit sphere of R^m.
template <class Rng>
Vector sample_unit_sphere(Eigen::Index m, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(m);
  double norm = 0.0;
  do {
    for (Eigen::Index j = 0; j < m; ++j) z(j) = normal(rng);
    norm = z.norm();
  } while (norm == 0.0);
  return z / norm;
}

/// Reusable sampler for ES(mu, tau * Sigma, g); factors Sigma once.
class EllipticalSampler {
 public:
  EllipticalSampler(Vector mu, const Matrix& sigma, DensityGenerator gen)
      : mu_(std::move(mu)), gen_(gen) {
    require(sigma.rows() == mu_.size() && sigma.cols() == mu_.size(), "Sigma/mu dimension mismatch");
    Eigen::LLT<Matrix> llt(sigma);
    if (llt.info() != Eigen::Success) throw Error("Sigma not SPD");
    factor_ = llt.matrixL();
  }

  template <class Rng>
  Vector operator()(Rng& rng, double tau = 1.0) const {
    require(tau > 0.0, "tau must be positive");
    const int m = static_cast<int>(mu_.size());
    const double q = sample_modular(gen_, m, rng);
    const Vector u = sample_unit_sphere(m, rng);
    return mu_ + std::sqrt(q * tau) * (factor_ * u);
  }

  const Matrix& factor() const { return factor_; }

 private:
  Vector mu_;
  Matrix factor_;
  DensityGenerator gen_;
};

template <class Rng>
Vector sample_elliptical(const Vector& mu, const Matrix& sigma, double tau, const DensityGenerator& gen, Rng& rng) {
  return EllipticalSampler(mu, sigma, gen)(rng, tau);
}

// ---------------------------------------------------------------------------
// Structured scatter matrices

struct IdentityCov {
  double scale = 1.0;
};
struct DiagonalCov {
  std::vector<double> entries;
};
/// AR(1) Toeplitz: entries rho^{|i-j|}.
struct ToeplitzCov {
  double rho = 0.0;
};

struct CovarianceSpec {
  std::variant<IdentityCov, DiagonalCov, ToeplitzCov> kind = IdentityCov{};
  std::optional<double> target_trace;  // nullopt = unconstrained
};

inline Matrix make_covariance(const CovarianceSpec& spec, int m) {
  require(m >= 1, "dimension must be >= 1");
  Matrix s = std::visit(
      [m](const auto& c) -> Matrix {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, IdentityCov>) {
          require(c.scale > 0.0, "non-positive diagonal entry");
          return c.scale * Matrix::Identity(m, m);
        } else if constexpr (std::is_same_v<C, DiagonalCov>) {
          require(static_cast<int>(c.entries.size()) == m, "diagonal has wrong length");
          Matrix d = Matrix::Zero(m, m);
          for (int i = 0; i < m; ++i) {
            require(c.entries[static_cast<std::size_t>(i)] > 0.0, "non-positive diagonal entry");
            d(i, i) = c.entries[static_cast<std::size_t>(i)];
          }
          return d;
        } else {
          require(c.rho >= 0.0 && c.rho < 1.0, "toeplitz rho must lie in [0, 1)");
          Matrix t(m, m);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) t(i, j) = std::pow(c.rho, std::abs(i - j));
          return t;
        }
      },
      spec.kind);
  if (spec.target_trace) {
    require(*spec.target_trace > 0.0, "target trace must be positive");
    s *= *spec.target_trace / s.trace();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Benchmark setups

/// mu = constant * 1 + e1_offset * e1 + U(lo, hi)^m + N(0, normal_var)^m
struct MeanRule {
  double constant = 0.0;
  double e1_offset = 0.0;
  std::optional<std::pair<double, double>> uniform;
  double normal_var = 0.0;
};

/// Either a fixed spec or a diagonal with entries U(lo, hi) rescaled to the trace.
struct CovarianceRule {
  CovarianceSpec spec;
  std::optional<std::pair<double, double>> random_diagonal;
};

/// Per-point generator drawn from a weighted list (a single entry = pure cluster).
struct GeneratorMix {
  std::vector<std::pair<double, DensityGenerator>> parts{{1.0, DensityGenerator::gaussian()}};
};

struct ClusterSpec {
  MeanRule mean;
  CovarianceRule covariance;
  GeneratorMix generator;
};

/// True nuisance scale of each drawn point.
/// Unit: tau = 1, so every cluster has covariance Sigma.
/// Standard: tau = standard_tau(generator), the scale of the generator's usual parameterization.
enum class TauRule { Unit, Standard };

/// Scale at which the E[Q] = m draw matches the generator's conventional form:
/// Student-t with scatter Sigma (nu / (nu - 2)), unit-mean K texture (1),
/// generalized Gaussian with g(t) = exp(-t^s / 2) (1 / b).
inline double standard_tau(const DensityGenerator& gen, int m) {
  return std::visit(
      [&](const auto& g) -> double {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, StudentT>) {
          require(g.nu > 2.0, "standard tau needs nu > 2");
          return g.nu / (g.nu - 2.0);
        } else if constexpr (std::is_same_v<G, GenGaussian>) {
          return 1.0 / detail::gen_gaussian_scale(g.shape, m);
        } else {
          return 1.0;
        }
      },
      gen.kind());
}

struct SetupSpec {
  int setup_id = 0;  // 0 = custom
  int m = 2;
  int n = 100;  // total rows, noise included
  std::vector<ClusterSpec> clusters;
  double noise_fraction = 0.0;
  double noise_low = 0.0;
  double noise_high = 14.0;
  std::optional<std::vector<double>> proportions;  // nullopt = random admissible
  double dirichlet_alpha = 5.0;
  double min_proportion = 0.15;
  TauRule tau_rule = TauRule::Unit;
};

struct LabeledSample {
  Matrix data;
  std::vector<int> labels;
  MixtureModel truth;
  /// True tau of each row (0 for noise rows).
  std::vector<double> tau;
  int noise_rows = 0;

  DataSet dataset() const { return DataSet{data, labels}; }
};

inline void validate(const SetupSpec& spec) {
  require(spec.m >= 1, "m must be >= 1");
  require(!spec.clusters.empty(), "setup needs at least one cluster");
  require(spec.noise_fraction >= 0.0 && spec.noise_fraction < 0.5, "noise_fraction must lie in [0, 0.5)");
  require(spec.noise_high > spec.noise_low, "noise range is empty");
  const int k = static_cast<int>(spec.clusters.size());
  const int noise = static_cast<int>(std::lround(spec.noise_fraction * spec.n));
  require(spec.n - noise >= k, "n too small for the number of clusters");
  if (spec.proportions) {
    require(static_cast<int>(spec.proportions->size()) == k, "proportions length differs from cluster count");
    double sum = 0.0;
    for (double p : *spec.proportions) {
      require(p > 0.0, "proportions must be positive");
      sum += p;
    }
    require(std::abs(sum - 1.0) < 1e-9, "proportions must sum to 1");
  } else {
    require(spec.dirichlet_alpha > 0.0, "dirichlet_alpha must be positive");
    require(spec.min_proportion * k < 1.0, "min_proportion infeasible for this K");
  }
  for (const auto& c : spec.clusters) {
    double w = 0.0;
    require(!c.generator.parts.empty(), "cluster needs a generator");
    for (const auto& [weight, g] : c.generator.parts) {
      require(weight > 0.0, "generator weights must be positive");
      w += weight;
    }
    require(std::abs(w - 1.0) < 1e-9, "generator weights must sum to 1");
    if (c.mean.uniform) require(c.mean.uniform->second >= c.mean.uniform->first, "bad uniform mean range");
    require(c.mean.normal_var >= 0.0, "mean normal variance must be >= 0");
    if (c.covariance.random_diagonal) {
      const auto [lo, hi] = *c.covariance.random_diagonal;
      require(lo > 0.0 && hi >= lo, "bad random diagonal range");
    }
  }
}

/// Dirichlet(alpha) draws rejected until every proportion reaches `min_p`.
template <class Rng>
std::vector<double> random_admissible_proportions(int k, double alpha, double min_p, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<double> p(static_cast<std::size_t>(k));
    double sum = 0.0;
    for (auto& v : p) sum += (v = gamma(rng));
    for (auto& v : p) v /= sum;
    if (*std::min_element(p.begin(), p.end()) >= min_p) return p;
  }
  throw Error("could not draw admissible proportions");
}

namespace setups {

inline ClusterSpec cluster(MeanRule mean, CovarianceRule cov, GeneratorMix gen) {
  return ClusterSpec{mean, std::move(cov), std::move(gen)};
}
inline CovarianceRule toeplitz(double rho, int m) { return {{ToeplitzCov{rho}, double(m)}, std::nullopt}; }
inline CovarianceRule identity(double scale = 1.0) { return {{IdentityCov{scale}, std::nullopt}, std::nullopt}; }
inline CovarianceRule random_diag(double trace) { return {{IdentityCov{}, trace}, std::pair{0.2, 3.5}}; }
inline GeneratorMix pure(DensityGenerator g) { return {{{1.0, g}}}; }

}  // namespace setups

/// The five synthetic benchmark setups.
inline SetupSpec setup_spec(int id) {
  using namespace setups;
  SetupSpec s;
  s.setup_id = id;
  const auto gauss = DensityGenerator::gaussian();
  switch (id) {
    case 1: {
      s.m = 8;
      s.n = 1000;
      const auto t3 = pure(DensityGenerator::student(3.0));
      s.clusters = {cluster({0.0, 0.0, std::pair{0.0, 1.0}, 0.0}, random_diag(8.0), t3),
                    cluster({6.0, 0.0, {}, 0.0}, random_diag(12.0), t3),
                    cluster({1.5, 3.0, {}, 0.0}, identity(4.0 / 8.0), t3)};
      break;
    }
    case 2: {
      s.m = 8;
      s.n = 1000;
      const auto t10 = pure(DensityGenerator::student(10.0));
      s.clusters = {cluster({0.0, 0.0, std::pair{0.0, 1.0}, 0.0}, random_diag(8.0), t10),
                    cluster({5.0, 0.0, {}, 0.0}, random_diag(8.0), t10),
                    cluster({1.5, 0.0, {}, 0.1}, identity(), t10)};
      break;
    }
    case 3: {
      s.m = 40;
      s.n = 1300;
      s.clusters = {cluster({2.0, 0.0, {}, 0.0}, toeplitz(0.2, 40), pure(DensityGenerator::k_dist(3.0))),
                    cluster({6.0, 0.0, {}, 0.0}, identity(), pure(DensityGenerator::student(6.0))),
                    cluster({7.0, 0.0, {}, 0.0}, toeplitz(0.5, 40), pure(gauss))};
      break;
    }
    case 4: {
      s.m = 8;
      s.n = 1200;
      s.noise_fraction = 0.1;
      s.clusters = {cluster({5.0, 0.0, {}, 0.0}, toeplitz(0.2, 8), pure(gauss)),
                    cluster({7.0, 0.0, {}, 0.0}, identity(), pure(gauss)),
                    cluster({9.0, 0.0, {}, 0.0}, toeplitz(0.5, 8), pure(gauss))};
      break;
    }
    case 5: {
      s.m = 6;
      s.n = 1200;
      s.clusters = {
          cluster({0.0, 0.0, std::pair{0.0, 0.2}, 0.0}, toeplitz(0.4, 6),
                  {{{0.7, gauss}, {0.3, DensityGenerator::gen_gaussian(0.1)}}}),
          cluster({2.0, 0.0, {}, 0.0}, identity(), {{{0.6, gauss}, {0.4, DensityGenerator::student(2.3)}}}),
          cluster({4.0, 2.0, {}, 0.0}, toeplitz(0.7, 6), pure(gauss))};
      break;
    }
    default:
      throw Error("setup id must be in 1..5");
  }
  s.tau_rule = TauRule::Standard;
  return s;
}

template <class Rng>
Vector draw_mean(const MeanRule& rule, int m, Rng& rng) {
  Vector mu = Vector::Constant(m, rule.constant);
  mu(0) += rule.e1_offset;
  if (rule.uniform) {
    std::uniform_real_distribution<double> u(rule.uniform->first, rule.uniform->second);
    for (int j = 0; j < m; ++j) mu(j) += u(rng);
  }
  if (rule.normal_var > 0.0) {
    std::normal_distribution<double> z(0.0, std::sqrt(rule.normal_var));
    for (int j = 0; j < m; ++j) mu(j) += z(rng);
  }
  return mu;
}

template <class Rng>
Matrix draw_covariance(const CovarianceRule& rule, int m, Rng& rng) {
  if (!rule.random_diagonal) return make_covariance(rule.spec, m);
  std::uniform_real_distribution<double> u(rule.random_diagonal->first, rule.random_diagonal->second);
  DiagonalCov diag;
  for (int j = 0; j < m; ++j) diag.entries.push_back(u(rng));
  return make_covariance(CovarianceSpec{diag, rule.spec.target_trace}, m);
}

/// Draws one labelled sample. Rows are grouped by cluster, noise rows last.
template <class Rng>
LabeledSample generate_setup(const SetupSpec& spec, Rng& rng) {
  validate(spec);
  const int k = static_cast<int>(spec.clusters.size());
  const int m = spec.m;
  const int noise = static_cast<int>(std::lround(spec.noise_fraction * spec.n));
  const int clean = spec.n - noise;

  const std::vector<double> props =
      spec.proportions ? *spec.proportions
                       : random_admissible_proportions(k, spec.dirichlet_alpha, spec.min_proportion, rng);

  LabeledSample out;
  out.truth.pi = Eigen::Map<const Vector>(props.data(), k);
  for (const auto& c : spec.clusters) {
    out.truth.mu.push_back(draw_mean(c.mean, m, rng));
    out.truth.sigma.push_back(draw_covariance(c.covariance, m, rng));
  }

  std::vector<int> sizes(static_cast<std::size_t>(k), 0);
  std::discrete_distribution<int> pick(props.begin(), props.end());
  bool ok = false;
  for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
    std::fill(sizes.begin(), sizes.end(), 0);
    for (int i = 0; i < clean; ++i) ++sizes[static_cast<std::size_t>(pick(rng))];
    ok = *std::min_element(sizes.begin(), sizes.end()) > 0;
  }
  if (!ok) throw Error("empty cluster after repeated size draws");

  out.data.resize(spec.n, m);
  out.labels.reserve(static_cast<std::size_t>(spec.n));
  Eigen::Index row = 0;
  for (int c = 0; c < k; ++c) {
    const auto& cs = spec.clusters[static_cast<std::size_t>(c)];
    std::vector<EllipticalSampler> samplers;
    std::vector<double> weights, taus;
    for (const auto& [w, g] : cs.generator.parts) {
      samplers.emplace_back(out.truth.mu[static_cast<std::size_t>(c)], out.truth.sigma[static_cast<std::size_t>(c)], g);
      weights.push_back(w);
      taus.push_back(spec.tau_rule == TauRule::Standard ? standard_tau(g, m) : 1.0);
    }
    std::discrete_distribution<int> which(weights.begin(), weights.end());
    for (int i = 0; i < sizes[static_cast<std::size_t>(c)]; ++i) {
      const int g = samplers.size() == 1 ? 0 : which(rng);
      const double tau = taus[static_cast<std::size_t>(g)];
      out.data.row(row++) = samplers[static_cast<std::size_t>(g)](rng, tau).transpose();
      out.labels.push_back(c);
      out.tau.push_back(tau);
    }
  }
  std::uniform_real_distribution<double> box(spec.noise_low, spec.noise_high);
  for (int i = 0; i < noise; ++i) {
    for (int j = 0; j < m; ++j) out.data(row, j) = box(rng);
    ++row;
    out.labels.push_back(kNoise);
    out.tau.push_back(0.0);
  }
  out.noise_rows = noise;
  return out;
}

// ---------------------------------------------------------------------------
// Setup config (de)serialization

namespace detail {

inline std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

inline std::string covariance_text(const CovarianceRule& rule) {
  if (rule.random_diagonal)
    return "random_diagonal:" + format_double(rule.random_diagonal->first) + "," +
           format_double(rule.random_diagonal->second);
  return std::visit(
      [](const auto& c) -> std::string {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, IdentityCov>) return "identity:" + format_double(c.scale);
        else if constexpr (std::is_same_v<C, DiagonalCov>) return "diagonal:" + join(c.entries);
        else return "toeplitz:" + format_double(c.rho);
      },
      rule.spec.kind);
}

inline CovarianceRule parse_covariance(const config::Section& sec) {
  const std::string& text = sec.str("covariance");
  const auto colon = text.find(':');
  const std::string name(trim(std::string_view(text).substr(0, colon)));
  const std::string args = colon == std::string::npos ? "" : text.substr(colon + 1);
  std::vector<double> values;
  if (!args.empty()) {
    for (auto part : split(args, ',')) {
      const auto v = parse_double(part);
      if (!v) sec.fail("covariance", "bad number in '" + text + "'");
      values.push_back(*v);
    }
  }
  CovarianceRule rule;
  if (name == "identity") {
    rule.spec.kind = IdentityCov{values.empty() ? 1.0 : values.front()};
  } else if (name == "diagonal") {
    rule.spec.kind = DiagonalCov{values};
  } else if (name == "toeplitz" && values.size() == 1) {
    rule.spec.kind = ToeplitzCov{values.front()};
  } else if (name == "random_diagonal" && values.size() == 2) {
    rule.random_diagonal = std::pair{values[0], values[1]};
  } else {
    sec.fail("covariance", "unrecognized covariance '" + text + "'");
  }
  if (sec.has("trace") && sec.str("trace") != "unconstrained") rule.spec.target_trace = sec.num("trace");
  return rule;
}

inline std::string generator_text(const GeneratorMix& mix) {
  if (mix.parts.size() == 1) return mix.parts.front().second.str();
  std::string s;
  for (std::size_t i = 0; i < mix.parts.size(); ++i)
    s += (i ? " + " : "") + format_double(mix.parts[i].first) + "*" + mix.parts[i].second.str();
  return s;
}

inline GeneratorMix parse_generator(const config::Section& sec) {
  GeneratorMix mix;
  mix.parts.clear();
  const std::string& text = sec.str("generator");
  for (auto term : split(text, '+')) {
    term = trim(term);
    double weight = 1.0;
    if (const auto star = term.find('*'); star != std::string_view::npos) {
      const auto w = parse_double(term.substr(0, star));
      if (!w) sec.fail("generator", "bad weight in '" + text + "'");
      weight = *w;
      term = term.substr(star + 1);
    }
    try {
      mix.parts.emplace_back(weight, DensityGenerator::parse(term));
    } catch (const Error& e) {
      sec.fail("generator", e.what());
    }
  }
  return mix;
}

}  // namespace detail

/// Writes the documented key/value form read back by `parse_setup`.
inline void write_setup(std::ostream& out, const SetupSpec& s) {
  out << "setup_id = " << s.setup_id << "\n";
  out << "m = " << s.m << "\n";
  out << "n = " << s.n << "\n";
  out << "noise_fraction = " << format_double(s.noise_fraction) << "\n";
  out << "noise_range = " << format_double(s.noise_low) << "," << format_double(s.noise_high) << "\n";
  out << "proportions = " << (s.proportions ? detail::join(*s.proportions) : std::string("random")) << "\n";
  out << "dirichlet_alpha = " << format_double(s.dirichlet_alpha) << "\n";
  out << "min_proportion = " << format_double(s.min_proportion) << "\n";
  out << "tau = " << (s.tau_rule == TauRule::Standard ? "standard" : "unit") << "\n";
  for (const auto& c : s.clusters) {
    out << "\n[cluster]\n";
    out << "mean_const = " << format_double(c.mean.constant) << "\n";
    out << "mean_e1 = " << format_double(c.mean.e1_offset) << "\n";
    if (c.mean.uniform)
      out << "mean_uniform = " << format_double(c.mean.uniform->first) << "," << format_double(c.mean.uniform->second)
          << "\n";
    out << "mean_normal_var = " << format_double(c.mean.normal_var) << "\n";
    out << "covariance = " << detail::covariance_text(c.covariance) << "\n";
    out << "trace = "
        << (c.covariance.spec.target_trace ? format_double(*c.covariance.spec.target_trace)
                                           : std::string("unconstrained"))
        << "\n";
    out << "generator = " << detail::generator_text(c.generator) << "\n";
  }
}

inline std::string setup_to_string(const SetupSpec& s) {
  std::ostringstream out;
  write_setup(out, s);
  return out.str();
}

inline SetupSpec parse_setup(const config::Document& doc) {
  const auto& root = doc.root;
  root.only({"setup_id", "m", "n", "noise_fraction", "noise_range", "proportions", "dirichlet_alpha",
             "min_proportion", "tau"});
  SetupSpec s;
  s.setup_id = static_cast<int>(root.integer("setup_id", 0));
  s.m = static_cast<int>(root.integer("m"));
  s.n = static_cast<int>(root.integer("n"));
  s.noise_fraction = root.num("noise_fraction", 0.0);
  if (root.has("noise_range")) {
    const auto r = root.numbers("noise_range");
    if (r.size() != 2) root.fail("noise_range", "expected 'low,high'");
    s.noise_low = r[0];
    s.noise_high = r[1];
  }
  if (root.has("proportions") && root.str("proportions") != "random") s.proportions = root.numbers("proportions");
  s.dirichlet_alpha = root.num("dirichlet_alpha", s.dirichlet_alpha);
  s.min_proportion = root.num("min_proportion", s.min_proportion);
  if (root.has("tau")) {
    const auto& t = root.str("tau");
    if (t != "unit" && t != "standard") root.fail("tau", "expected unit or standard");
    s.tau_rule = t == "standard" ? TauRule::Standard : TauRule::Unit;
  }
  for (const auto* sec : doc.all("cluster")) {
    sec->only({"mean_const", "mean_e1", "mean_uniform", "mean_normal_var", "covariance", "trace", "generator"});
    ClusterSpec c;
    c.mean.constant = sec->num("mean_const", 0.0);
    c.mean.e1_offset = sec->num("mean_e1", 0.0);
    if (sec->has("mean_uniform")) {
      const auto r = sec->numbers("mean_uniform");
      if (r.size() != 2) sec->fail("mean_uniform", "expected 'low,high'");
      c.mean.uniform = std::pair{r[0], r[1]};
    }
    c.mean.normal_var = sec->num("mean_normal_var", 0.0);
    c.covariance = detail::parse_covariance(*sec);
    c.generator = detail::parse_generator(*sec);
    s.clusters.push_back(std::move(c));
  }
  for (const auto& sec : doc.sections) {
    if (sec.name != "cluster") throw Error("line " + std::to_string(sec.line) + ": unknown section [" + sec.name + "]");
  }
  validate(s);
  return s;
}

inline SetupSpec parse_setup(const std::string& text) { return parse_setup(config::parse_string(text)); }

}  // namespace flexem
