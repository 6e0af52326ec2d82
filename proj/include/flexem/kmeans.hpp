#pragma once

#include "flexem/types.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace flexem {

struct KMeansResult {
  Matrix centers;  // K x m
  std::vector<int> labels;
  double inertia = 0.0;
  /// Inertia after each assignment step of the winning Lloyd run.
  std::vector<double> inertia_trace;
  int iterations = 0;
  int singleton_rounds = 0;
};

namespace detail {

/// Nearest-center labels (ties to the lowest index) and the resulting inertia.
inline double assign_nearest(const Matrix& x, const Matrix& centers, std::vector<int>& labels) {
  labels.resize(static_cast<std::size_t>(x.rows()));
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
      const double d = (x.row(i) - centers.row(c)).squaredNorm();
      if (d < best) {
        best = d;
        arg = static_cast<int>(c);
      }
    }
    labels[static_cast<std::size_t>(i)] = arg;
    inertia += best;
  }
  return inertia;
}

template <class Rng>
Matrix kmeans_plus_plus(const Matrix& x, int k, Rng& rng) {
  const auto n = x.rows();
  Matrix centers(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.row(0) = x.row(first(rng));
  Vector d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double r = unit(rng) * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2(i);
        if (r < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    centers.row(c) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }
  return centers;
}

template <class Rng>
KMeansResult lloyd(const Matrix& x, int k, Rng& rng, int max_iters) {
  KMeansResult r;
  r.centers = kmeans_plus_plus(x, k, rng);
  std::vector<int> prev;
  for (int it = 0; it < max_iters; ++it) {
    r.inertia = assign_nearest(x, r.centers, r.labels);
    r.inertia_trace.push_back(r.inertia);
    r.iterations = it + 1;
    if (r.labels == prev) break;
    prev = r.labels;

    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      sums.row(r.labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(r.labels[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) r.centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      // an empty center keeps its position; it owns no points so inertia is unaffected
    }
  }
  return r;
}

template <class Rng>
KMeansResult best_of(const Matrix& x, int k, Rng& rng, int restarts) {
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    auto run = lloyd(x, k, rng, 300);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best;
}

}  // namespace detail

/// Which clusters count as isolated points and how often k-means is rerun without them.
struct IsolationRule {
  /// Clusters with at most this many points are isolated (1: singletons only).
  int max_size = 1;
  /// Clusters holding at most this fraction of the active points are also isolated.
  double max_fraction = 0.0;
  int max_rounds = 3;
};

/// Lloyd's k-means with k-means++ seeding, best of `restarts` by inertia.
///
/// Isolated clusters (singletons by default) trigger a rerun without their
/// points; excluded points are then given to their nearest center.
inline KMeansResult kmeans(const Matrix& x, int k, std::uint64_t seed, int restarts = 10,
                           const IsolationRule& isolation = {}) {
  require(k >= 1, "K must be >= 1");
  require(x.rows() >= k, "n < K");
  require(restarts >= 1, "restarts must be >= 1");
  require(isolation.max_rounds >= 0 && isolation.max_fraction >= 0.0 && isolation.max_fraction < 1.0,
          "invalid isolation rule");
  std::mt19937_64 rng(seed);
  KMeansResult res = detail::best_of(x, k, rng, restarts);

  std::vector<bool> excluded(static_cast<std::size_t>(x.rows()), false);
  for (int round = 0; round < isolation.max_rounds; ++round) {
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    std::vector<Eigen::Index> active;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (!excluded[static_cast<std::size_t>(i)]) active.push_back(i);
    for (std::size_t j = 0; j < active.size(); ++j) ++counts[static_cast<std::size_t>(res.labels[j])];

    const double limit = std::max(static_cast<double>(isolation.max_size),
                                  isolation.max_fraction * static_cast<double>(active.size()));
    std::vector<Eigen::Index> isolated;
    for (std::size_t j = 0; j < active.size(); ++j)
      if (counts[static_cast<std::size_t>(res.labels[j])] <= limit) isolated.push_back(active[j]);
    if (isolated.empty() || static_cast<Eigen::Index>(active.size() - isolated.size()) < k) break;

    for (auto i : isolated) excluded[static_cast<std::size_t>(i)] = true;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (!excluded[static_cast<std::size_t>(i)]) keep.push_back(i);
    Matrix sub(static_cast<Eigen::Index>(keep.size()), x.cols());
    for (std::size_t j = 0; j < keep.size(); ++j) sub.row(static_cast<Eigen::Index>(j)) = x.row(keep[j]);
    auto rerun = detail::best_of(sub, k, rng, restarts);
    rerun.singleton_rounds = round + 1;
    res = std::move(rerun);
  }
  if (res.singleton_rounds > 0) {
    // reinsert every point by nearest center
    res.inertia = detail::assign_nearest(x, res.centers, res.labels);
  }
  return res;
}

}  // namespace flexem
