#pragma once

// Partition-agreement metrics (ARI, AMI, matched accuracy) and the parameter
// errors reported for the synthetic benchmarks.

#include "flexem/types.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

namespace flexem {

struct ContingencyTable {
  std::vector<int> row_labels;  // sorted distinct labels of the first partition
  std::vector<int> col_labels;
  std::vector<std::vector<std::int64_t>> counts;
  std::int64_t n = 0;

  std::vector<std::int64_t> row_sums() const {
    std::vector<std::int64_t> s(counts.size(), 0);
    for (std::size_t i = 0; i < counts.size(); ++i)
      for (auto v : counts[i]) s[i] += v;
    return s;
  }
  std::vector<std::int64_t> col_sums() const {
    std::vector<std::int64_t> s(col_labels.size(), 0);
    for (const auto& row : counts)
      for (std::size_t j = 0; j < row.size(); ++j) s[j] += row[j];
    return s;
  }
};

/// Cross-tabulates two labelings; with `exclude_noise` rows where either side is kNoise are dropped.
inline ContingencyTable contingency(std::span<const int> a, std::span<const int> b, bool exclude_noise = false) {
  require(a.size() == b.size(), "label vectors differ in length");
  std::map<int, std::size_t> ra, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (exclude_noise && (a[i] == kNoise || b[i] == kNoise)) continue;
    ra.emplace(a[i], 0);
    cb.emplace(b[i], 0);
  }
  ContingencyTable t;
  for (auto& [label, idx] : ra) {
    idx = t.row_labels.size();
    t.row_labels.push_back(label);
  }
  for (auto& [label, idx] : cb) {
    idx = t.col_labels.size();
    t.col_labels.push_back(label);
  }
  t.counts.assign(t.row_labels.size(), std::vector<std::int64_t>(t.col_labels.size(), 0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (exclude_noise && (a[i] == kNoise || b[i] == kNoise)) continue;
    ++t.counts[ra[a[i]]][cb[b[i]]];
    ++t.n;
  }
  return t;
}

namespace detail {

inline double comb2(std::int64_t v) { return 0.5 * static_cast<double>(v) * static_cast<double>(v - 1); }

inline bool same_partition(const ContingencyTable& t) {
  // identical up to renaming: every row and column has exactly one nonzero cell
  for (const auto& row : t.counts)
    if (std::count_if(row.begin(), row.end(), [](auto v) { return v > 0; }) != 1) return false;
  for (std::size_t j = 0; j < t.col_labels.size(); ++j) {
    int nz = 0;
    for (const auto& row : t.counts) nz += row[j] > 0;
    if (nz != 1) return false;
  }
  return true;
}

}  // namespace detail

/// Hubert-Arabie adjusted Rand index.
inline double ari(std::span<const int> a, std::span<const int> b, bool exclude_noise = false) {
  const auto t = contingency(a, b, exclude_noise);
  require(t.n > 0, "no labels to compare");
  double index = 0.0;
  for (const auto& row : t.counts)
    for (auto v : row) index += detail::comb2(v);
  double sa = 0.0, sb = 0.0;
  for (auto v : t.row_sums()) sa += detail::comb2(v);
  for (auto v : t.col_sums()) sb += detail::comb2(v);
  const double total = detail::comb2(t.n);
  const double expected = total > 0.0 ? sa * sb / total : 0.0;
  const double max_index = 0.5 * (sa + sb);
  const double denom = max_index - expected;
  if (denom == 0.0) return detail::same_partition(t) ? 1.0 : 0.0;
  return (index - expected) / denom;
}

enum class AmiNormalization { Arithmetic, Max };

namespace detail {

inline double entropy(const std::vector<std::int64_t>& sums, double n) {
  double h = 0.0;
  for (auto v : sums)
    if (v > 0) h -= (v / n) * std::log(v / n);
  return h;
}

inline double mutual_information(const ContingencyTable& t) {
  const double n = static_cast<double>(t.n);
  const auto ra = t.row_sums();
  const auto cb = t.col_sums();
  double mi = 0.0;
  for (std::size_t i = 0; i < t.counts.size(); ++i)
    for (std::size_t j = 0; j < cb.size(); ++j) {
      const double nij = static_cast<double>(t.counts[i][j]);
      if (nij > 0) mi += (nij / n) * std::log(n * nij / (static_cast<double>(ra[i]) * static_cast<double>(cb[j])));
    }
  return std::max(mi, 0.0);
}

}  // namespace detail

/// Expected mutual information under the hypergeometric (fixed-marginals) model.
inline double expected_mutual_information(const ContingencyTable& t) {
  const auto ra = t.row_sums();
  const auto cb = t.col_sums();
  const std::int64_t n = t.n;
  std::vector<double> lf(static_cast<std::size_t>(n) + 1, 0.0);
  for (std::int64_t v = 1; v <= n; ++v) lf[static_cast<std::size_t>(v)] = std::lgamma(static_cast<double>(v) + 1.0);
  auto logfact = [&](std::int64_t v) { return lf[static_cast<std::size_t>(v)]; };
  const double nd = static_cast<double>(n);
  double emi = 0.0;
  for (auto a : ra) {
    for (auto b : cb) {
      const std::int64_t lo = std::max<std::int64_t>(1, a + b - n);
      const std::int64_t hi = std::min(a, b);
      const double fixed = logfact(a) + logfact(b) + logfact(n - a) + logfact(n - b) - logfact(n);
      for (std::int64_t nij = lo; nij <= hi; ++nij) {
        const double term = (static_cast<double>(nij) / nd) *
                            std::log(nd * static_cast<double>(nij) / (static_cast<double>(a) * static_cast<double>(b)));
        const double logp =
            fixed - logfact(nij) - logfact(a - nij) - logfact(b - nij) - logfact(n - a - b + nij);
        emi += term * std::exp(logp);
      }
    }
  }
  return emi;
}

/// Adjusted mutual information (natural logs).
/// Returns 1 for identical partitions and 0 otherwise when the adjustment is degenerate.
inline double ami(std::span<const int> a, std::span<const int> b, bool exclude_noise = false,
                  AmiNormalization norm = AmiNormalization::Arithmetic) {
  const auto t = contingency(a, b, exclude_noise);
  require(t.n > 0, "no labels to compare");
  if (t.row_labels.size() == 1 || t.col_labels.size() == 1 ||
      (t.row_labels.size() == static_cast<std::size_t>(t.n) && t.col_labels.size() == static_cast<std::size_t>(t.n))) {
    return detail::same_partition(t) ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(t.n);
  const double mi = detail::mutual_information(t);
  const double ha = detail::entropy(t.row_sums(), n);
  const double hb = detail::entropy(t.col_sums(), n);
  const double emi = expected_mutual_information(t);
  const double normalizer = norm == AmiNormalization::Max ? std::max(ha, hb) : 0.5 * (ha + hb);
  double denom = normalizer - emi;
  if (std::abs(denom) < 1e-15) return detail::same_partition(t) ? 1.0 : 0.0;
  return (mi - emi) / denom;
}

/// Minimum-cost perfect assignment on a rows x cols cost matrix (rows <= cols).
/// Returns, for each row, the assigned column.
inline std::vector<int> hungarian_min_cost(const std::vector<std::vector<double>>& cost) {
  const int rows = static_cast<int>(cost.size());
  if (rows == 0) return {};
  const int cols = static_cast<int>(cost.front().size());
  require(rows <= cols, "assignment needs rows <= cols");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<int> match(cols + 1, 0), way(cols + 1, 0);
  for (int i = 1; i <= rows; ++i) {
    match[0] = i;
    int j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<bool> used(cols + 1, false);
    do {
      used[j0] = true;
      const int i0 = match[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(rows, -1);
  for (int j = 1; j <= cols; ++j)
    if (match[j] != 0) out[match[j] - 1] = j - 1;
  return out;
}

/// Maximum-weight one-to-one matching of rows to columns of a count table.
inline std::vector<int> max_agreement_matching(const std::vector<std::vector<std::int64_t>>& counts,
                                               std::size_t ncols) {
  const std::size_t nrows = counts.size();
  const std::size_t size = std::max(nrows, ncols);
  std::vector<std::vector<double>> cost(size, std::vector<double>(size, 0.0));
  for (std::size_t i = 0; i < nrows; ++i)
    for (std::size_t j = 0; j < ncols; ++j) cost[i][j] = -static_cast<double>(counts[i][j]);
  auto assign = hungarian_min_cost(cost);
  assign.resize(nrows);
  for (auto& a : assign)
    if (a >= static_cast<int>(ncols)) a = -1;
  return assign;
}

/// Fraction of points correctly classified under the best one-to-one label matching.
inline double accuracy(std::span<const int> pred, std::span<const int> truth, bool exclude_noise = false) {
  const auto t = contingency(pred, truth, exclude_noise);
  require(t.n > 0, "no labels to compare");
  const auto assign = max_agreement_matching(t.counts, t.col_labels.size());
  std::int64_t hit = 0;
  for (std::size_t i = 0; i < assign.size(); ++i)
    if (assign[i] >= 0) hit += t.counts[i][static_cast<std::size_t>(assign[i])];
  return static_cast<double>(hit) / static_cast<double>(t.n);
}

/// Frobenius error after rescaling the estimate to the true trace, divided by m.
inline double sigma_error(const Matrix& sigma_true, const Matrix& sigma_hat) {
  require(sigma_true.rows() == sigma_hat.rows() && sigma_true.cols() == sigma_hat.cols() &&
              sigma_true.rows() == sigma_true.cols(),
          "dimension mismatch");
  const double tr_hat = sigma_hat.trace();
  require(tr_hat != 0.0, "zero-trace estimate");
  const double m = static_cast<double>(sigma_true.rows());
  const Matrix diff = sigma_true - sigma_hat * (sigma_true.trace() / tr_hat);
  return std::sqrt(diff.squaredNorm() / (m * m));
}

inline double mu_error(const Vector& mu_true, const Vector& mu_hat) {
  require(mu_true.size() == mu_hat.size(), "dimension mismatch");
  return (mu_true - mu_hat).norm();
}

/// perm[k] = estimated cluster matched to true cluster k, maximizing label agreement.
/// Noise rows are ignored.
inline std::vector<int> match_clusters(const MixtureModel& truth, const MixtureModel& est,
                                       std::span<const int> truth_labels, std::span<const int> est_labels) {
  require(truth.k() == est.k(), "cluster counts differ");
  require(truth_labels.size() == est_labels.size(), "label vectors differ in length");
  const int k = truth.k();
  std::vector<std::vector<std::int64_t>> counts(static_cast<std::size_t>(k), std::vector<std::int64_t>(k, 0));
  for (std::size_t i = 0; i < truth_labels.size(); ++i) {
    const int a = truth_labels[i], b = est_labels[i];
    if (a == kNoise || b == kNoise) continue;
    require(a >= 0 && a < k && b >= 0 && b < k, "label out of range");
    ++counts[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
  }
  return max_agreement_matching(counts, static_cast<std::size_t>(k));
}

}  // namespace flexem
