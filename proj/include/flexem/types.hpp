#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flexem {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Label attached to background-noise rows (never a cluster index).
inline constexpr int kNoise = -1;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a weighted scatter matrix loses full rank.
class DegenerateCluster : public Error {
 public:
  explicit DegenerateCluster(int cluster = -1)
      : Error("degenerate cluster"), cluster_(cluster) {}
  int cluster() const noexcept { return cluster_; }

 private:
  int cluster_;
};

/// n x m observations (one row per point) plus optional ground truth.
struct DataSet {
  Matrix x;
  std::vector<int> labels;

  Eigen::Index n() const { return x.rows(); }
  Eigen::Index m() const { return x.cols(); }
  bool has_labels() const { return !labels.empty(); }
};

/// K triples (pi_k, mu_k, Sigma_k). Fitted models keep trace(Sigma_k) == m.
struct MixtureModel {
  Vector pi;
  std::vector<Vector> mu;
  std::vector<Matrix> sigma;

  int k() const { return static_cast<int>(mu.size()); }
  Eigen::Index m() const { return mu.empty() ? 0 : mu.front().size(); }
};

/// n x K row-stochastic matrix of membership probabilities.
using Responsibilities = Matrix;

/// n x K positive matrix of per-observation scale estimates.
using ScaleEstimates = Matrix;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw Error(what);
}

/// Rescales a square matrix so that its trace equals `target`.
inline Matrix with_trace(const Matrix& s, double target) {
  const double tr = s.trace();
  require(tr > 0.0, "matrix has non-positive trace");
  return s * (target / tr);
}

inline Matrix symmetrized(const Matrix& s) { return 0.5 * (s + s.transpose()); }

/// Row-argmax with ties broken toward the lowest column.
inline std::vector<int> argmax_rows(const Matrix& p) {
  std::vector<int> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < p.cols(); ++k) {
      if (p(i, k) > p(i, best)) best = k;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace flexem
