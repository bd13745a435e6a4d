#pragma once

#include "samic/layers.hpp"

#include <Eigen/Dense>

#include <iosfwd>

namespace samic {

/// m = u * diag(s) * v^T with r = min(rows, cols), s descending and non-negative.
struct SvdFactors {
  Eigen::MatrixXd u;  // rows x r
  Eigen::VectorXd s;  // r
  Eigen::MatrixXd v;  // cols x r
};

class SvdNonConvergence : public std::runtime_error {
 public:
  SvdNonConvergence(int sweeps, double residual);
  int sweeps() const { return sweeps_; }
  /// Largest normalized column inner product left after the last sweep.
  double residual() const { return residual_; }

 private:
  int sweeps_;
  double residual_;
};

/// One-sided Jacobi on the thinner dimension. Sweeps until every normalized
/// column pair is orthogonal to `tolerance`, throws after `max_sweeps`.
SvdFactors svd(const Eigen::MatrixXd& m, int max_sweeps = 30, double tolerance = 1e-12);

Eigen::VectorXd soft_threshold(const Eigen::VectorXd& s, double theta);
Eigen::MatrixXd low_rank_reconstruct(const Eigen::MatrixXd& u, const Eigen::VectorXd& s, const Eigen::MatrixXd& v);

struct RrmParams {
  Tensord theta_raw;  // [1]; threshold = softplus(theta_raw)
  Tensord alpha;      // [1]; blend strength

  static RrmParams make(double expected_mean_singular_value = 1.0, double alpha = 0.1);
  double threshold() const;
  void collect(const std::string& prefix, ParamList& out) const;
};

struct RrmTrace {
  Eigen::VectorXd s, s_thresholded;
};

/// y = H + alpha * (low-rank(H) - H) on the C x (H*W) flattening of H.
/// U and V are constants for differentiation; gradients reach H through the
/// singular values and the blend, and reach theta and alpha directly.
Tensord rrm_forward(const Tensord& h, const RrmParams& params, RrmTrace* trace = nullptr);

/// CSV rows (index, s, s').
void write_spectrum(std::ostream& os, const RrmTrace& trace);

}  // namespace samic
