#include "samic/svd_rrm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

namespace samic {

SvdNonConvergence::SvdNonConvergence(int sweeps, double residual)
    : std::runtime_error("SVD did not converge after " + std::to_string(sweeps) +
                         " sweeps (residual " + std::to_string(residual) + ")"),
      sweeps_(sweeps),
      residual_(residual) {}

namespace {

// Extends the orthonormal columns [0, filled) of q to a full orthonormal set.
void complete_basis(Eigen::MatrixXd& q, Index filled) {
  const Index n = q.rows();
  Index next = 0;
  for (Index j = filled; j < q.cols(); ++j) {
    for (;; ++next) {
      if (next >= n) throw std::logic_error("basis completion ran out of candidates");
      Eigen::VectorXd cand = Eigen::VectorXd::Unit(n, next);
      for (int pass = 0; pass < 2; ++pass)
        for (Index k = 0; k < j; ++k) cand -= q.col(k).dot(cand) * q.col(k);
      const double norm = cand.norm();
      if (norm > 1e-6) {
        q.col(j) = cand / norm;
        ++next;
        break;
      }
    }
  }
}

}  // namespace

SvdFactors svd(const Eigen::MatrixXd& m, int max_sweeps, double tolerance) {
  if (m.rows() < 1 || m.cols() < 1) throw std::invalid_argument("svd of an empty matrix");
  if (!m.allFinite()) throw std::invalid_argument("svd of a non-finite matrix");
  const bool transposed = m.rows() < m.cols();
  Eigen::MatrixXd b = transposed ? Eigen::MatrixXd(m.transpose()) : m;  // tall: p x q, p >= q
  const Index q = b.cols();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(q, q);

  double off = 0.0;
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    off = 0.0;
    for (Index i = 0; i < q - 1; ++i) {
      for (Index j = i + 1; j < q; ++j) {
        const double alpha = b.col(i).squaredNorm();
        const double beta = b.col(j).squaredNorm();
        const double gamma = b.col(i).dot(b.col(j));
        if (alpha == 0.0 || beta == 0.0) continue;
        const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, rel);
        if (rel < tolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Eigen::MatrixXd* mat : {&b, &v}) {
          Eigen::VectorXd ci = mat->col(i);
          mat->col(i) = c * ci - s * mat->col(j);
          mat->col(j) = s * ci + c * mat->col(j);
        }
      }
    }
    if (off < tolerance) break;
  }
  if (off >= tolerance) throw SvdNonConvergence(max_sweeps, off);

  Eigen::VectorXd sv(q);
  for (Index j = 0; j < q; ++j) sv[j] = b.col(j).norm();
  std::vector<Index> order(static_cast<std::size_t>(q));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index c) { return sv[a] > sv[c]; });

  const double scale = sv.maxCoeff();
  SvdFactors f;
  f.s.resize(q);
  Eigen::MatrixXd left(b.rows(), q), right(q, q);
  Index filled = 0;
  for (Index k = 0; k < q; ++k) {
    const Index j = order[static_cast<std::size_t>(k)];
    f.s[k] = sv[j];
    right.col(k) = v.col(j);
    if (sv[j] > scale * 1e-13 && sv[j] > 0) {
      left.col(k) = b.col(j) / sv[j];
      filled = k + 1;
    }
  }
  // Columns for (numerically) zero singular values span the remaining complement.
  complete_basis(left, filled);
  if (transposed) {
    f.u = std::move(right);
    f.v = std::move(left);
  } else {
    f.u = std::move(left);
    f.v = std::move(right);
  }
  return f;
}

Eigen::VectorXd soft_threshold(const Eigen::VectorXd& s, double theta) {
  return (s.array() - theta).max(0.0).matrix();
}

Eigen::MatrixXd low_rank_reconstruct(const Eigen::MatrixXd& u, const Eigen::VectorXd& s, const Eigen::MatrixXd& v) {
  if (u.cols() != s.size() || v.cols() != s.size()) throw std::invalid_argument("SVD factor shapes disagree");
  return u * s.asDiagonal() * v.transpose();
}

RrmParams RrmParams::make(double expected_mean_singular_value, double alpha) {
  const double theta = std::max(0.01 * expected_mean_singular_value, 1e-8);
  RrmParams p;
  p.theta_raw = Tensord::from({1}, {theta + std::log(-std::expm1(-theta))});
  p.alpha = Tensord::from({1}, {alpha});
  return p;
}

double RrmParams::threshold() const {
  const double r = theta_raw.value()[0];
  return std::max(r, 0.0) + std::log1p(std::exp(-std::abs(r)));
}

void RrmParams::collect(const std::string& prefix, ParamList& out) const {
  out.emplace_back(prefix + ".theta_raw", theta_raw);
  out.emplace_back(prefix + ".alpha", alpha);
}

Tensord rrm_forward(const Tensord& h, const RrmParams& params, RrmTrace* trace) {
  if (h.rank() != 3) throw std::invalid_argument("rrm_forward expects C x H x W");
  const Index c = h.dim(0), n = h.dim(1) * h.dim(2);
  using RowMap = Eigen::Map<const RowMatrix<double>>;
  const Eigen::MatrixXd hm = RowMap(h.value().data(), c, n);
  SvdFactors f = svd(hm);
  const double theta = params.threshold();
  const Eigen::VectorXd s_thr = soft_threshold(f.s, theta);
  const Eigen::MatrixXd low = low_rank_reconstruct(f.u, s_thr, f.v);
  const double alpha = params.alpha.value()[0];
  const RowMatrix<double> diff = low - hm;
  Array<double> y(c * n);
  Eigen::Map<RowMatrix<double>>(y.data(), c, n) = hm + alpha * diff;
  if (trace != nullptr) *trace = {f.s, s_thr};

  const Tensord& theta_raw = params.theta_raw;
  const Tensord& alpha_t = params.alpha;
  return detail::make_result<double>(
      "rrm", h.shape(), std::move(y), {&h, &theta_raw, &alpha_t},
      [h, theta_raw, alpha_t, f = std::move(f), diff, theta, alpha](const Array<double>& g) {
        const Index c = f.u.rows(), n = f.v.rows();
        const RowMatrix<double> gm = Eigen::Map<const RowMatrix<double>>(g.data(), c, n);
        Array<double> ga(1);
        ga[0] = (gm.array() * diff.array()).sum();
        // d/dS'_i of <g, alpha * U diag(S') V^T> is alpha * u_i^T g v_i.
        const Eigen::VectorXd gs_thr = alpha * (f.u.transpose() * gm * f.v).diagonal();
        Eigen::VectorXd gs(gs_thr.size());
        double gtheta = 0.0;
        for (Index i = 0; i < gs.size(); ++i) {
          const bool active = f.s[i] > theta;
          gs[i] = active ? gs_thr[i] : 0.0;
          if (active) gtheta -= gs_thr[i];
        }
        const double r = theta_raw.value()[0];
        const double sig = r >= 0 ? 1.0 / (1.0 + std::exp(-r)) : std::exp(r) / (1.0 + std::exp(r));
        Array<double> gt(1);
        gt[0] = gtheta * sig;
        Array<double> gh(c * n);
        Eigen::Map<RowMatrix<double>>(gh.data(), c, n) = (1.0 - alpha) * gm + f.u * gs.asDiagonal() * f.v.transpose();
        detail::push_grad<double>(h.storage(), gh);
        detail::push_grad<double>(theta_raw.storage(), gt);
        detail::push_grad<double>(alpha_t.storage(), ga);
      });
}

void write_spectrum(std::ostream& os, const RrmTrace& trace) {
  os << "index,s,s'\n";
  for (Index i = 0; i < trace.s.size(); ++i) os << i << ',' << trace.s[i] << ',' << trace.s_thresholded[i] << '\n';
}

}  // namespace samic
