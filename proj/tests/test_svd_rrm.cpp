#include "gradcheck.hpp"
#include "samic/svd_rrm.hpp"

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include <sstream>

namespace samic {
namespace {

using testing::gradcheck;
using testing::project;
using testing::random_tensor;

double inverse_softplus(double t) { return t + std::log(-std::expm1(-t)); }

void expect_valid_factors(const Eigen::MatrixXd& m, const SvdFactors& f) {
  const Index r = std::min(m.rows(), m.cols());
  ASSERT_EQ(f.u.cols(), r);
  ASSERT_EQ(f.v.cols(), r);
  EXPECT_LE((f.u.transpose() * f.u - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((f.v.transpose() * f.v - Eigen::MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff(), 1e-6);
  for (Index i = 0; i < r; ++i) {
    EXPECT_GE(f.s[i], 0.0);
    if (i > 0) {
      EXPECT_GE(f.s[i - 1], f.s[i]);
    }
  }
  const double norm = m.norm();
  const double resid = (low_rank_reconstruct(f.u, f.s, f.v) - m).norm();
  EXPECT_LE(norm > 0 ? resid / norm : resid, 1e-6);
}

TEST(Svd, IdentityAndDiagonal) {
  SvdFactors id = svd(Eigen::MatrixXd::Identity(2, 2));
  EXPECT_NEAR(id.s[0], 1.0, 1e-15);
  EXPECT_NEAR(id.s[1], 1.0, 1e-15);

  Eigen::MatrixXd d(2, 2);
  d << 3, 0, 0, 1;
  SvdFactors f = svd(d);
  EXPECT_NEAR(f.s[0], 3.0, 1e-15);
  EXPECT_NEAR(f.s[1], 1.0, 1e-15);
  EXPECT_NEAR(std::abs(f.u(0, 0)), 1.0, 1e-15);
  EXPECT_NEAR(std::abs(f.v(1, 1)), 1.0, 1e-15);
  EXPECT_NEAR(f.u(1, 0), 0.0, 1e-15);

  Eigen::MatrixXd swapped(2, 2);
  swapped << 1, 0, 0, 3;
  SvdFactors g = svd(swapped);
  EXPECT_NEAR(g.s[0], 3.0, 1e-15);
  EXPECT_NEAR(std::abs(g.u(1, 0)), 1.0, 1e-15);
}

TEST(Svd, RandomShapesAgreeWithEigenOracle) {
  Rng rng(3);
  std::uniform_int_distribution<int> dim(1, 40);
  for (int trial = 0; trial < 40; ++trial) {
    const Index rows = dim(rng), cols = dim(rng);
    Eigen::MatrixXd m(rows, cols);
    std::normal_distribution<double> nd;
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
    SvdFactors f = svd(m);
    expect_valid_factors(m, f);
    Eigen::JacobiSVD<Eigen::MatrixXd> oracle(m);
    EXPECT_LE((oracle.singularValues() - f.s).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, f.s[0]));
  }
  Eigen::MatrixXd wide(8, 64);
  std::normal_distribution<double> nd;
  for (Index i = 0; i < wide.size(); ++i) wide.data()[i] = nd(rng);
  expect_valid_factors(wide, svd(wide));
}

TEST(Svd, RankDeficientKeepsOrthonormalFactors) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(5, 9);
  m.row(1).setConstant(2.0);
  m.row(3) = m.row(1) * -0.5;
  SvdFactors f = svd(m);
  expect_valid_factors(m, f);
  EXPECT_NEAR(f.s[1], 0.0, 1e-12);
  expect_valid_factors(Eigen::MatrixXd::Zero(3, 4), svd(Eigen::MatrixXd::Zero(3, 4)));
}

TEST(Svd, NonConvergenceReportsResidual) {
  Rng rng(4);
  Eigen::MatrixXd m(12, 30);
  std::normal_distribution<double> nd;
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  try {
    svd(m, 1);
    FAIL() << "expected non-convergence";
  } catch (const SvdNonConvergence& e) {
    EXPECT_EQ(e.sweeps(), 1);
    EXPECT_GT(e.residual(), 1e-12);
  }
}

TEST(SoftThreshold, Examples) {
  Eigen::VectorXd s(2);
  s << 3, 1;
  EXPECT_EQ(soft_threshold(s, 0.0), s);
  Eigen::VectorXd t = soft_threshold(s, 2.0);
  EXPECT_EQ(t[0], 1.0);
  EXPECT_EQ(t[1], 0.0);
  EXPECT_TRUE(soft_threshold(s, 3.0).isZero(0.0));
}

TEST(LowRankReconstruct, Examples) {
  Eigen::MatrixXd d(2, 2);
  d << 3, 0, 0, 1;
  SvdFactors f = svd(d);
  EXPECT_LE((low_rank_reconstruct(f.u, f.s, f.v) - d).norm() / d.norm(), 1e-6);
  Eigen::VectorXd s1(2);
  s1 << 1, 0;
  Eigen::MatrixXd expected(2, 2);
  expected << 1, 0, 0, 0;
  EXPECT_LE((low_rank_reconstruct(f.u, s1, f.v) - expected).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_TRUE(low_rank_reconstruct(f.u, Eigen::VectorXd::Zero(2), f.v).isZero(0.0));
  EXPECT_THROW(low_rank_reconstruct(f.u, Eigen::VectorXd::Zero(3), f.v), std::invalid_argument);
}

TEST(Rrm, BlendExamples) {
  Tensord h = Tensord::from({2, 1, 2}, {3, 0, 0, 1});
  RrmParams p = RrmParams::make();
  p.alpha.mutable_value()[0] = 0.0;
  EXPECT_TRUE((rrm_forward(h, p).value() == h.value()).all());

  p.theta_raw.mutable_value()[0] = inverse_softplus(2.0);
  p.alpha.mutable_value()[0] = 1.0;
  Tensord full = rrm_forward(h, p);
  EXPECT_NEAR(full.value()[0], 1.0, 1e-12);
  EXPECT_NEAR(full.value()[3], 0.0, 1e-12);

  p.alpha.mutable_value()[0] = 0.5;
  Tensord mid = rrm_forward(h, p);
  const double expected[] = {2.0, 0.0, 0.0, 0.5};
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(mid.value()[i], expected[i], 1e-12);
}

TEST(Rrm, ZeroThresholdIsIdentityForAnyAlpha) {
  Rng rng(5);
  RrmParams p = RrmParams::make();
  p.theta_raw.mutable_value()[0] = -60.0;
  for (double alpha : {-1.0, 0.1, 0.5, 1.0, 3.0}) {
    p.alpha.mutable_value()[0] = alpha;
    Tensord h = random_tensor({6, 4, 5}, rng);
    const double rel = (rrm_forward(h, p).value() - h.value()).matrix().norm() / h.value().matrix().norm();
    EXPECT_LE(rel, 1e-5);
  }
}

TEST(Rrm, RankMonotoneAndEnergyBounded) {
  Rng rng(6);
  Tensord h = random_tensor({8, 6, 6}, rng);
  RrmParams p = RrmParams::make();
  p.alpha.mutable_value()[0] = 1.0;
  Index last_rank = 9;
  for (double theta = 0.01; theta < 12.0; theta *= 1.5) {
    p.theta_raw.mutable_value()[0] = inverse_softplus(theta);
    RrmTrace tr;
    Tensord y = rrm_forward(h, p, &tr);
    const Index rank = (tr.s_thresholded.array() > 0).count();
    EXPECT_LE(rank, last_rank);
    last_rank = rank;
    EXPECT_LE(y.value().matrix().norm(), h.value().matrix().norm() + 1e-12);
  }
}

TEST(Rrm, GradcheckAlphaAndThetaAwayFromKinks) {
  Rng rng(7);
  Tensord h = random_tensor({5, 3, 4}, rng);
  RrmParams p = RrmParams::make();
  p.alpha.mutable_value()[0] = 0.3;
  RrmTrace tr;
  rrm_forward(h, p, &tr);
  // Place theta between two singular values, far from both.
  const double theta = 0.5 * (tr.s[1] + tr.s[2]);
  ASSERT_GT(std::min(tr.s[1] - theta, theta - tr.s[2]), 1e-3);
  p.theta_raw.mutable_value()[0] = inverse_softplus(theta);
  auto ra = gradcheck({p.alpha}, [&] { return project(rrm_forward(h, p)); });
  EXPECT_LE(ra.max_rel_err, 1e-4);
  auto rt = gradcheck({p.theta_raw}, [&] { return project(rrm_forward(h, p)); });
  EXPECT_LE(rt.max_rel_err, 1e-3);
}

TEST(Rrm, GradientThroughSingularValuesMatchesSpectralFormula) {
  // For the loss sum(y * g), the H gradient is (1 - alpha) g + alpha * U diag(u_i^T g v_i * active) V^T.
  Rng rng(8);
  Tensord h = random_tensor({3, 2, 3}, rng);
  h.set_requires_grad(true);
  RrmParams p = RrmParams::make();
  p.alpha.mutable_value()[0] = 0.4;
  Tensord g = random_tensor({3, 2, 3}, rng);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(mul(rrm_forward(h, p), g)));
  const Eigen::MatrixXd hm = Eigen::Map<const RowMatrix<double>>(h.value().data(), 3, 6);
  const Eigen::MatrixXd gm = Eigen::Map<const RowMatrix<double>>(g.value().data(), 3, 6);
  SvdFactors f = svd(hm);
  Eigen::VectorXd d = 0.4 * (f.u.transpose() * gm * f.v).diagonal();
  for (Index i = 0; i < d.size(); ++i)
    if (f.s[i] <= p.threshold()) d[i] = 0;
  const Eigen::MatrixXd expected = 0.6 * gm + f.u * d.asDiagonal() * f.v.transpose();
  const Eigen::MatrixXd got = Eigen::Map<const RowMatrix<double>>(h.grad().data(), 3, 6);
  EXPECT_LE((got - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Rrm, SpectrumCsv) {
  RrmTrace tr;
  tr.s = Eigen::Vector2d(3, 1);
  tr.s_thresholded = Eigen::Vector2d(1, 0);
  std::ostringstream os;
  write_spectrum(os, tr);
  EXPECT_EQ(os.str(), "index,s,s'\n0,3,1\n1,1,0\n");
}

}  // namespace
}  // namespace samic
