#include "gpcontract/drift_gp.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace gpcontract {
namespace {

using testing::random_vector;

Eigen::VectorXd v1(double a) { return Eigen::VectorXd::Constant(1, a); }

DriftModel single_point(double y, double sigma = 0.0) {
  DriftDataset d;
  d.points = {v1(0.0)};
  d.targets = Eigen::MatrixXd::Constant(1, 1, y);
  d.sigma_y = Eigen::VectorXd::Constant(1, sigma);
  return fit_drift(d, {Kernel::unit_gaussian(1)});
}

DriftModel random_model(std::mt19937_64& rng, int n, int count, double noise) {
  DriftDataset d;
  for (int j = 0; j < count; ++j) d.points.push_back(random_vector(rng, n));
  d.targets = testing::random_matrix(rng, count, n, -2.0, 2.0);
  d.sigma_y = Eigen::VectorXd::Constant(n, noise);
  std::vector<Kernel> ks(n, Kernel::unit_gaussian(n));
  return fit_drift(d, ks);
}

TEST(FitDrift, SinglePointInterpolates) {
  const DriftModel m = single_point(3.0);
  EXPECT_NEAR(m.drift(v1(0.0))[0], 3.0, 1e-14);
}

TEST(FitDrift, ZeroTargets) {
  DriftDataset d;
  d.points = {Eigen::Vector2d(0, 0), Eigen::Vector2d(1, 0)};
  d.targets = Eigen::MatrixXd::Zero(2, 2);
  d.sigma_y = Eigen::Vector2d(0.1, 0.1);
  const DriftModel m =
      fit_drift(d, {Kernel::unit_gaussian(2), Kernel::unit_gaussian(2)});
  const auto [mu, j] = drift_mean_and_jac(m, Eigen::Vector2d(0.3, -0.2));
  EXPECT_TRUE(mu.isZero(0.0));
  EXPECT_TRUE(j.isZero(0.0));
}

TEST(FitDrift, ResidualOfWeights) {
  std::mt19937_64 rng(2);
  DriftDataset d;
  for (int j = 0; j < 15; ++j) d.points.push_back(random_vector(rng, 2));
  d.targets = testing::random_matrix(rng, 15, 2);
  d.sigma_y = Eigen::Vector2d(0.05, 0.2);
  const Kernel k = Kernel::unit_gaussian(2);
  const DriftModel m = fit_drift(d, {k, k});
  for (int i = 0; i < 2; ++i) {
    Eigen::MatrixXd g(15, 15);
    for (int a = 0; a < 15; ++a) {
      for (int b = 0; b < 15; ++b) g(a, b) = k.eval(d.points[a], d.points[b]);
    }
    g.diagonal().array() += d.sigma_y[i] * d.sigma_y[i];
    const Eigen::VectorXd r = g * m.components()[i].weights - d.targets.col(i);
    EXPECT_LT(r.norm(), 1e-8 * d.targets.col(i).norm());
  }
}

TEST(FitDrift, InputErrors) {
  DriftDataset d;
  d.points = {v1(0.0)};
  d.targets = Eigen::MatrixXd::Constant(1, 1, 1.0);
  d.sigma_y = Eigen::VectorXd::Constant(1, -1.0);
  EXPECT_THROW(fit_drift(d, {Kernel::unit_gaussian(1)}), Error);
  d.sigma_y[0] = 0.0;
  d.targets(0, 0) = std::nan("");
  EXPECT_THROW(fit_drift(d, {Kernel::unit_gaussian(1)}), Error);
  d.targets(0, 0) = 1.0;
  EXPECT_THROW(fit_drift(d, {Kernel::unit_gaussian(2)}), Error);
  EXPECT_THROW(fit_drift_with_input(d, {Kernel::unit_gaussian(1)}), Error);
}

TEST(DriftJacobian, SinglePointClosedForm) {
  const DriftModel m = single_point(1.0);
  for (double x : {-1.3, 0.0, 0.4, 2.0}) {
    EXPECT_NEAR(m.drift_jacobian(v1(x))(0, 0), -x * std::exp(-x * x / 2),
                1e-15);
  }
  DriftDataset d;
  d.points = {Eigen::Vector2d::Zero()};
  d.targets = Eigen::MatrixXd::Ones(1, 2);
  d.sigma_y = Eigen::Vector2d::Zero();
  const DriftModel m2 =
      fit_drift(d, {Kernel::unit_gaussian(2), Kernel::unit_gaussian(2)});
  const Eigen::Vector2d x(0.5, -1.0);
  const Eigen::RowVectorXd expect =
      -x.transpose() * std::exp(-x.squaredNorm() / 2);
  EXPECT_LT((m2.drift_jacobian(x).row(0) - expect).norm(), 1e-15);
  EXPECT_LT((m2.drift_jacobian(x).row(1) - expect).norm(), 1e-15);
}

TEST(DriftJacobian, MatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const DriftModel m = random_model(rng, 2, 12, 0.1);
  for (int t = 0; t < 50; ++t) {
    const Eigen::VectorXd x = random_vector(rng, 2, -2.5, 2.5);
    const Eigen::MatrixXd j = m.drift_jacobian(x);
    for (int i = 0; i < 2; ++i) {
      const Eigen::RowVectorXd fd = testing::fd_gradient(
          [&](const Eigen::VectorXd& p) { return m.drift(p)[i]; }, x, 1e-5);
      EXPECT_LT(testing::rel_err(j.row(i), fd), 1e-6) << t;
    }
  }
}

TEST(Variance, ClosedFormsAndPrior) {
  const DriftModel m = single_point(2.0);
  EXPECT_NEAR(drift_variances(m, v1(0.0)).variance[0], 0.0, 1e-15);
  EXPECT_NEAR(drift_variances(m, v1(1.0)).variance[0], 1.0 - std::exp(-1.0),
              1e-15);
  EXPECT_NEAR(drift_variances(m, v1(1.0)).sigma[0],
              std::sqrt(1.0 - std::exp(-1.0)), 1e-15);
  // Gradient covariance: 1 - x^2 exp(-x^2).
  EXPECT_NEAR(drift_variances(m, v1(1.0)).grad_cov[0](0, 0),
              1.0 - std::exp(-1.0), 1e-15);

  DriftDataset empty;
  empty.targets.resize(0, 1);
  empty.sigma_y = Eigen::VectorXd::Zero(1);
  const DriftModel prior = fit_drift(
      empty, {Kernel::squared_exponential(2.5, Eigen::MatrixXd::Identity(1, 1))});
  EXPECT_DOUBLE_EQ(drift_variances(prior, v1(0.7)).variance[0], 2.5);
  EXPECT_DOUBLE_EQ(sigma_jacobian(prior, v1(0.7)).rows(0, 0), 0.0);
}

TEST(Variance, AddingDataNeverIncreasesVariance) {
  std::mt19937_64 rng(8);
  const Kernel k = Kernel::unit_gaussian(2);
  for (int t = 0; t < 20; ++t) {
    DriftDataset d;
    for (int j = 0; j < 8; ++j) d.points.push_back(random_vector(rng, 2));
    d.targets = Eigen::MatrixXd::Zero(8, 1).replicate(1, 2);
    d.sigma_y = Eigen::Vector2d(0.05, 0.05);
    const DriftModel small = fit_drift(d, {k, k});
    d.points.push_back(random_vector(rng, 2));
    d.targets = Eigen::MatrixXd::Zero(9, 2);
    const DriftModel big = fit_drift(d, {k, k});
    for (int s = 0; s < 10; ++s) {
      const Eigen::VectorXd x = random_vector(rng, 2, -3, 3);
      EXPECT_LE(drift_variances(big, x).variance[0],
                drift_variances(small, x).variance[0] + 1e-9);
    }
  }
}

TEST(Variance, GradientCovariancePsd) {
  std::mt19937_64 rng(9);
  const DriftModel m = random_model(rng, 2, 20, 0.01);
  for (int t = 0; t < 50; ++t) {
    const DriftVariances v = drift_variances(m, random_vector(rng, 2, -3, 3));
    for (int i = 0; i < 2; ++i) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(v.grad_cov[i]);
      EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
      EXPECT_LT((v.grad_sqrt[i] * v.grad_sqrt[i] -
                 v.grad_cov[i].cwiseMax(-1.0)).norm(),
                1e-8);
    }
  }
}

TEST(SigmaJacobian, ClosedForm) {
  const DriftModel m = single_point(2.0);
  const SigmaJacobian s = sigma_jacobian(m, v1(1.0));
  EXPECT_FALSE(s.floored[0]);
  const double expect = std::exp(-1.0) / std::sqrt(1.0 - std::exp(-1.0));
  EXPECT_NEAR(s.rows(0, 0), expect, 1e-14);
  EXPECT_NEAR(expect, 0.462706, 1e-6);
}

TEST(SigmaJacobian, MatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  const DriftModel m = random_model(rng, 2, 6, 0.0);
  int checked = 0;
  while (checked < 20) {
    const Eigen::VectorXd x = random_vector(rng, 2, -3, 3);
    bool near = false;
    for (const auto& p : m.points()) near |= (p - x).norm() < 0.2;
    if (near) continue;
    const SigmaJacobian s = sigma_jacobian(m, x);
    for (int i = 0; i < 2; ++i) {
      const Eigen::RowVectorXd fd = testing::fd_gradient(
          [&](const Eigen::VectorXd& p) { return drift_variances(m, p).sigma[i]; },
          x, 1e-6);
      EXPECT_LT(testing::rel_err(s.rows.row(i), fd), 1e-4);
    }
    ++checked;
  }
}

TEST(SigmaJacobian, FloorAtTrainingPoint) {
  const DriftModel m = single_point(2.0);
  const SigmaJacobian s = sigma_jacobian(m, v1(0.0));
  EXPECT_TRUE(s.floored[0]);
  EXPECT_TRUE(std::isfinite(s.rows(0, 0)));
  EXPECT_GE(s.rows(0, 0), 0.0);
}

TEST(FixedComponent, ZeroVarianceAndExactRow) {
  std::mt19937_64 rng(1);
  const SystemModel osc = make_oscillator();
  const DriftDataset d = make_drift_dataset(osc, Box::cube(2, -3, 3).grid(11),
                                            Eigen::Vector2d(0.01, 0.01), rng);
  FixedComponent row;
  row.c = Eigen::RowVector2d(0, 1);
  const Kernel k = Kernel::unit_gaussian(2);
  const DriftModel m = fit_drift(d, {k, k}, {row, std::nullopt}, osc.euler_dt);
  const Eigen::Vector2d x(0.4, -1.1);
  EXPECT_DOUBLE_EQ(m.drift(x)[0], osc.drift(x)[0]);
  EXPECT_EQ(m.drift_jacobian(x).row(0), osc.drift_jacobian(x).row(0));
  const DriftVariances v = drift_variances(m, x);
  EXPECT_EQ(v.sigma[0], 0.0);
  EXPECT_TRUE(v.grad_cov[0].isZero(0.0));
}

TEST(Oscillator, LearnedFieldAccurateInInterior) {
  std::mt19937_64 rng(7);
  const SystemModel osc = make_oscillator();
  const DriftDataset d = make_drift_dataset(osc, Box::cube(2, -3, 3).grid(11),
                                            Eigen::Vector2d(0.01, 0.01), rng);
  const Kernel k = Kernel::unit_gaussian(2);
  FixedComponent row;
  row.c = Eigen::RowVector2d(0, 1);
  const DriftModel m = fit_drift(d, {k, k}, {row, std::nullopt}, osc.euler_dt);
  double max_err = 0.0, max_f = 0.0;
  for (const auto& x : Box::cube(2, -2, 2).grid(41)) {
    const double g = (osc.drift(x)[1] - x[1]) / osc.euler_dt;
    max_f = std::max(max_f, std::abs(g));
    max_err = std::max(max_err, std::abs(m.component_mean(1, x) - g));
  }
  EXPECT_LT(max_err, 0.05 * max_f) << max_err << " vs " << max_f;
}

TEST(InputModel, ZeroInputsMatchPlainFit) {
  std::mt19937_64 rng(3);
  DriftDataset d;
  for (int j = 0; j < 10; ++j) d.points.push_back(random_vector(rng, 1));
  d.targets = testing::random_matrix(rng, 10, 1);
  d.sigma_y = Eigen::VectorXd::Constant(1, 0.05);
  const DriftModel plain = fit_drift(d, {Kernel::unit_gaussian(1)});
  d.inputs = Eigen::VectorXd::Zero(10);
  const DriftModel with = fit_drift_with_input(d, {Kernel::unit_gaussian(1)});
  for (double x : {-1.0, 0.2, 1.7}) {
    EXPECT_DOUBLE_EQ(plain.drift(v1(x))[0], with.drift(v1(x))[0]);
  }
  EXPECT_EQ(with.input_gain()[0], 0.0);
}

TEST(InputModel, AffineInInputAndRecoversGain) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> noise(0.0, 0.01);
  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  DriftDataset d;
  d.inputs.resize(50);
  d.targets.resize(50, 1);
  for (int j = 0; j < 50; ++j) {
    const double x = ux(rng), u = ux(rng);
    d.points.push_back(v1(x));
    d.inputs[j] = u;
    d.targets(j, 0) = 2.0 * x + 3.0 * u + noise(rng);
  }
  d.sigma_y = Eigen::VectorXd::Constant(1, 0.01);
  const DriftModel m = fit_drift_with_input(d, {Kernel::unit_gaussian(1)});
  EXPECT_NEAR(m.input_gain()[0], 3.0, 0.1);
  const Eigen::VectorXd x = v1(0.3);
  for (double a : {-2.0, 0.5, 3.0}) {
    const double base = input_model_mean(m, 0, x, 0.0);
    EXPECT_NEAR(input_model_mean(m, 0, x, a * 0.7) - base,
                a * (input_model_mean(m, 0, x, 0.7) - base), 1e-12);
  }
  const SystemModel s = to_system_model(m, Eigen::VectorXd::Zero(1), v1(0.0));
  EXPECT_NEAR(s.b[0], m.input_gain()[0], 0.0);
}

TEST(DataGeneration, NoiselessTargetsAreExactAndSeeded) {
  const SystemModel osc = make_oscillator();
  const PointSet pts = Box::cube(2, -3, 3).grid(11);
  std::mt19937_64 a(7), b(7);
  const DriftDataset clean = make_drift_dataset(osc, pts, Eigen::Vector2d::Zero(), a);
  for (std::size_t j = 0; j < pts.size(); ++j) {
    const Eigen::Vector2d x = pts[j];
    const double h = -x[0] + std::pow(x[0], 3) - std::pow(x[0], 5) / 5 +
                     std::pow(x[0], 7) / 105;
    EXPECT_NEAR(clean.targets(j, 1), -x[0] + h * x[1], 1e-9);
  }
  std::mt19937_64 c(7), e(7);
  const DriftDataset n1 = make_drift_dataset(osc, pts, Eigen::Vector2d(0, 0.01), c);
  const DriftDataset n2 = make_drift_dataset(osc, pts, Eigen::Vector2d(0, 0.01), e);
  EXPECT_EQ(n1.targets, n2.targets);
  EXPECT_NE(n1.targets, clean.targets);
  (void)b;
}

}  // namespace
}  // namespace gpcontract
