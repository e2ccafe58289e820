#include "gpcontract/deriv_gp.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace gpcontract {
namespace {

using testing::fd_gradient;
using testing::random_vector;

Eigen::VectorXd v1(double a) { return Eigen::VectorXd::Constant(1, a); }
Eigen::RowVectorXd r1(double a) { return Eigen::RowVectorXd::Constant(1, a); }

DerivativeDataset single_point_dataset() {
  DerivativeDataset d;
  d.points = {v1(0.0)};
  d.targets = {r1(-2.0)};
  return d;
}

// Random dataset of `count` points on a jittered grid (pairwise distinct).
DerivativeDataset random_dataset(std::mt19937_64& rng, int n, int count,
                                 double sigma_p = 0.0) {
  DerivativeDataset d;
  d.sigma_p = sigma_p;
  for (int i = 0; i < count; ++i) {
    Eigen::VectorXd p = random_vector(rng, n, -0.2, 0.2);
    p[0] += 0.9 * i - 0.45 * count;
    d.points.push_back(p);
    d.targets.push_back(random_vector(rng, n, -3, 3).transpose());
  }
  return d;
}

TEST(GramTest, SmallCases) {
  const Kernel k = Kernel::unit_gaussian(1);
  EXPECT_TRUE(build_gram_k0(k, {v1(0)}).k0.isApprox(Eigen::MatrixXd::Ones(1, 1)));
  const DerivativeGram g = build_gram_k0(k, {v1(0), v1(1)});
  EXPECT_NEAR((g.k0 - Eigen::MatrixXd::Identity(2, 2)).norm(), 0.0, 1e-16);
  EXPECT_FALSE(g.has_duplicate_points);
  EXPECT_TRUE(build_gram_k0(k, {v1(0.5), v1(0.5)}).has_duplicate_points);
}

TEST(GramTest, ExactlySymmetric) {
  std::mt19937_64 rng(1);
  const Kernel k = Kernel::squared_exponential(
      1.7, testing::random_spd(rng, 3));
  PointSet pts;
  for (int i = 0; i < 8; ++i) pts.push_back(random_vector(rng, 3));
  const Eigen::MatrixXd k0 = build_gram_k0(k, pts).k0;
  EXPECT_EQ((k0 - k0.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(GramTest, RejectsEmptyAndMismatchedPoints) {
  const Kernel k = Kernel::unit_gaussian(2);
  EXPECT_THROW(build_gram_k0(k, {}), Error);
  EXPECT_THROW(build_gram_k0(k, {Eigen::Vector2d::Zero(), v1(0)}), Error);
}

TEST(FitTest, SinglePointHandSolve) {
  const Kernel k = Kernel::unit_gaussian(1);
  const DerivativeController c = fit(k, single_point_dataset());
  ASSERT_EQ(c.weights().size(), 1);
  EXPECT_NEAR(c.weights()[0], -2.0, 1e-15);
  for (double x : {-1.3, 0.0, 0.4, 1.0}) {
    EXPECT_NEAR(c.eval_control(v1(x)), -2.0 * x * std::exp(-0.5 * x * x),
                1e-14);
  }
  EXPECT_NEAR(c.eval_control(v1(1.0)), -1.21306, 1e-5);
  EXPECT_NEAR(c.eval_control_grad(v1(0.0))[0], -2.0, 1e-14);
}

TEST(FitTest, ZeroDataGivesZeroController) {
  std::mt19937_64 rng(2);
  DerivativeDataset d = random_dataset(rng, 2, 4);
  for (auto& t : d.targets) t.setZero();
  const DerivativeController c = fit(Kernel::unit_gaussian(2), d);
  EXPECT_EQ(c.weights().norm(), 0.0);
  for (int i = 0; i < 10; ++i) {
    const Eigen::VectorXd x = random_vector(rng, 2);
    EXPECT_EQ(c.eval_control(x), 0.0);
    EXPECT_EQ(c.eval_control_grad(x).norm(), 0.0);
  }
}

TEST(FitTest, InterpolatesGradientData) {
  std::mt19937_64 rng(3);
  const Kernel k = Kernel::unit_gaussian(2);
  for (int trial = 0; trial < 5; ++trial) {
    const DerivativeDataset d = random_dataset(rng, 2, 5);
    FitOptions opts;
    opts.auto_jitter = false;
    const DerivativeController c = fit(k, d, opts);
    EXPECT_EQ(c.regularization(), 0.0);
    for (int i = 0; i < d.size(); ++i) {
      EXPECT_LT((c.eval_control_grad(d.points[i]) - d.targets[i])
                    .cwiseAbs()
                    .maxCoeff(),
                1e-8);
    }
  }
}

TEST(FitTest, WeightsSolveRegularizedSystem) {
  std::mt19937_64 rng(4);
  const Kernel k = Kernel::unit_gaussian(2);
  const DerivativeDataset d = random_dataset(rng, 2, 6, 0.1);
  const DerivativeController c = fit(k, d);
  const Eigen::MatrixXd k0 = build_gram_k0(k, d.points).k0;
  const Eigen::VectorXd y = d.stacked_targets();
  const Eigen::VectorXd r =
      (k0 + 0.01 * Eigen::MatrixXd::Identity(12, 12)) * c.weights() - y;
  EXPECT_LT(r.norm(), 1e-8 * y.norm());
}

TEST(FitTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const Kernel k = Kernel::squared_exponential(
      1.4, testing::random_spd(rng, 2));
  const DerivativeController c = fit(k, random_dataset(rng, 2, 6, 0.05));
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::VectorXd x = random_vector(rng, 2, -3, 3);
    const Eigen::RowVectorXd fd = fd_gradient(
        [&](const Eigen::VectorXd& y) { return c.eval_control(y); }, x);
    EXPECT_LT(testing::rel_err(c.eval_control_grad(x), fd), 1e-6);
  }
}

TEST(FitTest, LinearInData) {
  std::mt19937_64 rng(6);
  const Kernel k = Kernel::unit_gaussian(2);
  DerivativeDataset d1 = random_dataset(rng, 2, 5, 0.1);
  DerivativeDataset d2 = d1;
  for (auto& t : d2.targets) t = random_vector(rng, 2).transpose();
  const double a = 0.7, b = -1.9;
  DerivativeDataset mix = d1;
  for (int i = 0; i < d1.size(); ++i) {
    mix.targets[i] = a * d1.targets[i] + b * d2.targets[i];
  }
  const auto c1 = fit(k, d1), c2 = fit(k, d2), cm = fit(k, mix);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd x = random_vector(rng, 2, -3, 3);
    EXPECT_NEAR(cm.eval_control(x),
                a * c1.eval_control(x) + b * c2.eval_control(x), 1e-9);
    EXPECT_LT((cm.eval_control_grad(x) - a * c1.eval_control_grad(x) -
               b * c2.eval_control_grad(x))
                  .norm(),
              1e-9);
  }
}

TEST(FitTest, RejectsNaNTargetsAndSingularGram) {
  const Kernel k = Kernel::unit_gaussian(1);
  DerivativeDataset d = single_point_dataset();
  d.targets[0][0] = std::nan("");
  EXPECT_THROW(fit(k, d), Error);

  DerivativeDataset dup;
  dup.points = {v1(0.3), v1(0.3)};
  dup.targets = {r1(1.0), r1(2.0)};
  FitOptions strict;
  strict.auto_jitter = false;
  try {
    fit(k, dup, strict);
    FAIL() << "expected factorization failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNumericalFailure);
    EXPECT_NE(std::string(e.what()).find("jitter"), std::string::npos);
  }
  // The automatic retry recovers with a small jitter.
  const DerivativeController c = fit(k, dup);
  EXPECT_GT(c.regularization(), 0.0);
}

TEST(AnchorTest, OffsetModeZeroAtAnchorGradientUnchanged) {
  std::mt19937_64 rng(7);
  const Kernel k = Kernel::unit_gaussian(2);
  DerivativeController c = fit(k, random_dataset(rng, 2, 4));
  const Eigen::VectorXd x = random_vector(rng, 2);
  const Eigen::RowVectorXd g = c.eval_control_grad(x);
  const Eigen::VectorXd star = random_vector(rng, 2);
  c.anchor_at(star);
  EXPECT_EQ(c.eval_control(star), 0.0);
  EXPECT_EQ((c.eval_control_grad(x) - g).norm(), 0.0);
}

TEST(FitWithValuesTest, ValueOnlyInterpolates) {
  const Kernel k = Kernel::unit_gaussian(1);
  DerivativeDataset none;
  none.points = {v1(3.0)};
  none.targets = {r1(0.0)};
  const DerivativeController c =
      fit_with_values(k, none, {{v1(0.0), 5.0}}, 0.0);
  EXPECT_NEAR(c.eval_control(v1(0.0)), 5.0, 1e-12);
}

TEST(FitWithValuesTest, DerivativePlusAnchorHandSolve) {
  const Kernel k = Kernel::unit_gaussian(1);
  const DerivativeController c =
      fit_with_values(k, single_point_dataset(), {{v1(0.0), 0.0}}, 0.0);
  EXPECT_NEAR(c.eval_control(v1(0.0)), 0.0, 1e-15);
  EXPECT_NEAR(c.eval_control_grad(v1(0.0))[0], -2.0, 1e-14);
  ASSERT_EQ(c.value_weights().size(), 1);
  EXPECT_NEAR(c.value_weights()[0], 0.0, 1e-15);
}

TEST(FitWithValuesTest, EmptyValueListMatchesFit) {
  std::mt19937_64 rng(8);
  const Kernel k = Kernel::unit_gaussian(2);
  const DerivativeDataset d = random_dataset(rng, 2, 5);
  const auto a = fit(k, d);
  const auto b = fit_with_values(k, d, {}, 0.0);
  EXPECT_EQ((a.weights() - b.weights()).norm(), 0.0);
}

TEST(FitWithValuesTest, InterpolatesValuesAndGradients) {
  std::mt19937_64 rng(9);
  const Kernel k = Kernel::unit_gaussian(2);
  const DerivativeDataset d = random_dataset(rng, 2, 4);
  std::vector<ValueObservation> vals = {{Eigen::Vector2d(0.1, 2.5), 1.5},
                                        {Eigen::Vector2d(-1.0, -2.0), -0.7}};
  const DerivativeController c = fit_with_values(k, d, vals, 0.0);
  for (const auto& v : vals) EXPECT_NEAR(c.eval_control(v.x), v.y, 1e-9);
  for (int i = 0; i < d.size(); ++i) {
    EXPECT_LT((c.eval_control_grad(d.points[i]) - d.targets[i]).norm(), 1e-8);
  }
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd x = random_vector(rng, 2, -3, 3);
    const Eigen::RowVectorXd fd = fd_gradient(
        [&](const Eigen::VectorXd& y) { return c.eval_control(y); }, x);
    EXPECT_LT(testing::rel_err(c.eval_control_grad(x), fd), 1e-6);
  }
}

TEST(ResponseMapTest, MatchesFittedController) {
  std::mt19937_64 rng(10);
  const Kernel k = Kernel::unit_gaussian(2);
  const DerivativeDataset d = random_dataset(rng, 2, 5, 0.2);
  PointSet eval;
  for (int i = 0; i < 7; ++i) eval.push_back(random_vector(rng, 2));
  const ResponseMaps maps = response_maps(k, d.points, d.sigma_p, eval, true);
  const DerivativeController c = fit(k, d);
  const Eigen::VectorXd grads = maps.gradient * d.stacked_targets();
  const Eigen::VectorXd vals = maps.value * d.stacked_targets();
  for (int e = 0; e < 7; ++e) {
    EXPECT_LT((grads.segment(2 * e, 2).transpose() -
               c.eval_control_grad(eval[e])).norm(), 1e-10);
    EXPECT_NEAR(vals[e], c.eval_control(eval[e]), 1e-10);
  }
  const ResponseMaps exact = response_maps(k, d.points, 0.0, d.points, false);
  EXPECT_TRUE(exact.gradient_is_identity);
}

}  // namespace
}  // namespace gpcontract
