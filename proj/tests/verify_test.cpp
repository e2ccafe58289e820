#include "gpcontract/verify.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace gpcontract {
namespace {

// u(x) = -2x exactly: a linear kernel gives a globally linear control.
DerivativeController toy_controller() {
  DerivativeDataset d;
  d.points = {Eigen::VectorXd::Zero(1)};
  d.targets = {Eigen::RowVectorXd::Constant(1, -2.0)};
  DerivativeController c =
      fit(Kernel::linear(1.0, Eigen::MatrixXd::Identity(1, 1)), d);
  c.anchor_at(Eigen::VectorXd::Zero(1));
  return c;
}

SystemModel toy() {
  return make_linear(Eigen::MatrixXd::Constant(1, 1, 2.0),
                     Eigen::VectorXd::Ones(1));
}

// A controller with zero gradient everywhere.
DerivativeController zero_controller(int n) {
  DerivativeDataset d;
  d.points = {Eigen::VectorXd::Zero(n)};
  d.targets = {Eigen::RowVectorXd::Zero(n)};
  return fit(Kernel::unit_gaussian(n), d);
}

TEST(ContractionRate, MatchesGeneralizedEigenvalue) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const Eigen::MatrixXd p = testing::random_spd(rng, 3);
    const Eigen::MatrixXd a = testing::random_matrix(rng, 3, 3);
    // Oracle in the metric W = P^-1: sqrt(lambda_max(W^-1 A^T W A)).
    const Eigen::MatrixXd w = p.inverse();
    const Eigen::MatrixXd m = p * a.transpose() * w * a;
    const double oracle =
        std::sqrt(m.eigenvalues().real().maxCoeff());
    EXPECT_NEAR(contraction_rate(p, a), oracle, 1e-9 * (1 + oracle));
  }
}

TEST(VerifyGrid, ToyClosedLoopIsZero) {
  const VerificationReport r = verify_grid(
      toy(), toy_controller(), Eigen::MatrixXd::Ones(1, 1), Box::cube(1, 0, 0), 1);
  ASSERT_EQ(r.points.size(), 1u);
  EXPECT_NEAR(r.max_rate, 0.0, 1e-12);
  EXPECT_NEAR(r.min_margin, 1.0, 1e-12);
}

TEST(VerifyGrid, LinearClosedLoopUniform) {
  Eigen::Matrix2d a;
  a << 0.6, 0.2, -0.1, 0.7;
  const SystemModel m = make_linear(a, Eigen::Vector2d(0, 1));
  Eigen::Matrix2d p;
  p << 2, 0.5, 0.5, 1;
  const VerificationReport r =
      verify_grid(m, zero_controller(2), p, Box::cube(2, -1, 1), 5);
  const double margin = contraction_margin(p, a);
  const Eigen::MatrixXd g = p * a.transpose() * p.inverse() * a;
  const double rate = std::sqrt(g.eigenvalues().real().maxCoeff());
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    EXPECT_NEAR(r.margins[i], margin, 1e-12);
    EXPECT_NEAR(r.rates[i], rate, 1e-12);
  }
  EXPECT_TRUE(r.consistent);
  EXPECT_LT(r.max_rate, 1.0);
}

TEST(VerifyGrid, SignConsistencyOnRandomLoops) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 30; ++t) {
    const Eigen::MatrixXd a = testing::random_matrix(rng, 2, 2, -1.1, 1.1);
    const SystemModel m = make_linear(a, Eigen::Vector2d(0, 1));
    const VerificationReport r = verify_grid(
        m, zero_controller(2), testing::random_spd(rng, 2), Box::cube(2, -1, 1), 3);
    EXPECT_TRUE(r.consistent);
    EXPECT_EQ(r.min_margin > 0.0, r.max_rate < 1.0);
  }
}

TEST(Rollout, ToyAndEquilibrium) {
  const Trajectory t = rollout(toy(), toy_controller(), Eigen::VectorXd::Ones(1), 4);
  ASSERT_EQ(t.states.size(), 5u);
  EXPECT_DOUBLE_EQ(t.states[0][0], 1.0);
  for (int k = 1; k <= 4; ++k) EXPECT_NEAR(t.states[k][0], 0.0, 1e-12);
  const Trajectory z = rollout(toy(), toy_controller(), Eigen::VectorXd::Zero(1), 10);
  for (const auto& x : z.states) EXPECT_EQ(x[0], 0.0);
}

TEST(Rollout, StepsFollowModelMap) {
  const SystemModel m = make_oscillator();
  const DerivativeController c = zero_controller(2);
  const Trajectory t = rollout(m, c, Eigen::Vector2d(1.0, -0.5), 50);
  for (int k = 0; k < t.steps(); ++k) {
    EXPECT_LT((t.states[k + 1] - m.step(t.states[k], t.inputs[k])).norm(),
              1e-12);
  }
}

TEST(Rollout, DivergenceFlagged) {
  const SystemModel m = make_linear(Eigen::MatrixXd::Constant(1, 1, 10.0),
                                    Eigen::VectorXd::Ones(1));
  const Trajectory t = rollout(m, [](const Eigen::VectorXd&) { return 0.0; },
                               Eigen::VectorXd::Ones(1), 100);
  EXPECT_TRUE(t.diverged);
  EXPECT_LT(t.steps(), 100);
  EXPECT_THROW(rollout(m, toy_controller(), Eigen::VectorXd::Ones(1), 0), Error);
}

StochasticClosedLoop scalar_loop(double sigma) {
  StochasticClosedLoop loop;
  loop.n = 1;
  loop.mean = [](const Eigen::VectorXd& x) -> Eigen::VectorXd { return 0.5 * x; };
  loop.mean_jacobian = [](const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Constant(1, 1, 0.5);
  };
  loop.sigma = [sigma](const Eigen::VectorXd&) {
    return Eigen::VectorXd::Constant(1, sigma);
  };
  loop.sigma_jacobian = [](const Eigen::VectorXd&) {
    return Eigen::MatrixXd::Zero(1, 1);
  };
  loop.p_bar = Eigen::MatrixXd::Ones(1, 1);
  return loop;
}

TEST(StochasticRollout, NoiselessMatchesDeterministic) {
  const SystemModel m = make_linear(Eigen::MatrixXd::Constant(1, 1, 0.5),
                                    Eigen::VectorXd::Ones(1));
  const Trajectory d = rollout(m, [](const Eigen::VectorXd&) { return 0.0; },
                               Eigen::VectorXd::Ones(1), 20);
  const Trajectory s = rollout_stochastic(scalar_loop(0.0), Eigen::VectorXd::Ones(1), 20, 3);
  ASSERT_EQ(d.states.size(), s.states.size());
  for (std::size_t k = 0; k < d.states.size(); ++k) {
    EXPECT_EQ(d.states[k][0], s.states[k][0]);
  }
}

TEST(StochasticRollout, SeedDeterminism) {
  const Trajectory a = rollout_stochastic(scalar_loop(0.1), Eigen::VectorXd::Ones(1), 100, 42);
  const Trajectory b = rollout_stochastic(scalar_loop(0.1), Eigen::VectorXd::Ones(1), 100, 42);
  const Trajectory c = rollout_stochastic(scalar_loop(0.1), Eigen::VectorXd::Ones(1), 100, 43);
  for (std::size_t k = 0; k < a.states.size(); ++k) {
    EXPECT_EQ(a.states[k][0], b.states[k][0]);
  }
  EXPECT_NE(a.states.back()[0], c.states.back()[0]);
}

TEST(StochasticRollout, StationarySecondMoment) {
  const StochasticClosedLoop loop = scalar_loop(0.1);
  double sum = 0.0;
  const int runs = 10000;
  for (int r = 0; r < runs; ++r) {
    const Trajectory t = rollout_stochastic(loop, Eigen::VectorXd::Zero(1), 60, r);
    sum += t.states.back()[0] * t.states.back()[0];
  }
  const double expect = 0.01 / (1.0 - 0.25);
  EXPECT_NEAR(sum / runs, expect, 0.1 * expect);
}

TEST(EmpiricalRate, IdenticalTrajectoriesSkipped) {
  const Trajectory t = rollout(toy(), toy_controller(), Eigen::VectorXd::Ones(1), 5);
  const RateEstimate r = empirical_contraction_rate({{t, t}}, Eigen::MatrixXd::Ones(1, 1));
  EXPECT_TRUE(r.all_skipped);
  EXPECT_EQ(r.rate, 0.0);
}

TEST(EmpiricalRate, LinearBound) {
  std::mt19937_64 rng(6);
  Eigen::Matrix2d a;
  a << 0.7, 0.3, -0.2, 0.8;
  const SystemModel m = make_linear(a, Eigen::Vector2d(0, 1));
  const auto law = [](const Eigen::VectorXd&) { return 0.0; };
  Eigen::Matrix2d p;
  p << 3, 1, 1, 2;
  std::vector<std::pair<Trajectory, Trajectory>> pairs;
  for (int i = 0; i < 5; ++i) {
    pairs.emplace_back(rollout(m, law, testing::random_vector(rng, 2), 30),
                       rollout(m, law, testing::random_vector(rng, 2), 30));
  }
  const RateEstimate r = empirical_contraction_rate(pairs, p);
  EXPECT_LE(r.rate, contraction_rate(p, a) + 1e-9);
  EXPECT_GT(r.ratios, 0);
  pairs.back().second.states.pop_back();
  EXPECT_THROW(empirical_contraction_rate(pairs, p), Error);
}

TEST(Monotone, FlagsIncrease) {
  Trajectory t;
  t.states = {Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Constant(1, 0.5),
              Eigen::VectorXd::Constant(1, 0.7)};
  t.inputs = {0.0, 0.0};
  const MonotoneCheck c = check_monotone(t, Eigen::MatrixXd::Ones(1, 1),
                                         Eigen::VectorXd::Zero(1), Box::cube(1, -2, 2));
  EXPECT_FALSE(c.monotone);
  EXPECT_EQ(c.first_violation, 1);
}

TEST(Monotone, FloorScalesWithControllerRoundoff) {
  const DerivativeController c = toy_controller();
  EXPECT_EQ(c.control_roundoff(Eigen::VectorXd::Zero(1)), 0.0);
  const Eigen::VectorXd half = Eigen::VectorXd::Constant(1, 0.5);
  EXPECT_GT(c.control_roundoff(half), 0.0);
  EXPECT_LT(c.control_roundoff(half), 1e-13);
  const Eigen::MatrixXd p = Eigen::MatrixXd::Ones(1, 1);
  const Eigen::VectorXd z = Eigen::VectorXd::Zero(1);
  EXPECT_EQ(monotone_floor(toy(), c, p, z, 0.5), 1e-9);
  EXPECT_EQ(monotone_floor(toy(), c, p, z, 1.5), 1e-9);
  // Large cancelling weights raise the floor.
  PointSet pts{Eigen::VectorXd::Constant(1, -0.01), Eigen::VectorXd::Constant(1, 0.01)};
  const DerivativeController big(Kernel::unit_gaussian(1), pts,
                                 Eigen::Vector2d(1e9, -1e9));
  EXPECT_GT(monotone_floor(toy(), big, p, z, 0.99), 1e-7);
}

TEST(Oscillator, EndToEndTwoStep) {
  const SystemModel m = make_oscillator();
  const Box dom = Box::cube(2, -2, 2);
  const SynthesisReport rep = synthesize(m, Kernel::unit_gaussian(2),
                                         SynthesisMode::kTwoStep, dom.grid(7));
  ASSERT_TRUE(rep.feasible());
  const VerificationReport v = verify_grid(m, rep.controller, rep.p, dom, 41);
  EXPECT_GT(v.min_margin, 0.0);
  EXPECT_LT(v.max_rate, 1.0);
  EXPECT_TRUE(v.consistent);
  std::vector<std::pair<Trajectory, Trajectory>> pairs;
  std::mt19937_64 rng(5);
  for (int i = 0; i < 5; ++i) {
    pairs.emplace_back(rollout(m, rep.controller, testing::random_vector(rng, 2), 500),
                       rollout(m, rep.controller, testing::random_vector(rng, 2), 500));
  }
  const RateEstimate r = empirical_contraction_rate(pairs, rep.p, dom);
  EXPECT_LT(r.rate, 1.0);
  EXPECT_LE(r.rate, v.max_rate + 1e-6);
}

}  // namespace
}  // namespace gpcontract
