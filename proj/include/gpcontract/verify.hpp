#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/deriv_gp.hpp"
#include "gpcontract/error.hpp"
#include "gpcontract/lmi.hpp"
#include "gpcontract/stochastic.hpp"
#include "gpcontract/synthesis.hpp"
#include "gpcontract/system.hpp"

namespace gpcontract {

using ControlLaw = std::function<double(const Eigen::VectorXd&)>;

/// Contraction rate of A in the metric certified by the block LMI with P:
/// sigma_max(L^-1 A L) for P = L L^T. Equals sqrt(lambda_max(W^-1 A^T W A))
/// with W = P^-1, and is < 1 exactly when P - A P A^T > 0.
inline double contraction_rate(const Eigen::MatrixXd& p,
                               const Eigen::MatrixXd& a) {
  const Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() != Eigen::Success) {
    throw_invalid("contraction_rate: P must be positive definite");
  }
  const Eigen::MatrixXd l = llt.matrixL();
  const Eigen::MatrixXd w =
      l.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd(a * l));
  return Eigen::JacobiSVD<Eigen::MatrixXd>(w).singularValues()[0];
}

/// |v| in the metric W = P^-1.
inline double metric_norm(const Eigen::LLT<Eigen::MatrixXd>& p_llt,
                          const Eigen::VectorXd& v) {
  return p_llt.matrixL().solve(v).norm();
}

/// Closed-loop Jacobian df + b du + u db with the applied control u.
inline Eigen::MatrixXd closed_loop_jacobian(
    const SystemModel& model, const DerivativeController& controller,
    const Eigen::VectorXd& x) {
  Eigen::MatrixXd a = model.drift_jacobian(x) +
                      model.input_at(x) * controller.eval_control_grad(x);
  if (!model.constant_input()) {
    a += controller.eval_control(x) * model.input_jacobian_at(x);
  }
  return a;
}

struct VerificationReport {
  Box domain;
  int resolution = 0;
  std::vector<Eigen::VectorXd> points;
  std::vector<double> margins;
  std::vector<double> rates;
  double min_margin = std::numeric_limits<double>::infinity();
  double max_rate = 0.0;
  int worst = -1;
  // lambda < 1 iff margin > 0 held at every point.
  bool consistent = true;
};

inline VerificationReport verify_grid(const SystemModel& model,
                                      const DerivativeController& controller,
                                      const Eigen::MatrixXd& p, const Box& domain,
                                      int resolution) {
  check_dim("verify_grid", "domain", domain.dim(), model.n);
  check_dim("verify_grid", "controller", controller.dim(), model.n);
  if (p.rows() != model.n || !(min_eigenvalue(p) > 0.0)) {
    throw_invalid("verify_grid: P must be symmetric positive definite");
  }
  VerificationReport r;
  r.domain = domain;
  r.resolution = resolution;
  for (const Eigen::VectorXd& x : domain.grid(resolution)) {
    const Eigen::MatrixXd a = closed_loop_jacobian(model, controller, x);
    const double m = contraction_margin(p, a);
    const double rate = contraction_rate(p, a);
    // Skip the sign test inside round-off of the boundary.
    if (std::abs(m) > 1e-12 * p.norm() && std::abs(rate - 1.0) > 1e-12 &&
        ((m > 0.0) != (rate < 1.0))) {
      r.consistent = false;
    }
    r.points.push_back(x);
    r.margins.push_back(m);
    r.rates.push_back(rate);
    if (m < r.min_margin) {
      r.min_margin = m;
      r.worst = static_cast<int>(r.points.size()) - 1;
    }
    r.max_rate = std::max(r.max_rate, rate);
  }
  return r;
}

struct Trajectory {
  std::vector<Eigen::VectorXd> states;
  std::vector<double> inputs;
  std::uint64_t seed = 0;
  bool diverged = false;

  int steps() const { return static_cast<int>(inputs.size()); }
};

inline Trajectory rollout(const SystemModel& model, const ControlLaw& law,
                          const Eigen::VectorXd& x0, int steps,
                          double divergence = 1e6) {
  check_dim("rollout", "x0", x0.size(), model.n);
  if (steps < 1) throw_invalid("rollout: K must be >= 1");
  Trajectory t;
  t.states.reserve(steps + 1);
  t.inputs.reserve(steps);
  t.states.push_back(x0);
  Eigen::VectorXd x = x0;
  for (int k = 0; k < steps; ++k) {
    const double u = law(x);
    x = model.step(x, u);
    t.inputs.push_back(u);
    t.states.push_back(x);
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > divergence) {
      t.diverged = true;
      break;
    }
  }
  return t;
}

inline Trajectory rollout(const SystemModel& model,
                          const DerivativeController& controller,
                          const Eigen::VectorXd& x0, int steps) {
  return rollout(
      model, [&controller](const Eigen::VectorXd& x) {
        return controller.eval_control(x);
      },
      x0, steps);
}

/// Samples x_{k+1} = mean(x_k) + diag(sigma(x_k)) w_k with w_k drawn from a
/// mt19937_64 stream seeded by `seed`. inputs hold 0 (the control is inside
/// the mean map).
inline Trajectory rollout_stochastic(const StochasticClosedLoop& loop,
                                     const Eigen::VectorXd& x0, int steps,
                                     std::uint64_t seed,
                                     double divergence = 1e6) {
  check_dim("rollout_stochastic", "x0", x0.size(), loop.n);
  if (steps < 1) throw_invalid("rollout_stochastic: K must be >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Trajectory t;
  t.seed = seed;
  t.states.push_back(x0);
  Eigen::VectorXd x = x0;
  Eigen::VectorXd w(loop.n);
  for (int k = 0; k < steps; ++k) {
    for (int i = 0; i < loop.n; ++i) w[i] = normal(rng);
    x = loop.mean(x) + loop.sigma(x).cwiseProduct(w);
    t.inputs.push_back(0.0);
    t.states.push_back(x);
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > divergence) {
      t.diverged = true;
      break;
    }
  }
  return t;
}

struct RateEstimate {
  double rate = 0.0;
  int ratios = 0;
  int skipped = 0;   // distances below 1e-12
  int excluded = 0;  // outside the verified region
  bool all_skipped = false;
};

/// Largest step ratio |x_{k+1} - x'_{k+1}| / |x_k - x'_k| in the metric
/// P^-1 over trajectory pairs. Steps where either state leaves `region`
/// are excluded.
inline RateEstimate empirical_contraction_rate(
    const std::vector<std::pair<Trajectory, Trajectory>>& pairs,
    const Eigen::MatrixXd& p, const std::optional<Box>& region = {}) {
  const Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() != Eigen::Success) {
    throw_invalid("contraction_rate: P must be positive definite");
  }
  RateEstimate out;
  for (const auto& [a, b] : pairs) {
    if (a.states.size() != b.states.size()) {
      throw_invalid("contraction_rate: trajectory lengths differ");
    }
    for (std::size_t k = 0; k + 1 < a.states.size(); ++k) {
      if (region && !(region->contains(a.states[k]) &&
                      region->contains(b.states[k]) &&
                      region->contains(a.states[k + 1]) &&
                      region->contains(b.states[k + 1]))) {
        ++out.excluded;
        continue;
      }
      const double d0 = metric_norm(llt, a.states[k] - b.states[k]);
      const double d1 = metric_norm(llt, a.states[k + 1] - b.states[k + 1]);
      if (d0 < 1e-12) {
        ++out.skipped;
        continue;
      }
      out.rate = std::max(out.rate, d1 / d0);
      ++out.ratios;
    }
  }
  out.all_skipped = out.ratios == 0;
  return out;
}

/// Distance to x* below which controller round-off can outweigh one step of
/// contraction: |b|_{P^-1} * roundoff(x*) / (1 - max_rate), and at least
/// 1e-9.
inline double monotone_floor(const SystemModel& model,
                             const DerivativeController& controller,
                             const Eigen::MatrixXd& p,
                             const Eigen::VectorXd& x_star, double max_rate) {
  const Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() != Eigen::Success) {
    throw_invalid("monotone_floor: P must be positive definite");
  }
  const double floor = 1e-9;
  if (!(max_rate < 1.0)) return floor;
  const double noise = metric_norm(llt, model.input_at(x_star)) *
                       controller.control_roundoff(x_star);
  return std::max(floor, noise / (1.0 - max_rate));
}

struct MonotoneCheck {
  bool monotone = true;
  int checked = 0;
  // Steps starting within `floor` of x*, where controller round-off
  // dominates the per-step decrease.
  int below_floor = 0;
  int first_violation = -1;
};

/// |x_{k+1} - x*|_{P^-1} <= |x_k - x*|_{P^-1} at every step whose start lies
/// in `region` and farther than `floor` from x*.
inline MonotoneCheck check_monotone(const Trajectory& t,
                                    const Eigen::MatrixXd& p,
                                    const Eigen::VectorXd& x_star,
                                    const Box& region, double floor = 1e-9) {
  const Eigen::LLT<Eigen::MatrixXd> llt(p);
  if (llt.info() != Eigen::Success) {
    throw_invalid("check_monotone: P must be positive definite");
  }
  MonotoneCheck out;
  for (std::size_t k = 0; k + 1 < t.states.size(); ++k) {
    if (!region.contains(t.states[k])) continue;
    const double d0 = metric_norm(llt, t.states[k] - x_star);
    if (d0 < floor) {
      ++out.below_floor;
      continue;
    }
    const double d1 = metric_norm(llt, t.states[k + 1] - x_star);
    ++out.checked;
    if (d1 > d0) {
      out.monotone = false;
      if (out.first_violation < 0) out.first_violation = static_cast<int>(k);
    }
  }
  return out;
}

}  // namespace gpcontract
