#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/deriv_gp.hpp"
#include "gpcontract/drift_gp.hpp"
#include "gpcontract/error.hpp"
#include "gpcontract/lmi.hpp"
#include "gpcontract/synthesis.hpp"
#include "gpcontract/system.hpp"

namespace gpcontract {

/// x_{k+1} = mean(x_k) + diag(sigma(x_k)) w_k with w_k standard normal.
struct StochasticClosedLoop {
  int n = 0;
  VectorField mean;
  MatrixField mean_jacobian;
  VectorField sigma;
  // Row i is d sigma_i / dx.
  MatrixField sigma_jacobian;
  // Components whose sigma row came from the finite-difference fallback.
  std::function<std::vector<bool>(const Eigen::VectorXd&)> floored;
  Eigen::MatrixXd p_bar;
};

/// Closed loop of a learned drift with u = controller(x). P-bar defaults to
/// the inverse of the controller's synthesis metric (the metric in which
/// the certified closed loop contracts), or the identity if none is set.
inline StochasticClosedLoop make_stochastic_loop(
    const DriftModel& drift, const DerivativeController& controller,
    const Eigen::VectorXd& b, std::optional<Eigen::MatrixXd> p_bar = {}) {
  const int n = drift.dim();
  check_dim("make_stochastic_loop", "controller", controller.dim(), n);
  check_dim("make_stochastic_loop", "b", b.size(), n);
  StochasticClosedLoop loop;
  loop.n = n;
  loop.mean = [drift, controller, b](const Eigen::VectorXd& x) {
    return Eigen::VectorXd(drift.drift(x) + b * controller.eval_control(x));
  };
  loop.mean_jacobian = [drift, controller, b](const Eigen::VectorXd& x) {
    return Eigen::MatrixXd(drift.drift_jacobian(x) +
                           b * controller.eval_control_grad(x));
  };
  loop.sigma = [drift](const Eigen::VectorXd& x) {
    return drift_variances(drift, x).sigma;
  };
  loop.sigma_jacobian = [drift](const Eigen::VectorXd& x) {
    return sigma_jacobian(drift, x).rows;
  };
  loop.floored = [drift](const Eigen::VectorXd& x) {
    return sigma_jacobian(drift, x).floored;
  };
  if (p_bar) {
    loop.p_bar = *p_bar;
  } else if (controller.metric()) {
    loop.p_bar = controller.metric()->llt().solve(
        Eigen::MatrixXd::Identity(n, n));
    loop.p_bar = (0.5 * (loop.p_bar + loop.p_bar.transpose())).eval();
  } else {
    loop.p_bar = Eigen::MatrixXd::Identity(n, n);
  }
  return loop;
}

/// Noise penalty sum_i dsigma_i^T (P-bar)_ii dsigma_i.
inline Eigen::MatrixXd moment_noise_term(const Eigen::MatrixXd& p_bar,
                                         const Eigen::MatrixXd& dsigma) {
  const Eigen::Index n = p_bar.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < dsigma.rows(); ++i) {
    out += p_bar(i, i) * dsigma.row(i).transpose() * dsigma.row(i);
  }
  return out;
}

/// lambda_min(P-bar - A^T P-bar A - noise term).
inline double moment_ies_margin(const Eigen::MatrixXd& p_bar,
                                const Eigen::MatrixXd& a,
                                const Eigen::MatrixXd& dsigma) {
  return min_eigenvalue(p_bar - a.transpose() * p_bar * a -
                        moment_noise_term(p_bar, dsigma));
}

struct MomentIesReport {
  std::vector<Eigen::VectorXd> points;
  std::vector<double> margins;
  std::vector<double> deterministic_margins;
  std::vector<bool> flagged;
  double min_margin = 0.0;
  // Largest lambda_max of the noise term over the grid.
  double noise_margin = 0.0;
  int worst = -1;
  bool pass = false;
};

inline MomentIesReport moment_ies_check(const StochasticClosedLoop& loop,
                                        const std::vector<Eigen::VectorXd>& grid) {
  if (loop.p_bar.rows() != loop.n || !(min_eigenvalue(loop.p_bar) > 0.0)) {
    throw_invalid("moment_ies_check: P-bar must be symmetric positive definite");
  }
  if (grid.empty()) throw_invalid("moment_ies_check: empty grid");
  MomentIesReport r;
  r.min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const Eigen::VectorXd& x = grid[k];
    check_dim("moment_ies_check", "grid point", x.size(), loop.n);
    const Eigen::MatrixXd a = loop.mean_jacobian(x);
    const Eigen::MatrixXd ds = loop.sigma_jacobian(x);
    const Eigen::MatrixXd noise = moment_noise_term(loop.p_bar, ds);
    const Eigen::MatrixXd det = loop.p_bar - a.transpose() * loop.p_bar * a;
    const double m = min_eigenvalue(det - noise);
    r.points.push_back(x);
    r.margins.push_back(m);
    r.deterministic_margins.push_back(min_eigenvalue(det));
    bool flag = false;
    if (loop.floored) {
      for (bool f : loop.floored(x)) flag |= f;
    }
    r.flagged.push_back(flag);
    r.noise_margin = std::max(r.noise_margin, -min_eigenvalue(-noise));
    if (m < r.min_margin) {
      r.min_margin = m;
      r.worst = static_cast<int>(k);
    }
  }
  r.pass = r.min_margin > 0.0;
  return r;
}

/// Entrywise box around the Jacobian mean containing the bounding box of
/// the Chebyshev ellipsoid of each learned row: half-widths
/// sqrt(c * (v_{d,i})_jj).
inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> chebyshev_box(
    const DriftModel& drift, const Eigen::VectorXd& x, double c) {
  const int n = drift.dim();
  if (!(c > n)) {
    throw_invalid("chebyshev: c must exceed the state dimension " +
                  std::to_string(n) + " (the bound is vacuous otherwise)");
  }
  const Eigen::MatrixXd mu = drift.drift_jacobian(x);
  const DriftVariances v = drift_variances(drift, x);
  Eigen::MatrixXd half(n, n);
  for (int i = 0; i < n; ++i) {
    half.row(i) = (c * v.grad_cov[i].diagonal().cwiseMax(0.0)).cwiseSqrt();
  }
  return {mu - half, mu + half};
}

inline double chebyshev_confidence(int n, double c) {
  if (!(c > n)) throw_invalid("chebyshev: c must exceed n");
  return std::pow(1.0 - n / c, n);
}

struct ChebyshevHulls {
  VertexHull hull;
  double confidence = 0.0;
  double c = 0.0;
};

/// Widens each cell's entry intervals by the Chebyshev half-widths of the
/// learned rows at the cell center, then re-enumerates vertices.
inline ChebyshevHulls chebyshev_hulls(const DriftModel& drift,
                                      const VertexHull& base, double c,
                                      int max_vertices = 1 << 12) {
  const int n = drift.dim();
  ChebyshevHulls out;
  out.c = c;
  out.confidence = chebyshev_confidence(n, c);
  out.hull = base;
  for (HullCell& cell : out.hull.cells) {
    const auto [lo, hi] = chebyshev_box(drift, cell.center, c);
    const Eigen::MatrixXd half = 0.5 * (hi - lo);
    cell.entry_lo -= half;
    cell.entry_hi += half;
    cell.vertices =
        enumerate_interval_vertices(cell.entry_lo, cell.entry_hi, max_vertices);
  }
  return out;
}

}  // namespace gpcontract
