#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/deriv_gp.hpp"
#include "gpcontract/error.hpp"
#include "gpcontract/kernels.hpp"
#include "gpcontract/lmi.hpp"
#include "gpcontract/system.hpp"

namespace gpcontract {

/// Orthonormal rows spanning the left null space of b (n x m, full column
/// rank). Rows come from Gram-Schmidt on e_1, ..., e_n in that order, each
/// sign-normalized so its largest-magnitude entry is positive.
inline Eigen::MatrixXd left_annihilator(const Eigen::MatrixXd& b) {
  const int n = static_cast<int>(b.rows());
  const int m = static_cast<int>(b.cols());
  if (n == 0 || m == 0) throw_invalid("left_annihilator: empty input matrix");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(b);
  qr.setThreshold(1e-10);
  if (qr.rank() < m) {
    throw_invalid("left_annihilator: input matrix is rank deficient");
  }
  // Orthonormal basis of range(b).
  std::vector<Eigen::VectorXd> basis;
  for (int c = 0; c < m; ++c) {
    Eigen::VectorXd v = b.col(c);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) v -= q.dot(v) * q;
    }
    basis.push_back(v.normalized());
  }
  Eigen::MatrixXd out(n - m, n);
  int row = 0;
  for (int i = 0; i < n && row < n - m; ++i) {
    Eigen::VectorXd v = Eigen::VectorXd::Unit(n, i);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) v -= q.dot(v) * q;
    }
    if (v.norm() < 1e-6) continue;
    v.normalize();
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    basis.push_back(v);
    out.row(row++) = v.transpose();
  }
  return out;
}

/// Basis E_0..E_{n(n+1)/2 - 1} of symmetric n x n matrices, ordered by the
/// upper triangle row by row.
inline std::vector<Eigen::MatrixXd> symmetric_basis(int n) {
  std::vector<Eigen::MatrixXd> out;
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      Eigen::MatrixXd e = Eigen::MatrixXd::Zero(n, n);
      e(i, j) = 1.0;
      e(j, i) = 1.0;
      out.push_back(std::move(e));
    }
  }
  return out;
}

inline Eigen::MatrixXd symmetric_from_vector(const Eigen::VectorXd& v, int n) {
  Eigen::MatrixXd p(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      p(i, j) = v[k];
      p(j, i) = v[k];
      ++k;
    }
  }
  return p;
}

/// Block [[P, (A P)^T], [A P, P]] whose positivity is the contraction
/// condition for the closed-loop Jacobian A.
inline Eigen::MatrixXd contraction_block(const Eigen::MatrixXd& p,
                                         const Eigen::MatrixXd& a) {
  const Eigen::Index n = p.rows();
  Eigen::MatrixXd out(2 * n, 2 * n);
  const Eigen::MatrixXd ap = a * p;
  out << p, ap.transpose(), ap, p;
  return out;
}

inline double contraction_margin(const Eigen::MatrixXd& p,
                                 const Eigen::MatrixXd& a) {
  return min_eigenvalue(contraction_block(p, a));
}

// ---------------------------------------------------------------------------
// Polytopic hulls

struct HullCell {
  Box box;
  Eigen::VectorXd center;
  Eigen::MatrixXd entry_lo;
  Eigen::MatrixXd entry_hi;
  std::vector<Eigen::MatrixXd> vertices;

  bool contains(const Eigen::MatrixXd& j, double tol = 0.0) const {
    return ((j - entry_lo).array() >= -tol).all() &&
           ((entry_hi - j).array() >= -tol).all();
  }
};

struct VertexHull {
  Box domain;
  int subdivisions = 1;
  double inflation = 0.0;
  int sampling = 5;
  std::vector<HullCell> cells;

  /// Index of the cell containing x (ties go to the lower cell).
  int locate(const Eigen::VectorXd& x) const {
    const int n = domain.dim();
    int index = 0;
    for (int a = 0; a < n; ++a) {
      const double w = (domain.hi[a] - domain.lo[a]) / subdivisions;
      int c = static_cast<int>(std::floor((x[a] - domain.lo[a]) / w));
      c = std::clamp(c, 0, subdivisions - 1);
      index = index * subdivisions + c;
    }
    return index;
  }

  std::vector<Eigen::VectorXd> centers() const {
    std::vector<Eigen::VectorXd> out;
    for (const auto& c : cells) out.push_back(c.center);
    return out;
  }
};

struct HullOptions {
  int subdivisions = 4;
  double inflation = 0.1;
  int sampling = 5;
  int max_vertices = 1 << 12;
};

/// Enumerates the corners of the entrywise interval box [lo, hi]; entries
/// with lo == hi are pinned.
inline std::vector<Eigen::MatrixXd> enumerate_interval_vertices(
    const Eigen::MatrixXd& lo, const Eigen::MatrixXd& hi, int max_vertices) {
  std::vector<std::pair<Eigen::Index, Eigen::Index>> free;
  for (Eigen::Index i = 0; i < lo.rows(); ++i) {
    for (Eigen::Index j = 0; j < lo.cols(); ++j) {
      if (hi(i, j) > lo(i, j)) free.emplace_back(i, j);
    }
  }
  if (free.size() > 30 || (1L << free.size()) > max_vertices) {
    throw_invalid("build_hulls: a cell needs 2^" +
                  std::to_string(free.size()) +
                  " vertices, above the cap; group entries or increase r");
  }
  std::vector<Eigen::MatrixXd> out;
  const long count = 1L << free.size();
  for (long mask = 0; mask < count; ++mask) {
    Eigen::MatrixXd v = lo;
    for (std::size_t e = 0; e < free.size(); ++e) {
      if (mask & (1L << e)) v(free[e].first, free[e].second) =
          hi(free[e].first, free[e].second);
    }
    out.push_back(std::move(v));
  }
  return out;
}

/// Entrywise Jacobian intervals per cell from a sampling subgrid, widened by
/// inflation * (observed width) on each side.
inline VertexHull build_hulls(const MatrixField& jacobian, const Box& domain,
                              const HullOptions& options) {
  if (options.subdivisions < 1) throw_invalid("build_hulls: r must be >= 1");
  if (!(options.inflation >= 0.0)) {
    throw_invalid("build_hulls: inflation must be >= 0");
  }
  if (options.sampling < 2) throw_invalid("build_hulls: sampling must be >= 2");
  const int n = domain.dim();
  VertexHull hull;
  hull.domain = domain;
  hull.subdivisions = options.subdivisions;
  hull.inflation = options.inflation;
  hull.sampling = options.sampling;
  const Eigen::VectorXd width =
      (domain.hi - domain.lo) / static_cast<double>(options.subdivisions);
  const Box index_box = Box::cube(n, 0.0, options.subdivisions - 1.0);
  for (const Eigen::VectorXd& idx : index_box.grid(options.subdivisions)) {
    HullCell cell;
    const Eigen::VectorXd lo = domain.lo + idx.cwiseProduct(width);
    cell.box = Box(lo, lo + width);
    cell.center = cell.box.center();
    Eigen::MatrixXd jmin, jmax;
    bool first = true;
    for (const Eigen::VectorXd& x : cell.box.grid(options.sampling)) {
      const Eigen::MatrixXd j = jacobian(x);
      if (first) {
        jmin = j;
        jmax = j;
        first = false;
      } else {
        jmin = jmin.cwiseMin(j);
        jmax = jmax.cwiseMax(j);
      }
    }
    const Eigen::MatrixXd w = jmax - jmin;
    cell.entry_lo = jmin;
    cell.entry_hi = jmax;
    for (Eigen::Index a = 0; a < w.rows(); ++a) {
      for (Eigen::Index b = 0; b < w.cols(); ++b) {
        const double scale = 1.0 + std::max(std::abs(jmin(a, b)),
                                            std::abs(jmax(a, b)));
        if (w(a, b) <= 1e-12 * scale) {
          const double mid = 0.5 * (jmin(a, b) + jmax(a, b));
          cell.entry_lo(a, b) = mid;
          cell.entry_hi(a, b) = mid;
        } else {
          cell.entry_lo(a, b) -= options.inflation * w(a, b);
          cell.entry_hi(a, b) += options.inflation * w(a, b);
        }
      }
    }
    cell.vertices = enumerate_interval_vertices(cell.entry_lo, cell.entry_hi,
                                                options.max_vertices);
    hull.cells.push_back(std::move(cell));
  }
  return hull;
}

inline VertexHull build_hulls(const SystemModel& model, const Box& domain,
                              const HullOptions& options) {
  check_dim("build_hulls", "domain", domain.dim(), model.n);
  return build_hulls(model.drift_jacobian, domain, options);
}

/// Number of points of the per-cell validation subgrid whose Jacobian lies
/// outside the cell's entrywise intervals.
inline int count_hull_violations(const VertexHull& hull,
                                 const MatrixField& jacobian,
                                 int validation_per_axis) {
  int violations = 0;
  for (const HullCell& cell : hull.cells) {
    for (const Eigen::VectorXd& x : cell.box.grid(validation_per_axis)) {
      if (!cell.contains(jacobian(x), 1e-14)) ++violations;
    }
  }
  return violations;
}

// ---------------------------------------------------------------------------
// Synthesis

enum class SynthesisMode { kTwoStep, kJoint, kPolytopic };

inline std::string to_string(SynthesisMode mode) {
  switch (mode) {
    case SynthesisMode::kTwoStep:
      return "two-step";
    case SynthesisMode::kJoint:
      return "joint";
    case SynthesisMode::kPolytopic:
      return "polytopic";
  }
  return "unknown";
}

inline SynthesisMode synthesis_mode_from_string(const std::string& s) {
  if (s == "two-step") return SynthesisMode::kTwoStep;
  if (s == "joint") return SynthesisMode::kJoint;
  if (s == "polytopic") return SynthesisMode::kPolytopic;
  throw_invalid("unknown synthesis mode '" + s + "'");
}

struct SynthesisOptions {
  // Normalization I <= P <= rho I for metric search.
  double rho = 10.0;
  double sigma_p = 0.0;
  // Synthesis fails unless the certified gain-step margin reaches this.
  double margin_target = 1e-7;
  bool anchor_equilibrium = true;
  LmiOptions lmi;
  FitOptions fit;
};

struct MetricResult {
  Eigen::MatrixXd p;
  double eps_p = 0.0;
  LmiStatus status = LmiStatus::kNumericalFailure;
  bool degenerate = false;
  std::string message;
  bool ok() const {
    return status == LmiStatus::kOptimal || status == LmiStatus::kFeasible;
  }
};

struct ConstraintDiagnostic {
  std::string label;
  int site = 0;
  int vertex = 0;
  Eigen::VectorXd x;
  double solver_margin = 0.0;
  double certified_margin = 0.0;
};

struct SynthesisReport {
  SynthesisMode mode = SynthesisMode::kTwoStep;
  Eigen::MatrixXd p;
  double eps_p = 0.0;
  double eps = 0.0;
  LmiStatus status = LmiStatus::kNumericalFailure;
  std::string message;
  DerivativeController controller;
  std::vector<ConstraintDiagnostic> diagnostics;
  // Largest |p_i - p_j| over neighbouring cells (polytopic mode only).
  double max_neighbor_target_gap = 0.0;

  bool feasible() const {
    return status == LmiStatus::kOptimal || status == LmiStatus::kFeasible;
  }
};

namespace detail {

// Jacobians constrained at one site: the point Jacobian or hull vertices.
struct Site {
  Eigen::VectorXd x;
  std::vector<Eigen::MatrixXd> jacobians;
};

inline std::vector<Site> make_sites(const SystemModel& model,
                                    const PointSet& points,
                                    const VertexHull* hulls) {
  std::vector<Site> sites;
  if (hulls != nullptr) {
    for (const HullCell& c : hulls->cells) {
      sites.push_back({c.center, c.vertices});
    }
    return sites;
  }
  check_point_set("synthesis", points, model.n);
  for (const auto& x : points) sites.push_back({x, {model.drift_jacobian(x)}});
  return sites;
}

inline std::string site_label(const Site& s, int i, int l) {
  return s.jacobians.size() == 1
             ? "point " + std::to_string(i)
             : "cell " + std::to_string(i) + " vertex " + std::to_string(l);
}

inline void check_spd(const std::string& where, const Eigen::MatrixXd& p,
                      int n) {
  if (p.rows() != n || p.cols() != n) {
    throw_invalid(where + ": metric P has the wrong size");
  }
  if (!p.isApprox(p.transpose(), 1e-12) || !(min_eigenvalue(p) > 0.0)) {
    throw_invalid(where + ": metric P must be symmetric positive definite");
  }
}

inline double neighbor_gap(const VertexHull& hull,
                           const std::vector<Eigen::RowVectorXd>& targets) {
  const int n = hull.domain.dim();
  const int r = hull.subdivisions;
  double gap = 0.0;
  for (std::size_t i = 0; i < hull.cells.size(); ++i) {
    long stride = 1;
    for (int a = n - 1; a >= 0; --a) {
      const long coord = (static_cast<long>(i) / stride) % r;
      if (coord + 1 < r) {
        gap = std::max(gap, (targets[i] - targets[i + stride]).norm());
      }
      stride *= r;
    }
  }
  return gap;
}

}  // namespace detail

/// Maximizes eps_p subject to Bperp (P - J P J^T) Bperp^T >= eps_p I at
/// every point (or every hull vertex) and I <= P <= rho I.
inline MetricResult solve_metric(const SystemModel& model,
                                 const PointSet& points,
                                 const VertexHull* hulls = nullptr,
                                 const SynthesisOptions& options = {}) {
  const int n = model.n;
  const auto sites = detail::make_sites(model, points, hulls);
  MetricResult out;
  if (!(options.rho > 1.0)) throw_invalid("solve_metric: rho must be > 1");

  const std::vector<Eigen::MatrixXd> basis = symmetric_basis(n);
  LmiProblem problem;
  problem.dim = static_cast<int>(basis.size());
  for (std::size_t i = 0; i < sites.size(); ++i) {
    const Eigen::MatrixXd bperp = left_annihilator(model.input_at(sites[i].x));
    if (bperp.rows() == 0) continue;
    for (std::size_t l = 0; l < sites[i].jacobians.size(); ++l) {
      const Eigen::MatrixXd& j = sites[i].jacobians[l];
      AffineBlock blk;
      blk.label = detail::site_label(sites[i], static_cast<int>(i),
                                     static_cast<int>(l));
      blk.constant = Eigen::MatrixXd::Zero(bperp.rows(), bperp.rows());
      for (std::size_t k = 0; k < basis.size(); ++k) {
        const Eigen::MatrixXd& e = basis[k];
        Eigen::MatrixXd c = bperp * (e - j * e * j.transpose()) *
                            bperp.transpose();
        blk.terms.emplace_back(static_cast<int>(k), 0.5 * (c + c.transpose()));
      }
      problem.blocks.push_back(std::move(blk));
    }
  }
  if (problem.blocks.empty()) {
    // Fully actuated: only P > 0 remains.
    out.p = Eigen::MatrixXd::Identity(n, n);
    out.eps_p = 1.0;
    out.status = LmiStatus::kOptimal;
    out.degenerate = true;
    return out;
  }
  AffineBlock lower, upper;
  lower.margin = upper.margin = false;
  lower.label = "P >= I";
  upper.label = "P <= rho I";
  lower.constant = -Eigen::MatrixXd::Identity(n, n);
  upper.constant = options.rho * Eigen::MatrixXd::Identity(n, n);
  for (std::size_t k = 0; k < basis.size(); ++k) {
    lower.terms.emplace_back(static_cast<int>(k), basis[k]);
    upper.terms.emplace_back(static_cast<int>(k), -basis[k]);
  }
  problem.blocks.push_back(lower);
  problem.blocks.push_back(upper);

  const LmiSolution sol = solve(problem, options.lmi);
  out.p = symmetric_from_vector(sol.z, n);
  out.eps_p = sol.margin;
  out.status = sol.status;
  out.message = sol.message;
  return out;
}

/// Fixed P; decision variables are the stacked gradient targets Y_p.
/// Handles state-dependent input vector fields through the extra
/// m_p(x) db(x) term, which is affine in Y_p as well.
inline SynthesisReport solve_gain(const SystemModel& model,
                                  const Eigen::MatrixXd& p,
                                  const Kernel& kernel, const PointSet& points,
                                  const VertexHull* hulls = nullptr,
                                  const SynthesisOptions& options = {}) {
  const int n = model.n;
  check_dim("solve_gain", "kernel", kernel.dim(), n);
  detail::check_spd("solve_gain", p, n);
  const auto sites = detail::make_sites(model, points, hulls);
  PointSet centers;
  for (const auto& s : sites) centers.push_back(s.x);
  const int count = static_cast<int>(centers.size());
  const bool varying_b = !model.constant_input();

  ResponseMaps maps;
  if (options.sigma_p == 0.0 && options.fit.jitter == 0.0 && !varying_b) {
    // Noiseless interpolation pins the gradient at each center to its
    // target, even where K0 later needs jitter to factor. The certified
    // margins below use the fitted controller and expose any gap.
    maps.gradient = Eigen::MatrixXd::Identity(n * count, n * count);
    maps.gradient_is_identity = true;
  } else {
    maps = response_maps(kernel, centers, options.sigma_p, centers, varying_b,
                         options.fit);
  }

  LmiProblem problem;
  problem.dim = n * count;
  for (int i = 0; i < count; ++i) {
    const Eigen::VectorXd bi = model.input_at(sites[i].x);
    const Eigen::MatrixXd dbi = model.input_jacobian_at(sites[i].x);
    const Eigen::MatrixXd gi = maps.gradient.middleRows(i * n, n);
    for (std::size_t l = 0; l < sites[i].jacobians.size(); ++l) {
      AffineBlock blk;
      blk.label = detail::site_label(sites[i], i, static_cast<int>(l));
      blk.constant = contraction_block(p, sites[i].jacobians[l]);
      for (int k = 0; k < problem.dim; ++k) {
        const Eigen::VectorXd col = gi.col(k);
        const double vk = varying_b ? maps.value(i, k) : 0.0;
        if (col.isZero(0.0) && vk == 0.0) continue;
        Eigen::MatrixXd lk = bi * col.transpose() * p;
        if (vk != 0.0) lk += vk * dbi * p;
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 2 * n);
        a.bottomLeftCorner(n, n) = lk;
        a.topRightCorner(n, n) = lk.transpose();
        blk.terms.emplace_back(k, std::move(a));
      }
      problem.blocks.push_back(std::move(blk));
    }
  }

  const LmiSolution sol = solve(problem, options.lmi);
  SynthesisReport report;
  report.mode = hulls ? SynthesisMode::kPolytopic : SynthesisMode::kTwoStep;
  report.p = p;
  report.eps = sol.margin;
  report.status = sol.status;
  report.message = sol.message;
  if (sol.ok() && sol.margin < options.margin_target) {
    report.status = LmiStatus::kInfeasible;
    report.message = "margin " + std::to_string(sol.margin) +
                     " below target " + std::to_string(options.margin_target);
  }

  DerivativeDataset data;
  data.points = centers;
  data.sigma_p = options.sigma_p;
  for (int i = 0; i < count; ++i) {
    data.targets.push_back(sol.z.segment(i * n, n).transpose());
  }
  report.controller = fit(kernel, data, options.fit);
  report.controller.set_metric(p);
  if (options.anchor_equilibrium && model.equilibrium) {
    report.controller.anchor_at(*model.equilibrium);
  }
  if (hulls != nullptr) {
    report.max_neighbor_target_gap = detail::neighbor_gap(*hulls, data.targets);
  }

  const std::vector<double> solver_margins = block_margins(problem, sol.z);
  int b = 0;
  for (int i = 0; i < count; ++i) {
    const Eigen::VectorXd& x = sites[i].x;
    const Eigen::RowVectorXd grad = report.controller.eval_control_grad(x);
    Eigen::MatrixXd extra = model.input_at(x) * grad;
    if (varying_b) {
      // Certified against the applied (anchored) control.
      extra += report.controller.eval_control(x) * model.input_jacobian_at(x);
    }
    for (std::size_t l = 0; l < sites[i].jacobians.size(); ++l, ++b) {
      ConstraintDiagnostic d;
      d.label = problem.blocks[b].label;
      d.site = i;
      d.vertex = static_cast<int>(l);
      d.x = x;
      d.solver_margin = solver_margins[b];
      d.certified_margin =
          contraction_margin(p, sites[i].jacobians[l] + extra);
      report.diagnostics.push_back(std::move(d));
    }
  }
  return report;
}

/// Two-step synthesis for an input vector field b(x).
inline SynthesisReport solve_gain_nonconstant_b(
    const SystemModel& model, const Eigen::MatrixXd& p, const Kernel& kernel,
    const PointSet& points, const SynthesisOptions& options = {}) {
  if (model.constant_input() && !model.input_jacobian) {
    // A constant b goes through the same path with db = 0.
    SystemModel varying = model;
    const Eigen::VectorXd b = model.b;
    varying.input_field = [b](const Eigen::VectorXd&) { return b; };
    const int n = model.n;
    varying.input_jacobian = [n](const Eigen::VectorXd&) {
      return Eigen::MatrixXd::Zero(n, n);
    };
    return solve_gain(varying, p, kernel, points, nullptr, options);
  }
  return solve_gain(model, p, kernel, points, nullptr, options);
}

/// Single LMI over (P, pbar_i, eps): [[P, *], [J_i P + b pbar_i, P]] >= eps I
/// with I <= P <= rho I. Gradient targets are pbar_i P^-1.
inline SynthesisReport solve_joint(const SystemModel& model,
                                   const Kernel& kernel,
                                   const PointSet& points,
                                   const SynthesisOptions& options = {}) {
  const int n = model.n;
  check_dim("solve_joint", "kernel", kernel.dim(), n);
  if (!model.constant_input()) {
    throw_invalid("solve_joint: requires a constant input vector");
  }
  if (options.sigma_p != 0.0) {
    throw_invalid("solve_joint: requires sigma_p = 0");
  }
  check_point_set("solve_joint", points, n);
  {
    const DerivativeGram g = build_gram_k0(kernel, points);
    Eigen::LLT<Eigen::MatrixXd> llt(g.k0);
    if (g.has_duplicate_points || llt.info() != Eigen::Success) {
      throw_numerical("solve_joint: K0 is not positive definite");
    }
  }
  const int count = static_cast<int>(points.size());
  const std::vector<Eigen::MatrixXd> basis = symmetric_basis(n);
  const int np = static_cast<int>(basis.size());
  LmiProblem problem;
  problem.dim = np + n * count;
  for (int i = 0; i < count; ++i) {
    const Eigen::MatrixXd j = model.drift_jacobian(points[i]);
    AffineBlock blk;
    blk.label = "point " + std::to_string(i);
    blk.constant = Eigen::MatrixXd::Zero(2 * n, 2 * n);
    for (int k = 0; k < np; ++k) {
      blk.terms.emplace_back(k, contraction_block(basis[k], j));
    }
    for (int c = 0; c < n; ++c) {
      const Eigen::MatrixXd l =
          model.b * Eigen::RowVectorXd::Unit(n, c);
      Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 2 * n);
      a.bottomLeftCorner(n, n) = l;
      a.topRightCorner(n, n) = l.transpose();
      blk.terms.emplace_back(np + i * n + c, std::move(a));
    }
    problem.blocks.push_back(std::move(blk));
  }
  AffineBlock lower, upper;
  lower.margin = upper.margin = false;
  lower.constant = -Eigen::MatrixXd::Identity(n, n);
  upper.constant = options.rho * Eigen::MatrixXd::Identity(n, n);
  for (int k = 0; k < np; ++k) {
    lower.terms.emplace_back(k, basis[k]);
    upper.terms.emplace_back(k, -basis[k]);
  }
  problem.blocks.push_back(lower);
  problem.blocks.push_back(upper);

  const LmiSolution sol = solve(problem, options.lmi);
  SynthesisReport report;
  report.mode = SynthesisMode::kJoint;
  report.p = symmetric_from_vector(sol.z.head(np), n);
  report.eps = sol.margin;
  report.eps_p = std::numeric_limits<double>::quiet_NaN();
  report.status = sol.status;
  report.message = sol.message;
  if (sol.ok() && sol.margin < options.margin_target) {
    report.status = LmiStatus::kInfeasible;
    report.message = "margin below target";
  }
  const Eigen::MatrixXd p_inv = report.p.llt().solve(
      Eigen::MatrixXd::Identity(n, n));
  DerivativeDataset data;
  data.points = points;
  for (int i = 0; i < count; ++i) {
    data.targets.push_back(sol.z.segment(np + i * n, n).transpose() * p_inv);
  }
  FitOptions strict = options.fit;
  report.controller = fit(kernel, data, strict);
  report.controller.set_metric(report.p);
  if (options.anchor_equilibrium && model.equilibrium) {
    report.controller.anchor_at(*model.equilibrium);
  }
  const std::vector<double> solver_margins = block_margins(problem, sol.z);
  for (int i = 0; i < count; ++i) {
    ConstraintDiagnostic d;
    d.label = problem.blocks[i].label;
    d.site = i;
    d.x = points[i];
    d.solver_margin = solver_margins[i];
    d.certified_margin = contraction_margin(
        report.p, model.drift_jacobian(points[i]) +
                      model.b * report.controller.eval_control_grad(points[i]));
    report.diagnostics.push_back(std::move(d));
  }
  return report;
}

/// Runs a full synthesis on `points` (two-step, joint) or on the cell
/// centers of `hulls` (polytopic).
inline SynthesisReport synthesize(const SystemModel& model,
                                  const Kernel& kernel, SynthesisMode mode,
                                  const PointSet& points,
                                  const VertexHull* hulls = nullptr,
                                  const SynthesisOptions& options = {}) {
  if (mode == SynthesisMode::kJoint) {
    return solve_joint(model, kernel, points, options);
  }
  if (mode == SynthesisMode::kPolytopic && hulls == nullptr) {
    throw_invalid("synthesize: polytopic mode needs hulls");
  }
  const VertexHull* h = mode == SynthesisMode::kPolytopic ? hulls : nullptr;
  const MetricResult metric = solve_metric(model, points, h, options);
  if (!metric.ok()) {
    SynthesisReport report;
    report.mode = mode;
    report.p = metric.p;
    report.eps_p = metric.eps_p;
    report.status = LmiStatus::kInfeasible;
    report.message = "metric step infeasible: " + metric.message;
    return report;
  }
  SynthesisReport report = solve_gain(model, metric.p, kernel, points, h,
                                      options);
  report.mode = mode;
  report.eps_p = metric.eps_p;
  return report;
}

}  // namespace gpcontract
