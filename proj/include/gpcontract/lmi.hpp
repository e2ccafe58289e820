#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/error.hpp"

namespace gpcontract {

/// Symmetric block C + sum_k z_k A_k. Only nonzero coefficients are stored.
/// Margin blocks must satisfy block >= eps * I; constraint blocks (used for
/// normalizations such as I <= P <= rho I) must satisfy block >= 0 and do
/// not enter the margin.
struct AffineBlock {
  Eigen::MatrixXd constant;
  std::vector<std::pair<int, Eigen::MatrixXd>> terms;
  bool margin = true;
  std::string label;

  int size() const { return static_cast<int>(constant.rows()); }

  Eigen::MatrixXd assemble(const Eigen::VectorXd& z) const {
    Eigen::MatrixXd out = constant;
    for (const auto& [k, a] : terms) out += z[k] * a;
    return out;
  }
};

enum class LmiObjective { kFeasibility, kMaximizeMargin };

struct LmiProblem {
  int dim = 0;
  std::vector<AffineBlock> blocks;
  // Box bounds on z; empty means unbounded. Entries may be +-infinity.
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  LmiObjective objective = LmiObjective::kMaximizeMargin;

  void set_bounds(int k, double lo, double hi) {
    if (lower.size() != dim) {
      lower = Eigen::VectorXd::Constant(
          dim, -std::numeric_limits<double>::infinity());
      upper = Eigen::VectorXd::Constant(
          dim, std::numeric_limits<double>::infinity());
    }
    lower[k] = lo;
    upper[k] = hi;
  }

  double lower_bound(int k) const {
    return lower.size() == dim ? lower[k]
                               : -std::numeric_limits<double>::infinity();
  }
  double upper_bound(int k) const {
    return upper.size() == dim ? upper[k]
                               : std::numeric_limits<double>::infinity();
  }
};

enum class LmiStatus { kOptimal, kFeasible, kInfeasible, kNumericalFailure };

inline std::string to_string(LmiStatus s) {
  switch (s) {
    case LmiStatus::kOptimal:
      return "optimal";
    case LmiStatus::kFeasible:
      return "feasible";
    case LmiStatus::kInfeasible:
      return "infeasible";
    case LmiStatus::kNumericalFailure:
      return "numerical-failure";
  }
  return "unknown";
}

struct LmiSolution {
  Eigen::VectorXd z;
  double margin = 0.0;
  LmiStatus status = LmiStatus::kNumericalFailure;
  int worst_block = -1;
  int newton_iterations = 0;
  std::string message;

  bool ok() const {
    return status == LmiStatus::kOptimal || status == LmiStatus::kFeasible;
  }
};

struct LmiOptions {
  // A problem is declared feasible when the certified margin reaches this.
  double feasibility_tol = 1e-7;
  // Stop when the barrier duality-gap bound nu / tau falls below
  // gap_tol * (1 + |margin|).
  double gap_tol = 1e-10;
  double tau_growth = 8.0;
  int max_newton = 2000;
  // Margins beyond this are treated as unbounded.
  double unbounded_margin = 1e10;
};

inline double min_eigenvalue(const Eigen::MatrixXd& m) {
  if (m.rows() == 0) return std::numeric_limits<double>::infinity();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m,
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues()[0];
}

inline void check_problem(const LmiProblem& problem) {
  if (problem.blocks.empty()) throw_invalid("lmi: problem has no blocks");
  if (problem.dim < 0) throw_invalid("lmi: negative dimension");
  if (problem.lower.size() != 0 && problem.lower.size() != problem.dim) {
    throw_invalid("lmi: lower bound vector has wrong length");
  }
  if (problem.upper.size() != 0 && problem.upper.size() != problem.dim) {
    throw_invalid("lmi: upper bound vector has wrong length");
  }
  for (int k = 0; k < problem.dim; ++k) {
    if (!(problem.lower_bound(k) < problem.upper_bound(k))) {
      throw_invalid("lmi: empty bound interval for variable " +
                    std::to_string(k));
    }
  }
  bool any_margin = false;
  for (std::size_t j = 0; j < problem.blocks.size(); ++j) {
    const AffineBlock& b = problem.blocks[j];
    const std::string where = "lmi block " + std::to_string(j);
    if (b.constant.rows() != b.constant.cols()) {
      throw_invalid(where + ": constant is not square");
    }
    for (const auto& [k, a] : b.terms) {
      if (k < 0 || k >= problem.dim) {
        throw_invalid(where + ": variable index out of range");
      }
      if (a.rows() != b.size() || a.cols() != b.size()) {
        throw_invalid(where + ": coefficient size mismatch");
      }
    }
    any_margin = any_margin || b.margin;
  }
  if (!any_margin) throw_invalid("lmi: problem has no margin blocks");
}

/// min over margin blocks of lambda_min(C_j + sum_k z_k A_jk).
inline double assemble_margin(const LmiProblem& problem,
                              const Eigen::VectorXd& z,
                              int* worst_block = nullptr) {
  check_dim("assemble_margin", "z", z.size(), problem.dim);
  double best = std::numeric_limits<double>::infinity();
  int worst = -1;
  for (std::size_t j = 0; j < problem.blocks.size(); ++j) {
    const AffineBlock& b = problem.blocks[j];
    if (!b.margin || b.size() == 0) continue;
    const double m = min_eigenvalue(b.assemble(z));
    if (m < best) {
      best = m;
      worst = static_cast<int>(j);
    }
  }
  if (worst_block != nullptr) *worst_block = worst;
  return worst < 0 ? 0.0 : best;
}

/// Smallest eigenvalue over constraint (non-margin) blocks; +inf if none.
inline double constraint_slack(const LmiProblem& problem,
                               const Eigen::VectorXd& z) {
  double best = std::numeric_limits<double>::infinity();
  for (const AffineBlock& b : problem.blocks) {
    if (b.margin || b.size() == 0) continue;
    best = std::min(best, min_eigenvalue(b.assemble(z)));
  }
  return best;
}

/// Per-margin-block lambda_min at z (constraint blocks are skipped).
inline std::vector<double> block_margins(const LmiProblem& problem,
                                         const Eigen::VectorXd& z) {
  std::vector<double> out;
  for (const AffineBlock& b : problem.blocks) {
    if (!b.margin) continue;
    out.push_back(b.size() == 0 ? 0.0 : min_eigenvalue(b.assemble(z)));
  }
  return out;
}

namespace detail {

// Barrier state over w = (z, t): margin blocks are shifted by -t I.
class Barrier {
 public:
  Barrier(const LmiProblem& problem, bool with_margin)
      : problem_(problem), with_margin_(with_margin), m_(problem.dim) {
    nu_ = 0.0;
    for (const AffineBlock& b : problem.blocks) {
      if (b.margin && !with_margin_) continue;
      nu_ += b.size();
    }
    for (int k = 0; k < m_; ++k) {
      if (std::isfinite(problem.lower_bound(k))) nu_ += 1.0;
      if (std::isfinite(problem.upper_bound(k))) nu_ += 1.0;
    }
  }

  double nu() const { return nu_; }
  int size() const { return m_ + 1; }

  // Returns +inf when w is outside the domain.
  double value(const Eigen::VectorXd& w, double tau) const {
    double phi = -tau * w[m_];
    for (const AffineBlock& b : problem_.blocks) {
      if (b.size() == 0) continue;
      if (b.margin && !with_margin_) continue;
      Eigen::MatrixXd s = b.assemble(w.head(m_));
      if (b.margin) s.diagonal().array() -= w[m_];
      Eigen::LLT<Eigen::MatrixXd> llt(s);
      if (llt.info() != Eigen::Success) {
        return std::numeric_limits<double>::infinity();
      }
      const auto diag = llt.matrixLLT().diagonal().array();
      if ((diag <= 0.0).any()) return std::numeric_limits<double>::infinity();
      phi -= 2.0 * diag.log().sum();
    }
    for (int k = 0; k < m_; ++k) {
      const double lo = problem_.lower_bound(k);
      const double hi = problem_.upper_bound(k);
      if (std::isfinite(lo)) {
        if (w[k] <= lo) return std::numeric_limits<double>::infinity();
        phi -= std::log(w[k] - lo);
      }
      if (std::isfinite(hi)) {
        if (w[k] >= hi) return std::numeric_limits<double>::infinity();
        phi -= std::log(hi - w[k]);
      }
    }
    return phi;
  }

  // Gradient and Hessian of the barrier objective at w.
  bool derivatives(const Eigen::VectorXd& w, double tau, Eigen::VectorXd& g,
                   Eigen::MatrixXd& h) const {
    const int dim = size();
    g = Eigen::VectorXd::Zero(dim);
    h = Eigen::MatrixXd::Zero(dim, dim);
    g[m_] = -tau;
    std::vector<int> index;
    std::vector<Eigen::MatrixXd> whitened;
    for (const AffineBlock& b : problem_.blocks) {
      if (b.size() == 0) continue;
      if (b.margin && !with_margin_) continue;
      Eigen::MatrixXd s = b.assemble(w.head(m_));
      if (b.margin) s.diagonal().array() -= w[m_];
      Eigen::LLT<Eigen::MatrixXd> llt(s);
      if (llt.info() != Eigen::Success) return false;
      const auto l = llt.matrixL();
      index.clear();
      whitened.clear();
      for (const auto& [k, a] : b.terms) {
        Eigen::MatrixXd x = l.solve(a);
        x = l.solve(x.transpose()).eval();
        index.push_back(k);
        whitened.push_back(std::move(x));
      }
      if (b.margin) {
        Eigen::MatrixXd x = l.solve(
            -Eigen::MatrixXd::Identity(b.size(), b.size()));
        x = l.solve(x.transpose()).eval();
        index.push_back(m_);
        whitened.push_back(std::move(x));
      }
      for (std::size_t p = 0; p < index.size(); ++p) {
        g[index[p]] -= whitened[p].trace();
        for (std::size_t q = p; q < index.size(); ++q) {
          const double v = (whitened[p].array() * whitened[q].array()).sum();
          h(index[p], index[q]) += v;
          if (q != p) h(index[q], index[p]) += v;
        }
      }
    }
    for (int k = 0; k < m_; ++k) {
      const double lo = problem_.lower_bound(k);
      const double hi = problem_.upper_bound(k);
      if (std::isfinite(lo)) {
        const double d = w[k] - lo;
        g[k] -= 1.0 / d;
        h(k, k) += 1.0 / (d * d);
      }
      if (std::isfinite(hi)) {
        const double d = hi - w[k];
        g[k] += 1.0 / d;
        h(k, k) += 1.0 / (d * d);
      }
    }
    return true;
  }

 private:
  const LmiProblem& problem_;
  bool with_margin_;
  int m_;
  double nu_;
};

inline Eigen::VectorXd box_center(const LmiProblem& problem) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(problem.dim);
  for (int k = 0; k < problem.dim; ++k) {
    const double lo = problem.lower_bound(k);
    const double hi = problem.upper_bound(k);
    if (std::isfinite(lo) && std::isfinite(hi)) {
      z[k] = 0.5 * (lo + hi);
    } else if (std::isfinite(lo)) {
      z[k] = lo + 1.0;
    } else if (std::isfinite(hi)) {
      z[k] = hi - 1.0;
    }
  }
  return z;
}

// Path-following maximization of t subject to the blocks. Returns the final
// (z, t) in w.
inline LmiStatus follow_path(const LmiProblem& problem,
                             const LmiOptions& options, bool stop_at_target,
                             double target, Eigen::VectorXd& w,
                             int& newton_iterations, std::string& message) {
  const Barrier barrier(problem, true);
  const int dim = barrier.size();
  const int m = problem.dim;
  double tau = 1.0;
  Eigen::VectorXd g;
  Eigen::MatrixXd h;
  int stalls = 0;
  while (true) {
    // Centering by damped Newton.
    for (int inner = 0; inner < 200; ++inner) {
      if (newton_iterations >= options.max_newton) {
        message = "newton iteration limit reached at tau=" +
                  std::to_string(tau);
        return LmiStatus::kNumericalFailure;
      }
      ++newton_iterations;
      if (!barrier.derivatives(w, tau, g, h)) {
        message = "iterate left the barrier domain";
        return LmiStatus::kNumericalFailure;
      }
      const double reg = 1e-14 * std::max(1.0, h.diagonal().maxCoeff());
      h.diagonal().array() += reg;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
      const Eigen::VectorXd step = -ldlt.solve(g);
      if (!step.allFinite()) {
        message = "singular Newton system";
        return LmiStatus::kNumericalFailure;
      }
      const double decrement = -g.dot(step);
      if (decrement < 1e-9) break;
      const double phi0 = barrier.value(w, tau);
      double alpha = 1.0;
      bool accepted = false;
      for (int ls = 0; ls < 60; ++ls) {
        const Eigen::VectorXd trial = w + alpha * step;
        const double phi = barrier.value(trial, tau);
        if (phi <= phi0 - 0.25 * alpha * decrement) {
          w = trial;
          accepted = true;
          break;
        }
        alpha *= 0.5;
      }
      if (!accepted) {
        ++stalls;
        break;
      }
      if (w[m] > options.unbounded_margin) {
        throw_invalid(
            "lmi: margin is unbounded; add normalization bounds on the "
            "decision variables");
      }
    }
    (void)dim;
    if (stalls > 20) {
      message = "line search stalled repeatedly";
      return LmiStatus::kNumericalFailure;
    }
    if (stop_at_target && w[m] >= target) return LmiStatus::kFeasible;
    if (barrier.nu() / tau <= options.gap_tol * (1.0 + std::abs(w[m]))) {
      return LmiStatus::kOptimal;
    }
    tau *= options.tau_growth;
  }
}

}  // namespace detail

/// Maximizes eps such that every margin block is >= eps * I, every
/// constraint block is >= 0 and z respects its box bounds. With
/// LmiObjective::kFeasibility the search stops as soon as the certified
/// margin exceeds options.feasibility_tol.
inline LmiSolution solve(const LmiProblem& problem,
                         const LmiOptions& options = {}) {
  check_problem(problem);
  LmiSolution out;
  Eigen::VectorXd z = detail::box_center(problem);

  // Phase one: find a strict interior point of the constraint blocks.
  if (constraint_slack(problem, z) <= 0.0) {
    LmiProblem phase1;
    phase1.dim = problem.dim;
    phase1.lower = problem.lower;
    phase1.upper = problem.upper;
    phase1.objective = LmiObjective::kFeasibility;
    for (const AffineBlock& b : problem.blocks) {
      if (b.margin) continue;
      AffineBlock c = b;
      c.margin = true;
      phase1.blocks.push_back(std::move(c));
    }
    LmiOptions o1 = options;
    const LmiSolution s1 = solve(phase1, o1);
    if (!(s1.margin > 0.0)) {
      out.z = s1.z;
      out.margin = -std::numeric_limits<double>::infinity();
      out.status = LmiStatus::kInfeasible;
      out.message = "normalization constraints have empty interior";
      return out;
    }
    z = s1.z;
  }

  bool has_margin_vars = false;
  for (const AffineBlock& b : problem.blocks) {
    if (b.margin && b.size() > 0) has_margin_vars = true;
  }
  if (!has_margin_vars) {
    out.z = z;
    out.margin = 0.0;
    out.status = LmiStatus::kOptimal;
    return out;
  }

  double start = assemble_margin(problem, z);
  Eigen::VectorXd w(problem.dim + 1);
  w.head(problem.dim) = z;
  w[problem.dim] = start - std::max(1.0, std::abs(start));

  const bool stop_at_target = problem.objective == LmiObjective::kFeasibility;
  std::string message;
  int iterations = 0;
  const LmiStatus path = detail::follow_path(
      problem, options, stop_at_target, options.feasibility_tol, w,
      iterations, message);

  out.z = w.head(problem.dim);
  out.newton_iterations = iterations;
  out.margin = assemble_margin(problem, out.z, &out.worst_block);
  out.message = message;
  if (path == LmiStatus::kNumericalFailure) {
    out.status = LmiStatus::kNumericalFailure;
    if (out.margin >= options.feasibility_tol) {
      // The iterate is still certified even though the path stalled.
      out.status = LmiStatus::kFeasible;
    }
    return out;
  }
  if (out.margin >= options.feasibility_tol) {
    out.status = path == LmiStatus::kOptimal &&
                         problem.objective == LmiObjective::kMaximizeMargin
                     ? LmiStatus::kOptimal
                     : LmiStatus::kFeasible;
  } else {
    out.status = LmiStatus::kInfeasible;
    std::ostringstream os;
    os << "best achievable margin " << out.margin << " at block "
       << out.worst_block;
    if (out.worst_block >= 0 &&
        !problem.blocks[out.worst_block].label.empty()) {
      os << " (" << problem.blocks[out.worst_block].label << ")";
    }
    out.message = os.str();
  }
  return out;
}

}  // namespace gpcontract
