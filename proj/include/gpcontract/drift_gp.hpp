#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/deriv_gp.hpp"
#include "gpcontract/error.hpp"
#include "gpcontract/kernels.hpp"
#include "gpcontract/system.hpp"

namespace gpcontract {

/// Training data for the drift: row j of `targets` holds y^(j) for all
/// components. `inputs` is empty unless the input gain is learned too.
struct DriftDataset {
  PointSet points;
  Eigen::MatrixXd targets;
  Eigen::VectorXd sigma_y;
  Eigen::VectorXd inputs;

  int size() const { return static_cast<int>(points.size()); }
  int dim() const {
    return points.empty() ? 0 : static_cast<int>(points.front().size());
  }
  bool has_inputs() const { return inputs.size() > 0; }
};

/// Component known in closed form as c x + d (no learning, zero variance).
struct FixedComponent {
  Eigen::RowVectorXd c;
  double d = 0.0;
};

struct DriftComponent {
  std::optional<FixedComponent> fixed;
  Kernel kernel;
  double sigma_y = 0.0;
  Eigen::VectorXd weights;
  // Coefficient of u in the posterior mean (input-gain models only).
  double input_gain = 0.0;
  double regularization = 0.0;
  // Cholesky factor of K + sigma_y^2 I (+ u u^T).
  Eigen::LLT<Eigen::MatrixXd> llt;
};

/// Per-point variance information in the discrete-time model.
struct DriftVariances {
  Eigen::VectorXd sigma;                   // sigma_i(x)
  Eigen::VectorXd variance;                // v_i(x, x)
  std::vector<Eigen::MatrixXd> grad_cov;   // v_{d,i}(x, x), n x n
  std::vector<Eigen::MatrixXd> grad_sqrt;  // principal square roots
};

struct SigmaJacobian {
  Eigen::MatrixXd rows;      // row i is d sigma_i / dx
  std::vector<bool> floored;  // finite-difference fallback used
};

/// Component-wise GP posterior of the drift. With euler_dt > 0 the
/// components model the vector field g and the discrete map is
/// x + euler_dt * g(x); all discrete quantities below include that scaling.
class DriftModel {
 public:
  int dim() const { return n_; }
  double euler_dt() const { return euler_dt_; }
  const PointSet& points() const { return points_; }
  const Eigen::VectorXd& inputs() const { return inputs_; }
  const Eigen::MatrixXd& targets() const { return targets_; }
  const FitOptions& fit_options() const { return options_; }
  const std::vector<DriftComponent>& components() const { return comps_; }
  bool learned_input() const { return inputs_.size() > 0; }

  /// Posterior mean of component i in the learned space.
  double component_mean(int i, const Eigen::VectorXd& x) const {
    const DriftComponent& c = comps_.at(i);
    if (c.fixed) return c.fixed->c.dot(x) + c.fixed->d;
    double v = 0.0;
    for (std::size_t j = 0; j < points_.size(); ++j) {
      v += c.kernel.eval(points_[j], x) * c.weights[j];
    }
    return v;
  }

  Eigen::RowVectorXd component_grad(int i, const Eigen::VectorXd& x) const {
    const DriftComponent& c = comps_.at(i);
    if (c.fixed) return c.fixed->c;
    Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(n_);
    for (std::size_t j = 0; j < points_.size(); ++j) {
      g += c.weights[j] * c.kernel.grad_x2(points_[j], x);
    }
    return g;
  }

  /// v_i(x, x) in the learned space.
  double component_variance(int i, const Eigen::VectorXd& x) const {
    const DriftComponent& c = comps_.at(i);
    if (c.fixed) return 0.0;
    const Eigen::VectorXd k = kvec(c, x);
    const double v = c.kernel.eval(x, x) - k.dot(solve(c, k).col(0));
    return v;
  }

  /// d/dx of v_i(x, x).
  Eigen::RowVectorXd component_variance_grad(int i,
                                             const Eigen::VectorXd& x) const {
    const DriftComponent& c = comps_.at(i);
    if (c.fixed) return Eigen::RowVectorXd::Zero(n_);
    const Eigen::VectorXd ak = solve(c, kvec(c, x)).col(0);
    Eigen::RowVectorXd g = 2.0 * c.kernel.grad_x2(x, x);
    for (std::size_t j = 0; j < points_.size(); ++j) {
      g -= 2.0 * ak[j] * c.kernel.grad_x2(points_[j], x);
    }
    return g;
  }

  /// v_{d,i}(x, x): posterior covariance of the gradient row.
  Eigen::MatrixXd component_grad_cov(int i, const Eigen::VectorXd& x) const {
    const DriftComponent& c = comps_.at(i);
    if (c.fixed) return Eigen::MatrixXd::Zero(n_, n_);
    Eigen::MatrixXd g(points_.size(), n_);
    for (std::size_t j = 0; j < points_.size(); ++j) {
      g.row(j) = c.kernel.grad_x2(points_[j], x);
    }
    Eigen::MatrixXd v = c.kernel.hess_cross(x, x) - g.transpose() * solve(c, g);
    return 0.5 * (v + v.transpose());
  }

  double scale() const { return euler_dt_ > 0.0 ? euler_dt_ : 1.0; }

  Eigen::VectorXd drift(const Eigen::VectorXd& x) const {
    check_dim("drift model", "x", x.size(), n_);
    Eigen::VectorXd mu(n_);
    for (int i = 0; i < n_; ++i) mu[i] = component_mean(i, x);
    return euler_dt_ > 0.0 ? Eigen::VectorXd(x + euler_dt_ * mu) : mu;
  }

  Eigen::MatrixXd drift_jacobian(const Eigen::VectorXd& x) const {
    check_dim("drift model", "x", x.size(), n_);
    Eigen::MatrixXd j(n_, n_);
    for (int i = 0; i < n_; ++i) j.row(i) = component_grad(i, x);
    if (euler_dt_ > 0.0) {
      j = (Eigen::MatrixXd::Identity(n_, n_) + euler_dt_ * j).eval();
    }
    return j;
  }

  /// Learned input gain b-hat (discrete scaling applied).
  Eigen::VectorXd input_gain() const {
    Eigen::VectorXd b(n_);
    for (int i = 0; i < n_; ++i) b[i] = scale() * comps_[i].input_gain;
    return b;
  }

 private:
  template <typename Dataset>
  friend DriftModel fit_drift_impl(const Dataset&, const std::vector<Kernel>&,
                                   const std::vector<std::optional<FixedComponent>>&,
                                   double, const FitOptions&, bool);

  Eigen::VectorXd kvec(const DriftComponent& c, const Eigen::VectorXd& x) const {
    check_dim("drift model", "x", x.size(), n_);
    Eigen::VectorXd k(points_.size());
    for (std::size_t j = 0; j < points_.size(); ++j) {
      k[j] = c.kernel.eval(points_[j], x);
    }
    return k;
  }

  template <typename M>
  Eigen::MatrixXd solve(const DriftComponent& c, const M& rhs) const {
    if (points_.empty()) return Eigen::MatrixXd::Zero(rhs.rows(), rhs.cols());
    return c.llt.solve(rhs);
  }

  int n_ = 0;
  double euler_dt_ = 0.0;
  PointSet points_;
  Eigen::MatrixXd targets_;
  Eigen::VectorXd inputs_;
  FitOptions options_;
  std::vector<DriftComponent> comps_;
};

template <typename Dataset>
DriftModel fit_drift_impl(
    const Dataset& data, const std::vector<Kernel>& kernels,
    const std::vector<std::optional<FixedComponent>>& fixed, double euler_dt,
    const FitOptions& options, bool with_inputs) {
  const std::string where = with_inputs ? "fit_drift_with_input" : "fit_drift";
  const int n = static_cast<int>(kernels.size());
  if (n == 0) throw_invalid(where + ": no kernels given");
  if (!fixed.empty()) {
    check_dim(where, "fixed components", static_cast<long>(fixed.size()), n);
  }
  if (!(euler_dt >= 0.0)) throw_invalid(where + ": euler_dt must be >= 0");
  for (const Kernel& k : kernels) check_dim(where, "kernel", k.dim(), n);
  const int count = data.size();
  if (count > 0) check_point_set(where, data.points, n);
  check_dim(where, "targets rows", data.targets.rows(), count);
  if (count > 0) check_dim(where, "targets cols", data.targets.cols(), n);
  check_dim(where, "sigma_y", data.sigma_y.size(), n);
  if (!data.targets.allFinite()) {
    throw_invalid(where + ": targets contain NaN or Inf");
  }
  if ((data.sigma_y.array() < 0.0).any()) {
    throw_invalid(where + ": sigma_y must be >= 0");
  }
  if (with_inputs) {
    check_dim(where, "inputs", data.inputs.size(), count);
  }

  DriftModel model;
  model.n_ = n;
  model.euler_dt_ = euler_dt;
  model.points_ = data.points;
  model.targets_ = data.targets;
  model.options_ = options;
  if (with_inputs) model.inputs_ = data.inputs;
  for (int i = 0; i < n; ++i) {
    DriftComponent c;
    c.kernel = kernels[i];
    c.sigma_y = data.sigma_y[i];
    if (!fixed.empty() && fixed[i]) {
      check_dim(where, "fixed component " + std::to_string(i),
                fixed[i]->c.size(), n);
      c.fixed = fixed[i];
      model.comps_.push_back(std::move(c));
      continue;
    }
    if (count == 0) {
      c.weights = Eigen::VectorXd::Zero(0);
      model.comps_.push_back(std::move(c));
      continue;
    }
    Eigen::MatrixXd k(count, count);
    for (int a = 0; a < count; ++a) {
      for (int b = a; b < count; ++b) {
        k(a, b) = k(b, a) = c.kernel.eval(data.points[a], data.points[b]);
      }
    }
    if (with_inputs) k += data.inputs * data.inputs.transpose();
    c.regularization = factor_regularized(
        k, c.sigma_y * c.sigma_y + options.jitter, options.auto_jitter, c.llt,
        where + " component " + std::to_string(i));
    c.weights = c.llt.solve(Eigen::VectorXd(data.targets.col(i)));
    if (with_inputs) c.input_gain = data.inputs.dot(c.weights);
    model.comps_.push_back(std::move(c));
  }
  return model;
}

/// Fits each component f_i by standard GP regression with its own kernel.
/// Components with a FixedComponent skip learning.
inline DriftModel fit_drift(
    const DriftDataset& data, const std::vector<Kernel>& kernels,
    const std::vector<std::optional<FixedComponent>>& fixed = {},
    double euler_dt = 0.0, const FitOptions& options = {}) {
  return fit_drift_impl(data, kernels, fixed, euler_dt, options, false);
}

/// Fits g_i(x, u) = f_i(x) + b_i u with the kernel k_i(x, x') + u u'. The
/// mean is affine in u; its u-coefficient is the learned input gain.
inline DriftModel fit_drift_with_input(
    const DriftDataset& data, const std::vector<Kernel>& kernels,
    const std::vector<std::optional<FixedComponent>>& fixed = {},
    double euler_dt = 0.0, const FitOptions& options = {}) {
  if (!data.has_inputs()) {
    throw_invalid("fit_drift_with_input: dataset has no inputs");
  }
  return fit_drift_impl(data, kernels, fixed, euler_dt, options, true);
}

/// Posterior mean mu(x, u) of the input model (u = 0 gives the drift).
inline double input_model_mean(const DriftModel& model, int i,
                               const Eigen::VectorXd& x, double u) {
  return model.component_mean(i, x) + model.components().at(i).input_gain * u;
}

inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> drift_mean_and_jac(
    const DriftModel& model, const Eigen::VectorXd& x) {
  return {model.drift(x), model.drift_jacobian(x)};
}

/// Principal square root of a symmetric PSD matrix; eigenvalues above
/// -1e-10 (relative) are clipped to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& v,
                                const std::string& where) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (v + v.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -tol) {
    throw_numerical(where + ": covariance has eigenvalue " +
                    std::to_string(ev.minCoeff()) + " below tolerance");
  }
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

/// Discrete-time standard deviations sigma_i(x) and gradient covariances
/// v_{d,i}(x, x) with their square roots.
inline DriftVariances drift_variances(const DriftModel& model,
                                      const Eigen::VectorXd& x) {
  const int n = model.dim();
  check_dim("drift_variances", "x", x.size(), n);
  const double s = model.scale();
  DriftVariances out;
  out.sigma.resize(n);
  out.variance.resize(n);
  for (int i = 0; i < n; ++i) {
    double v = model.component_variance(i, x);
    const double tol =
        1e-10 * std::max(1.0, std::abs(model.components()[i].kernel.eval(x, x)));
    if (v < -tol) {
      throw_numerical("drift_variances: component " + std::to_string(i) +
                      " has negative variance " + std::to_string(v));
    }
    v = std::max(v, 0.0) * s * s;
    out.variance[i] = v;
    out.sigma[i] = std::sqrt(v);
    const Eigen::MatrixXd vd = s * s * model.component_grad_cov(i, x);
    out.grad_sqrt.push_back(psd_sqrt(vd, "drift_variances"));
    out.grad_cov.push_back(vd);
  }
  return out;
}

/// Rows d sigma_i / dx of the discrete-time standard deviations. Below
/// `floor` the analytic formula is singular; a one-sided finite difference
/// of sigma_i is returned instead and flagged.
inline SigmaJacobian sigma_jacobian(const DriftModel& model,
                                    const Eigen::VectorXd& x,
                                    double floor = 1e-8) {
  const int n = model.dim();
  check_dim("sigma_jacobian", "x", x.size(), n);
  const double s = model.scale();
  SigmaJacobian out;
  out.rows = Eigen::MatrixXd::Zero(n, n);
  out.floored.assign(n, false);
  auto sigma_at = [&](int i, const Eigen::VectorXd& p) {
    return s * std::sqrt(std::max(model.component_variance(i, p), 0.0));
  };
  for (int i = 0; i < n; ++i) {
    if (model.components()[i].fixed) continue;
    const double sig = sigma_at(i, x);
    if (sig >= floor) {
      out.rows.row(i) =
          s * s * model.component_variance_grad(i, x) / (2.0 * sig);
      continue;
    }
    out.floored[i] = true;
    const double h = 1e-6;
    for (int a = 0; a < n; ++a) {
      Eigen::VectorXd p = x;
      p[a] += h;
      // Conservative: magnitude of the one-sided slope.
      out.rows(i, a) = std::abs(sigma_at(i, p) - sig) / h;
    }
  }
  return out;
}

/// Wraps the posterior mean as a system model. The input vector is the
/// learned gain for input models, else `b`.
inline SystemModel to_system_model(const DriftModel& drift,
                                   const Eigen::VectorXd& b,
                                   std::optional<Eigen::VectorXd> equilibrium,
                                   std::string name = "learned") {
  SystemModel m;
  m.name = std::move(name);
  m.n = drift.dim();
  m.drift = [drift](const Eigen::VectorXd& x) { return drift.drift(x); };
  m.drift_jacobian = [drift](const Eigen::VectorXd& x) {
    return drift.drift_jacobian(x);
  };
  m.b = drift.learned_input() ? drift.input_gain() : b;
  check_dim("to_system_model", "b", m.b.size(), m.n);
  m.equilibrium = std::move(equilibrium);
  m.euler_dt = drift.euler_dt();
  return m;
}

/// Samples targets on `points` from a system: y = g(x) + noise where g is
/// the vector field (euler_dt > 0) or the drift map.
inline DriftDataset make_drift_dataset(const SystemModel& model,
                                       const PointSet& points,
                                       const Eigen::VectorXd& sigma_y,
                                       std::mt19937_64& rng) {
  check_point_set("make_drift_dataset", points, model.n);
  check_dim("make_drift_dataset", "sigma_y", sigma_y.size(), model.n);
  DriftDataset d;
  d.points = points;
  d.sigma_y = sigma_y;
  d.targets.resize(static_cast<Eigen::Index>(points.size()), model.n);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t j = 0; j < points.size(); ++j) {
    Eigen::VectorXd y = model.drift(points[j]);
    if (model.euler_dt > 0.0) y = (y - points[j]) / model.euler_dt;
    for (int i = 0; i < model.n; ++i) {
      // Always draw, so the stream does not depend on which sigmas are 0.
      const double w = normal(rng);
      y[i] += sigma_y[i] * w;
    }
    d.targets.row(static_cast<Eigen::Index>(j)) = y.transpose();
  }
  return d;
}

}  // namespace gpcontract
