#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/error.hpp"
#include "gpcontract/kernels.hpp"

namespace gpcontract {

using PointSet = std::vector<Eigen::VectorXd>;

/// Gradient observations of a scalar function: target i is the row
/// vector observed at points[i]. Stacked in point order, the targets form
/// the nN-vector Y_p.
struct DerivativeDataset {
  PointSet points;
  std::vector<Eigen::RowVectorXd> targets;
  double sigma_p = 0.0;

  int dim() const {
    return points.empty() ? 0 : static_cast<int>(points.front().size());
  }
  int size() const { return static_cast<int>(points.size()); }

  Eigen::VectorXd stacked_targets() const {
    const int n = dim();
    Eigen::VectorXd y(n * size());
    for (int i = 0; i < size(); ++i) y.segment(i * n, n) = targets[i];
    return y;
  }
};

struct ValueObservation {
  Eigen::VectorXd x;
  double y = 0.0;
};

struct DerivativeGram {
  Eigen::MatrixXd k0;
  // Two or more coincident points make k0 singular.
  bool has_duplicate_points = false;
};

inline void check_point_set(const std::string& where, const PointSet& points,
                            int n) {
  if (points.empty()) throw_invalid(where + ": point set is empty");
  for (std::size_t i = 0; i < points.size(); ++i) {
    check_dim(where, "points[" + std::to_string(i) + "]", points[i].size(),
              n);
    if (!points[i].allFinite()) {
      throw_invalid(where + ": points[" + std::to_string(i) +
                    "] is not finite");
    }
  }
}

/// Block matrix of cross-second derivatives between points; block (i, j)
/// is hess_cross(points[i], points[j]).
inline DerivativeGram build_gram_k0(const Kernel& kernel,
                                    const PointSet& points) {
  const int n = kernel.dim();
  check_point_set("build_gram_k0", points, n);
  const int count = static_cast<int>(points.size());
  DerivativeGram out;
  out.k0.resize(n * count, n * count);
  for (int i = 0; i < count; ++i) {
    for (int j = i; j < count; ++j) {
      const Eigen::MatrixXd block = kernel.hess_cross(points[i], points[j]);
      out.k0.block(i * n, j * n, n, n) = block;
      if (j != i) {
        out.k0.block(j * n, i * n, n, n) = block.transpose();
      } else {
        // Enforce exact symmetry of diagonal blocks.
        out.k0.block(i * n, i * n, n, n) =
            0.5 * (block + block.transpose());
      }
      if (j != i && (points[i] - points[j]).norm() == 0.0) {
        out.has_duplicate_points = true;
      }
    }
  }
  return out;
}

inline double default_jitter(const Eigen::MatrixXd& gram) {
  const double scale = gram.rows() > 0 ? gram.trace() / gram.rows() : 1.0;
  return 1e-10 * std::max(scale, 1e-300);
}

/// Cholesky factorization of gram + reg * I. When that fails and
/// `auto_jitter` is set, one retry adds default_jitter(gram).
/// Returns the regularization actually used.
inline double factor_regularized(const Eigen::MatrixXd& gram, double reg,
                                 bool auto_jitter,
                                 Eigen::LLT<Eigen::MatrixXd>& llt,
                                 const std::string& where) {
  const Eigen::Index size = gram.rows();
  llt.compute(gram + reg * Eigen::MatrixXd::Identity(size, size));
  if (llt.info() == Eigen::Success) return reg;
  if (auto_jitter) {
    const double bumped = reg + default_jitter(gram);
    llt.compute(gram + bumped * Eigen::MatrixXd::Identity(size, size));
    if (llt.info() == Eigen::Success) return bumped;
  }
  throw_numerical(where +
                  ": Gram matrix is not positive definite; add jitter or "
                  "noise, or remove duplicate points");
}

struct FitOptions {
  double jitter = 0.0;
  bool auto_jitter = true;
};

/// Controller u = m_p(x) realized as the posterior mean of a zero-mean GP
/// conditioned on gradient data (and optionally on value data).
class DerivativeController {
 public:
  DerivativeController() = default;

  DerivativeController(Kernel kernel, PointSet points, Eigen::VectorXd weights)
      : kernel_(std::move(kernel)),
        points_(std::move(points)),
        weights_(std::move(weights)) {
    validate();
  }

  DerivativeController(Kernel kernel, PointSet points, Eigen::VectorXd weights,
                       PointSet value_points, Eigen::VectorXd value_weights)
      : kernel_(std::move(kernel)),
        points_(std::move(points)),
        weights_(std::move(weights)),
        value_points_(std::move(value_points)),
        value_weights_(std::move(value_weights)) {
    validate();
  }

  const Kernel& kernel() const { return kernel_; }
  int dim() const { return kernel_.dim(); }
  const PointSet& points() const { return points_; }
  const Eigen::VectorXd& weights() const { return weights_; }
  const PointSet& value_points() const { return value_points_; }
  const Eigen::VectorXd& value_weights() const { return value_weights_; }
  double offset() const { return offset_; }
  const std::optional<Eigen::VectorXd>& anchor() const { return anchor_; }
  const std::optional<Eigen::MatrixXd>& metric() const { return metric_; }
  double regularization() const { return regularization_; }

  void set_metric(const Eigen::MatrixXd& p) { metric_ = p; }
  void set_regularization(double reg) { regularization_ = reg; }

  /// Shifts the control so that eval_control(x_star) == 0. The gradient is
  /// unchanged.
  void anchor_at(const Eigen::VectorXd& x_star) {
    check_dim("anchor_at", "x*", x_star.size(), dim());
    offset_ = 0.0;
    offset_ = raw_value(x_star);
    anchor_ = x_star;
  }

  /// Restores a serialized anchor without re-evaluating.
  void set_anchor(std::optional<Eigen::VectorXd> x_star, double offset) {
    anchor_ = std::move(x_star);
    offset_ = offset;
  }

  double eval_control(const Eigen::VectorXd& x) const {
    check_dim("eval_control", "x", x.size(), dim());
    return raw_value(x) - offset_;
  }

  Eigen::RowVectorXd eval_control_grad(const Eigen::VectorXd& x) const {
    check_dim("eval_control_grad", "x", x.size(), dim());
    const int n = dim();
    Eigen::RowVectorXd g = Eigen::RowVectorXd::Zero(n);
    for (std::size_t i = 0; i < points_.size(); ++i) {
      g += (kernel_.hess_cross(x, points_[i]) * weights_.segment(i * n, n))
               .transpose();
    }
    for (std::size_t m = 0; m < value_points_.size(); ++m) {
      g += value_weights_[m] * kernel_.grad_x1(x, value_points_[m]);
    }
    return g;
  }

  /// Floating-point error scale of eval_control at x: eps * sqrt(m) times
  /// the sum of absolute terms (m terms). Large interpolation weights make
  /// this much bigger than eps * |u|.
  double control_roundoff(const Eigen::VectorXd& x) const {
    check_dim("control_roundoff", "x", x.size(), dim());
    const int n = dim();
    double s = std::abs(offset_);
    for (std::size_t i = 0; i < points_.size(); ++i) {
      s += kernel_.grad_x2(x, points_[i])
               .cwiseAbs()
               .dot(weights_.segment(i * n, n).cwiseAbs());
    }
    for (std::size_t m = 0; m < value_points_.size(); ++m) {
      s += std::abs(value_weights_[m] * kernel_.eval(x, value_points_[m]));
    }
    const double terms =
        static_cast<double>(n * points_.size() + value_points_.size() + 1);
    return std::numeric_limits<double>::epsilon() * std::sqrt(terms) * s;
  }

 private:
  double raw_value(const Eigen::VectorXd& x) const {
    const int n = dim();
    double v = 0.0;
    for (std::size_t i = 0; i < points_.size(); ++i) {
      v += kernel_.grad_x2(x, points_[i]).dot(weights_.segment(i * n, n));
    }
    for (std::size_t m = 0; m < value_points_.size(); ++m) {
      v += value_weights_[m] * kernel_.eval(x, value_points_[m]);
    }
    return v;
  }

  void validate() const {
    const int n = kernel_.dim();
    for (const auto& p : points_) check_dim("controller", "point", p.size(), n);
    for (const auto& p : value_points_) {
      check_dim("controller", "value point", p.size(), n);
    }
    check_dim("controller", "weights", weights_.size(),
              n * static_cast<long>(points_.size()));
    check_dim("controller", "value weights", value_weights_.size(),
              static_cast<long>(value_points_.size()));
  }

  Kernel kernel_;
  PointSet points_;
  Eigen::VectorXd weights_;
  PointSet value_points_;
  Eigen::VectorXd value_weights_;
  double offset_ = 0.0;
  std::optional<Eigen::VectorXd> anchor_;
  std::optional<Eigen::MatrixXd> metric_;
  double regularization_ = 0.0;
};

inline void check_dataset(const std::string& where, const Kernel& kernel,
                          const DerivativeDataset& data) {
  const int n = kernel.dim();
  check_point_set(where, data.points, n);
  if (data.targets.size() != data.points.size()) {
    throw_invalid(where + ": " + std::to_string(data.targets.size()) +
                  " targets for " + std::to_string(data.points.size()) +
                  " points");
  }
  for (std::size_t i = 0; i < data.targets.size(); ++i) {
    check_dim(where, "targets[" + std::to_string(i) + "]",
              data.targets[i].size(), n);
    if (!data.targets[i].allFinite()) {
      throw_invalid(where + ": targets[" + std::to_string(i) +
                    "] contains NaN or Inf");
    }
  }
  if (!(data.sigma_p >= 0.0)) throw_invalid(where + ": sigma_p must be >= 0");
}

/// Solves (K0 + sigma_p^2 I) h = Y_p and wraps the weights as a controller.
inline DerivativeController fit(const Kernel& kernel,
                                const DerivativeDataset& data,
                                const FitOptions& options = {}) {
  check_dataset("fit", kernel, data);
  if (!(options.jitter >= 0.0)) throw_invalid("fit: jitter must be >= 0");
  const DerivativeGram gram = build_gram_k0(kernel, data.points);
  Eigen::LLT<Eigen::MatrixXd> llt;
  const double reg = factor_regularized(
      gram.k0, data.sigma_p * data.sigma_p + options.jitter,
      options.auto_jitter, llt, "fit");
  Eigen::VectorXd h = llt.solve(data.stacked_targets());
  DerivativeController out(kernel, data.points, std::move(h));
  out.set_regularization(reg);
  return out;
}

/// Posterior mean conditioned jointly on gradient data and value data.
/// `sigma` is the value-observation noise std.
inline DerivativeController fit_with_values(
    const Kernel& kernel, const DerivativeDataset& data,
    const std::vector<ValueObservation>& values, double sigma,
    const FitOptions& options = {}) {
  if (values.empty()) return fit(kernel, data, options);
  check_dataset("fit_with_values", kernel, data);
  if (!(sigma >= 0.0)) throw_invalid("fit_with_values: sigma must be >= 0");
  const int n = kernel.dim();
  const int nd = data.size();
  const int nv = static_cast<int>(values.size());
  PointSet value_points;
  for (std::size_t m = 0; m < values.size(); ++m) {
    check_dim("fit_with_values", "values[" + std::to_string(m) + "].x",
              values[m].x.size(), n);
    if (!std::isfinite(values[m].y)) {
      throw_invalid("fit_with_values: value target is not finite");
    }
    value_points.push_back(values[m].x);
  }

  // Joint Gram ordered [values; gradients].
  const int size = nv + n * nd;
  Eigen::MatrixXd g(size, size);
  for (int a = 0; a < nv; ++a) {
    for (int b = 0; b < nv; ++b) {
      g(a, b) = kernel.eval(value_points[a], value_points[b]);
    }
    for (int j = 0; j < nd; ++j) {
      const Eigen::RowVectorXd c = kernel.grad_x2(value_points[a],
                                                  data.points[j]);
      g.block(a, nv + j * n, 1, n) = c;
      g.block(nv + j * n, a, n, 1) = c.transpose();
    }
  }
  g.bottomRightCorner(n * nd, n * nd) = build_gram_k0(kernel, data.points).k0;
  Eigen::VectorXd diag(size);
  diag.head(nv).setConstant(sigma * sigma);
  diag.tail(n * nd).setConstant(data.sigma_p * data.sigma_p);
  g.diagonal() += diag;

  Eigen::LLT<Eigen::MatrixXd> llt;
  const double reg = factor_regularized(g, options.jitter, options.auto_jitter,
                                        llt, "fit_with_values");
  Eigen::VectorXd rhs(size);
  for (int a = 0; a < nv; ++a) rhs[a] = values[a].y;
  rhs.tail(n * nd) = data.stacked_targets();
  const Eigen::VectorXd alpha = llt.solve(rhs);
  DerivativeController out(kernel, data.points, alpha.tail(n * nd),
                           std::move(value_points), alpha.head(nv));
  out.set_regularization(reg);
  return out;
}

/// Linear maps from the stacked targets Y_p to the controller's gradients
/// (stacked rows, n*M x n*N) and values (M x n*N) at `eval_points`.
struct ResponseMaps {
  Eigen::MatrixXd gradient;
  Eigen::MatrixXd value;
  bool gradient_is_identity = false;
};

inline ResponseMaps response_maps(const Kernel& kernel, const PointSet& points,
                                  double sigma_p, const PointSet& eval_points,
                                  bool need_values,
                                  const FitOptions& options = {}) {
  const int n = kernel.dim();
  check_point_set("response_maps", points, n);
  check_point_set("response_maps", eval_points, n);
  const int nd = static_cast<int>(points.size());
  const int ne = static_cast<int>(eval_points.size());
  const DerivativeGram gram = build_gram_k0(kernel, points);
  Eigen::LLT<Eigen::MatrixXd> llt;
  const double reg =
      factor_regularized(gram.k0, sigma_p * sigma_p + options.jitter,
                         options.auto_jitter, llt, "response_maps");
  ResponseMaps out;
  bool same_points = reg == 0.0 && ne == nd;
  for (int i = 0; same_points && i < nd; ++i) {
    same_points = (points[i] - eval_points[i]).norm() == 0.0;
  }
  if (same_points) {
    // Noiseless interpolation: gradient at data point i is target i.
    out.gradient = Eigen::MatrixXd::Identity(n * nd, n * nd);
    out.gradient_is_identity = true;
  } else {
    Eigen::MatrixXd cross(n * ne, n * nd);
    for (int e = 0; e < ne; ++e) {
      for (int j = 0; j < nd; ++j) {
        cross.block(e * n, j * n, n, n) =
            kernel.hess_cross(eval_points[e], points[j]);
      }
    }
    // cross * (K0 + reg I)^-1, using symmetry of the factored matrix.
    out.gradient = llt.solve(cross.transpose()).transpose();
  }
  if (need_values) {
    Eigen::MatrixXd cross(ne, n * nd);
    for (int e = 0; e < ne; ++e) {
      for (int j = 0; j < nd; ++j) {
        cross.block(e, j * n, 1, n) = kernel.grad_x2(eval_points[e], points[j]);
      }
    }
    out.value = llt.solve(cross.transpose()).transpose();
  }
  return out;
}

}  // namespace gpcontract
