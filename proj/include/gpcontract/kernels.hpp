#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "gpcontract/error.hpp"

namespace gpcontract {

enum class KernelFamily { kSquaredExponential, kLinear, kPolynomial };

inline std::string to_string(KernelFamily family) {
  switch (family) {
    case KernelFamily::kSquaredExponential:
      return "squared_exponential";
    case KernelFamily::kLinear:
      return "linear";
    case KernelFamily::kPolynomial:
      return "polynomial";
  }
  return "unknown";
}

inline KernelFamily kernel_family_from_string(const std::string& name) {
  if (name == "squared_exponential" || name == "se") {
    return KernelFamily::kSquaredExponential;
  }
  if (name == "linear") return KernelFamily::kLinear;
  if (name == "polynomial") return KernelFamily::kPolynomial;
  throw_invalid("unknown kernel family '" + name + "'");
}

/// Positive-definite kernel with analytic first and cross-second derivatives.
///
///   squared_exponential: beta * exp(-|x - x'|^2_{S^-1} / 2)
///   linear:              beta * x^T S^-1 x'
///   polynomial:          beta * (1 + x^T S^-1 x')^degree
///
/// S is the length-scale matrix; it is held through its Cholesky factor.
/// Values are immutable after construction.
class Kernel {
 public:
  Kernel() : Kernel(KernelFamily::kSquaredExponential, 1.0,
                    Eigen::MatrixXd::Identity(1, 1), 1) {}

  Kernel(KernelFamily family, double beta, const Eigen::MatrixXd& sigma,
         int degree = 2)
      : family_(family), beta_(beta), degree_(degree), sigma_(sigma) {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
      throw_invalid("kernel: beta must be positive, got " +
                    std::to_string(beta));
    }
    if (sigma.rows() == 0 || sigma.rows() != sigma.cols()) {
      throw_invalid("kernel: sigma must be a non-empty square matrix");
    }
    if (!sigma.isApprox(sigma.transpose(), 1e-12) ||
        !sigma.allFinite()) {
      throw_invalid("kernel: sigma must be symmetric");
    }
    if (family == KernelFamily::kPolynomial && degree < 1) {
      throw_invalid("kernel: polynomial degree must be >= 1");
    }
    llt_.compute(sigma);
    if (llt_.info() != Eigen::Success) {
      throw_invalid("kernel: sigma must be positive definite");
    }
    sigma_inv_ = llt_.solve(Eigen::MatrixXd::Identity(dim(), dim()));
    sigma_inv_ = 0.5 * (sigma_inv_ + sigma_inv_.transpose()).eval();
  }

  static Kernel squared_exponential(double beta, const Eigen::MatrixXd& sigma) {
    return Kernel(KernelFamily::kSquaredExponential, beta, sigma);
  }
  /// Unit Gaussian kernel exp(-|x - x'|^2 / 2) in dimension n.
  static Kernel unit_gaussian(int n) {
    return squared_exponential(1.0, Eigen::MatrixXd::Identity(n, n));
  }
  static Kernel linear(double beta, const Eigen::MatrixXd& sigma) {
    return Kernel(KernelFamily::kLinear, beta, sigma);
  }
  static Kernel polynomial(double beta, const Eigen::MatrixXd& sigma,
                           int degree) {
    return Kernel(KernelFamily::kPolynomial, beta, sigma, degree);
  }

  KernelFamily family() const { return family_; }
  double beta() const { return beta_; }
  int degree() const { return degree_; }
  int dim() const { return static_cast<int>(sigma_.rows()); }
  const Eigen::MatrixXd& sigma() const { return sigma_; }
  bool stationary() const {
    return family_ == KernelFamily::kSquaredExponential;
  }

  double eval(const Eigen::VectorXd& x, const Eigen::VectorXd& xp) const {
    check_args("eval", x, xp);
    switch (family_) {
      case KernelFamily::kSquaredExponential: {
        const Eigen::VectorXd r = x - xp;
        return beta_ * std::exp(-0.5 * r.dot(llt_.solve(r)));
      }
      case KernelFamily::kLinear:
        return beta_ * x.dot(llt_.solve(xp));
      case KernelFamily::kPolynomial:
        return beta_ * std::pow(1.0 + x.dot(llt_.solve(xp)), degree_);
    }
    return 0.0;
  }

  /// Row vector dk(x, x')/dx'.
  Eigen::RowVectorXd grad_x2(const Eigen::VectorXd& x,
                             const Eigen::VectorXd& xp) const {
    check_args("grad_x2", x, xp);
    switch (family_) {
      case KernelFamily::kSquaredExponential: {
        const Eigen::VectorXd r = x - xp;
        const Eigen::VectorXd w = llt_.solve(r);
        return (beta_ * std::exp(-0.5 * r.dot(w))) * w.transpose();
      }
      case KernelFamily::kLinear:
        return beta_ * llt_.solve(x).transpose();
      case KernelFamily::kPolynomial: {
        const Eigen::VectorXd w = llt_.solve(x);
        const double s = 1.0 + w.dot(xp);
        return (beta_ * degree_ * std::pow(s, degree_ - 1)) * w.transpose();
      }
    }
    return Eigen::RowVectorXd::Zero(dim());
  }

  /// Row vector dk(x, x')/dx, obtained from symmetry of k.
  Eigen::RowVectorXd grad_x1(const Eigen::VectorXd& x,
                             const Eigen::VectorXd& xp) const {
    return grad_x2(xp, x);
  }

  /// Matrix d^2 k(x, x') / dx dx', entry (a, b) = d^2 k / dx_a dx'_b.
  Eigen::MatrixXd hess_cross(const Eigen::VectorXd& x,
                             const Eigen::VectorXd& xp) const {
    check_args("hess_cross", x, xp);
    switch (family_) {
      case KernelFamily::kSquaredExponential: {
        const Eigen::VectorXd r = x - xp;
        const Eigen::VectorXd w = llt_.solve(r);
        const double k = beta_ * std::exp(-0.5 * r.dot(w));
        return k * (sigma_inv_ - w * w.transpose());
      }
      case KernelFamily::kLinear:
        return beta_ * sigma_inv_;
      case KernelFamily::kPolynomial: {
        const Eigen::VectorXd wx = llt_.solve(x);
        const Eigen::VectorXd wxp = llt_.solve(xp);
        const double s = 1.0 + wx.dot(xp);
        Eigen::MatrixXd h = std::pow(s, degree_ - 1) * sigma_inv_;
        if (degree_ >= 2) {
          h += (degree_ - 1) * std::pow(s, degree_ - 2) * wxp *
               wx.transpose();
        }
        return beta_ * degree_ * h;
      }
    }
    return Eigen::MatrixXd::Zero(dim(), dim());
  }

 private:
  void check_args(const char* op, const Eigen::VectorXd& x,
                  const Eigen::VectorXd& xp) const {
    check_dim(std::string("kernel ") + op, "x", x.size(), dim());
    check_dim(std::string("kernel ") + op, "x'", xp.size(), dim());
  }

  KernelFamily family_;
  double beta_;
  int degree_;
  Eigen::MatrixXd sigma_;
  Eigen::MatrixXd sigma_inv_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

}  // namespace gpcontract
