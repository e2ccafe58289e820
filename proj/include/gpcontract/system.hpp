#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/error.hpp"

namespace gpcontract {

using VectorField = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using MatrixField = std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>;

/// Axis-aligned box [lo, hi].
struct Box {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  Box() = default;
  Box(Eigen::VectorXd lower, Eigen::VectorXd upper)
      : lo(std::move(lower)), hi(std::move(upper)) {
    if (lo.size() != hi.size() || lo.size() == 0) {
      throw_invalid("box: bounds must be non-empty and of equal length");
    }
    if (((hi - lo).array() < 0.0).any()) {
      throw_invalid("box: upper bound below lower bound");
    }
  }

  static Box cube(int n, double lower, double upper) {
    return Box(Eigen::VectorXd::Constant(n, lower),
               Eigen::VectorXd::Constant(n, upper));
  }

  int dim() const { return static_cast<int>(lo.size()); }
  Eigen::VectorXd center() const { return 0.5 * (lo + hi); }
  double diameter() const { return (hi - lo).norm(); }

  bool contains(const Eigen::VectorXd& x, double tol = 0.0) const {
    return ((x - lo).array() >= -tol).all() && ((hi - x).array() >= -tol).all();
  }

  /// Uniform grid with `per_axis` points per axis including the faces; the
  /// last coordinate varies fastest. per_axis == 1 gives the center.
  std::vector<Eigen::VectorXd> grid(int per_axis) const {
    if (per_axis < 1) throw_invalid("box grid: resolution must be >= 1");
    const int n = dim();
    long total = 1;
    for (int i = 0; i < n; ++i) total *= per_axis;
    std::vector<Eigen::VectorXd> out;
    out.reserve(total);
    std::vector<int> idx(n, 0);
    for (long c = 0; c < total; ++c) {
      Eigen::VectorXd x(n);
      for (int i = 0; i < n; ++i) {
        x[i] = per_axis == 1
                   ? 0.5 * (lo[i] + hi[i])
                   : lo[i] + (hi[i] - lo[i]) * idx[i] / (per_axis - 1.0);
      }
      out.push_back(std::move(x));
      for (int i = n - 1; i >= 0; --i) {
        if (++idx[i] < per_axis) break;
        idx[i] = 0;
      }
    }
    return out;
  }

  /// Points on the boundary: `count` points equally spaced along the
  /// perimeter of a 2-D box, or the two endpoints in 1-D.
  std::vector<Eigen::VectorXd> boundary_points(int count) const {
    std::vector<Eigen::VectorXd> out;
    if (dim() == 1) {
      out.push_back(lo);
      out.push_back(hi);
      return out;
    }
    if (dim() != 2) throw_invalid("boundary_points: only 1-D and 2-D boxes");
    const double w = hi[0] - lo[0], h = hi[1] - lo[1];
    const double perimeter = 2.0 * (w + h);
    for (int c = 0; c < count; ++c) {
      double s = perimeter * c / count;
      Eigen::VectorXd x(2);
      if (s < w) {
        x << lo[0] + s, lo[1];
      } else if ((s -= w) < h) {
        x << hi[0], lo[1] + s;
      } else if ((s -= h) < w) {
        x << hi[0] - s, hi[1];
      } else {
        s -= w;
        x << lo[0], hi[1] - s;
      }
      out.push_back(x);
    }
    return out;
  }
};

/// x_{k+1} = f(x_k) + b(x_k) u_k with a scalar input.
struct SystemModel {
  std::string name;
  int n = 0;
  VectorField drift;
  MatrixField drift_jacobian;
  // Constant input vector; used when input_field is empty.
  Eigen::VectorXd b;
  VectorField input_field;
  MatrixField input_jacobian;
  std::optional<Eigen::VectorXd> equilibrium;
  // When > 0 the drift has the form x + euler_dt * g(x); learning then
  // targets the vector field g instead of the map.
  double euler_dt = 0.0;

  bool constant_input() const { return !input_field; }

  Eigen::VectorXd input_at(const Eigen::VectorXd& x) const {
    return input_field ? input_field(x) : b;
  }

  Eigen::MatrixXd input_jacobian_at(const Eigen::VectorXd& x) const {
    return input_jacobian ? input_jacobian(x) : Eigen::MatrixXd::Zero(n, n);
  }

  Eigen::VectorXd step(const Eigen::VectorXd& x, double u) const {
    return drift(x) + input_at(x) * u;
  }
};

/// Checks dimensions, the Jacobian against central differences of the drift
/// (relative error < 1e-4) on `samples`, and the equilibrium if set.
inline void validate_model(const SystemModel& model,
                           const std::vector<Eigen::VectorXd>& samples) {
  const std::string where = "system '" + model.name + "'";
  if (model.n < 1) throw_invalid(where + ": state dimension must be >= 1");
  if (!model.drift || !model.drift_jacobian) {
    throw_invalid(where + ": drift and drift Jacobian are required");
  }
  if (model.constant_input()) {
    check_dim(where, "b", model.b.size(), model.n);
    if (model.b.norm() == 0.0) throw_invalid(where + ": b must be nonzero");
  }
  for (const Eigen::VectorXd& x : samples) {
    check_dim(where, "sample", x.size(), model.n);
    const Eigen::MatrixXd j = model.drift_jacobian(x);
    Eigen::MatrixXd fd(model.n, model.n);
    for (int c = 0; c < model.n; ++c) {
      const double h = 1e-6 * std::max(1.0, std::abs(x[c]));
      Eigen::VectorXd xp = x, xm = x;
      xp[c] += h;
      xm[c] -= h;
      fd.col(c) = (model.drift(xp) - model.drift(xm)) / (2.0 * h);
    }
    if ((j - fd).norm() > 1e-4 * std::max(1.0, fd.norm())) {
      throw_invalid(where + ": drift Jacobian disagrees with finite "
                            "differences of the drift");
    }
  }
  if (model.equilibrium) {
    check_dim(where, "equilibrium", model.equilibrium->size(), model.n);
    if ((model.drift(*model.equilibrium) - *model.equilibrium).norm() >= 1e-8) {
      throw_invalid(where + ": equilibrium is not a fixed point of the drift");
    }
  }
}

/// Forward-Euler negative-resistance oscillator:
///   f(x) = x + dt * [x2; -x1 + h(x1) x2],  b = [0; dt],
///   h(x1) = -x1 + x1^3 - x1^5/5 + x1^7/105.
inline SystemModel make_oscillator(double dt = 0.01) {
  auto h = [](double a) {
    return -a + std::pow(a, 3) - std::pow(a, 5) / 5.0 + std::pow(a, 7) / 105.0;
  };
  auto dh = [](double a) {
    return -1.0 + 3.0 * a * a - std::pow(a, 4) + std::pow(a, 6) / 15.0;
  };
  SystemModel m;
  m.name = "oscillator";
  m.n = 2;
  m.drift = [dt, h](const Eigen::VectorXd& x) {
    Eigen::VectorXd out(2);
    out << x[0] + dt * x[1], x[1] + dt * (-x[0] + h(x[0]) * x[1]);
    return out;
  };
  m.drift_jacobian = [dt, h, dh](const Eigen::VectorXd& x) {
    Eigen::MatrixXd j(2, 2);
    j << 1.0, dt, dt * (-1.0 + dh(x[0]) * x[1]), 1.0 + dt * h(x[0]);
    return j;
  };
  m.b = Eigen::Vector2d(0.0, dt);
  m.equilibrium = Eigen::VectorXd::Zero(2);
  m.euler_dt = dt;
  return m;
}

/// Scalar f(x) = x + dt sin(x), b = 1.
inline SystemModel make_sine1d(double dt = 0.01) {
  SystemModel m;
  m.name = "sine1d";
  m.n = 1;
  m.drift = [dt](const Eigen::VectorXd& x) {
    return Eigen::VectorXd::Constant(1, x[0] + dt * std::sin(x[0]));
  };
  m.drift_jacobian = [dt](const Eigen::VectorXd& x) {
    return Eigen::MatrixXd::Constant(1, 1, 1.0 + dt * std::cos(x[0]));
  };
  m.b = Eigen::VectorXd::Ones(1);
  m.equilibrium = Eigen::VectorXd::Zero(1);
  m.euler_dt = dt;
  return m;
}

inline SystemModel make_linear(const Eigen::MatrixXd& a,
                               const Eigen::VectorXd& b) {
  if (a.rows() != a.cols()) throw_invalid("linear system: A must be square");
  check_dim("linear system", "b", b.size(), a.rows());
  SystemModel m;
  m.name = "linear";
  m.n = static_cast<int>(a.rows());
  m.drift = [a](const Eigen::VectorXd& x) -> Eigen::VectorXd { return a * x; };
  m.drift_jacobian = [a](const Eigen::VectorXd&) -> Eigen::MatrixXd {
    return a;
  };
  m.b = b;
  m.equilibrium = Eigen::VectorXd::Zero(m.n);
  return m;
}

/// One term c * prod_j x_j^p_j of a polynomial drift component.
struct Monomial {
  double coeff = 0.0;
  std::vector<int> powers;
};

/// f_i(x) = sum of monomials; the Jacobian is differentiated term by term.
inline SystemModel make_polynomial(
    const std::vector<std::vector<Monomial>>& components,
    const Eigen::VectorXd& b) {
  const int n = static_cast<int>(components.size());
  if (n == 0) throw_invalid("polynomial system: no components");
  check_dim("polynomial system", "b", b.size(), n);
  for (const auto& comp : components) {
    for (const auto& term : comp) {
      check_dim("polynomial system", "monomial powers",
                static_cast<long>(term.powers.size()), n);
      for (int p : term.powers) {
        if (p < 0) throw_invalid("polynomial system: negative power");
      }
    }
  }
  auto monomial = [](const Monomial& t, const Eigen::VectorXd& x,
                     int skip_deriv) {
    double v = t.coeff;
    for (std::size_t j = 0; j < t.powers.size(); ++j) {
      int p = t.powers[j];
      if (static_cast<int>(j) == skip_deriv) {
        if (p == 0) return 0.0;
        v *= p;
        --p;
      }
      v *= std::pow(x[j], p);
    }
    return v;
  };
  SystemModel m;
  m.name = "polynomial";
  m.n = n;
  m.drift = [components, monomial, n](const Eigen::VectorXd& x) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < n; ++i) {
      for (const auto& t : components[i]) out[i] += monomial(t, x, -1);
    }
    return out;
  };
  m.drift_jacobian = [components, monomial, n](const Eigen::VectorXd& x) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
      for (const auto& t : components[i]) {
        for (int j = 0; j < n; ++j) out(i, j) += monomial(t, x, j);
      }
    }
    return out;
  };
  m.b = b;
  if (m.drift(Eigen::VectorXd::Zero(n)).norm() == 0.0) {
    m.equilibrium = Eigen::VectorXd::Zero(n);
  }
  return m;
}

}  // namespace gpcontract
