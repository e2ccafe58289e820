#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gpcontract/deriv_gp.hpp"
#include "gpcontract/drift_gp.hpp"
#include "gpcontract/error.hpp"
#include "gpcontract/io.hpp"
#include "gpcontract/kernels.hpp"
#include "gpcontract/stochastic.hpp"
#include "gpcontract/synthesis.hpp"
#include "gpcontract/system.hpp"
#include "gpcontract/verify.hpp"

namespace gpcontract::pipeline {

namespace fs = std::filesystem;
using io::json;

inline constexpr int kConfigVersion = 1;

struct FixedRow {
  int row = 0;
  Eigen::RowVectorXd c;
  double d = 0.0;
};

struct PipelineConfig {
  std::string system = "oscillator";
  double dt = 0.01;
  // Only for system == "polynomial".
  std::vector<std::vector<Monomial>> polynomial;
  Eigen::VectorXd polynomial_b;
  std::optional<Eigen::VectorXd> equilibrium;

  Box data_domain;
  int data_grid = 11;
  double sigma_y = 0.01;
  bool euler_learning = true;
  std::optional<Kernel> drift_kernel;
  std::optional<std::vector<FixedRow>> fixed_rows;

  Box domain;
  int controller_grid = 7;
  std::optional<Kernel> controller_kernel;
  std::string model_source = "learned";
  SynthesisMode mode = SynthesisMode::kTwoStep;
  SynthesisOptions synthesis;
  HullOptions hull;

  int verify_resolution = 41;
  bool moment_check = true;
  int moment_resolution = 21;
  double chebyshev_c = 40.0;

  int steps = 10000;
  int initial_count = 16;
  std::vector<Eigen::VectorXd> initial_states;
  std::optional<Eigen::VectorXd> baseline_gain;
  std::optional<double> converge_ratio;
  bool svg = false;
  int portrait_stride = 10;

  std::uint64_t seed = 7;
  fs::path out = "out";
  bool quiet = false;
};

// ---- systems ----------------------------------------------------------

inline SystemModel true_system(const PipelineConfig& c) {
  if (c.system == "oscillator") return make_oscillator(c.dt);
  if (c.system == "sine1d") return make_sine1d(c.dt);
  if (c.system == "polynomial") {
    SystemModel m = make_polynomial(c.polynomial, c.polynomial_b);
    if (c.equilibrium) m.equilibrium = c.equilibrium;
    return m;
  }
  throw_invalid("config: unknown system '" + c.system + "'");
}

inline int system_dim(const PipelineConfig& c) {
  if (c.system == "oscillator") return 2;
  if (c.system == "sine1d") return 1;
  return static_cast<int>(c.polynomial.size());
}

inline Kernel drift_kernel(const PipelineConfig& c) {
  return c.drift_kernel ? *c.drift_kernel
                        : Kernel::unit_gaussian(system_dim(c));
}

inline Kernel controller_kernel(const PipelineConfig& c) {
  return c.controller_kernel ? *c.controller_kernel
                             : Kernel::unit_gaussian(system_dim(c));
}

/// Oscillator default: the kinematic row x_1' = x_1 + dt x_2 is known.
inline std::vector<FixedRow> fixed_rows(const PipelineConfig& c) {
  if (c.fixed_rows) return *c.fixed_rows;
  if (c.system != "oscillator") return {};
  FixedRow r;
  r.c = c.euler_learning ? Eigen::RowVector2d(0.0, 1.0)
                         : Eigen::RowVector2d(1.0, c.dt);
  return {r};
}

inline double converge_ratio(const PipelineConfig& c) {
  if (c.converge_ratio) return *c.converge_ratio;
  return c.model_source == "learned" ? 0.1 : 0.05;
}

inline std::vector<Eigen::VectorXd> initial_states(const PipelineConfig& c) {
  if (!c.initial_states.empty()) return c.initial_states;
  return c.domain.boundary_points(c.initial_count);
}

// ---- config ----------------------------------------------------------

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& keys,
                           const std::string& where) {
  if (!j.is_object()) throw_invalid("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) {
      throw_invalid("config: unknown key '" + k + "' in " + where);
    }
  }
}

template <typename T>
void read(const json& j, const std::string& key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw_invalid("config: bad value for '" + key + "'");
  }
}

inline Box read_box(const json& j, const std::string& where) {
  reject_unknown(j, {"lower", "upper"}, where);
  return Box(io::to_vec(io::field(j, "lower", where), where),
             io::to_vec(io::field(j, "upper", where), where));
}

/// {family, beta, sigma, degree}; a scalar sigma means sigma * I.
inline Kernel read_kernel(const json& j, int n, const std::string& where) {
  reject_unknown(j, {"family", "beta", "sigma", "degree"}, where);
  std::string family = "squared_exponential";
  double beta = 1.0;
  int degree = 2;
  read(j, "family", family);
  read(j, "beta", beta);
  read(j, "degree", degree);
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Identity(n, n);
  if (j.contains("sigma")) {
    if (j.at("sigma").is_number()) {
      sigma *= j.at("sigma").get<double>();
    } else {
      sigma = io::to_mat(j.at("sigma"), where + ".sigma");
    }
  }
  return Kernel(kernel_family_from_string(family), beta, sigma, degree);
}

}  // namespace detail

inline PipelineConfig default_config(const std::string& system = "oscillator") {
  PipelineConfig c;
  c.system = system;
  if (system == "sine1d") {
    c.data_domain = Box::cube(1, 0.0, std::numbers::pi);
    c.domain = Box::cube(1, 0.0, std::numbers::pi);
  } else {
    c.data_domain = Box::cube(2, -3.0, 3.0);
    c.domain = Box::cube(2, -2.0, 2.0);
  }
  if (system == "oscillator") {
    c.baseline_gain = Eigen::Vector2d(-49.8, 40.6);
  }
  return c;
}

inline PipelineConfig parse_config(const json& j) {
  using detail::read;
  detail::reject_unknown(j,
                         {"version", "system", "data", "controller", "verify",
                          "stochastic", "simulate", "seed", "out"},
                         "config");
  int version = 0;
  read(j, "version", version);
  if (version != kConfigVersion) {
    throw_invalid("config: unsupported version " + std::to_string(version) +
                  " (expected " + std::to_string(kConfigVersion) + ")");
  }
  std::string system = "oscillator";
  const json sys = j.value("system", json::object());
  detail::reject_unknown(sys, {"builtin", "dt", "components", "b", "equilibrium"},
                         "system");
  read(sys, "builtin", system);
  PipelineConfig c = default_config(system);
  read(sys, "dt", c.dt);
  if (system == "polynomial") {
    for (const json& comp : io::field(sys, "components", "system")) {
      std::vector<Monomial> terms;
      for (const json& t : comp) {
        detail::reject_unknown(t, {"coeff", "powers"}, "monomial");
        Monomial m;
        read(t, "coeff", m.coeff);
        read(t, "powers", m.powers);
        terms.push_back(m);
      }
      c.polynomial.push_back(terms);
    }
    c.polynomial_b = io::to_vec(io::field(sys, "b", "system"), "system.b");
    c.euler_learning = false;
  }
  if (sys.contains("equilibrium")) {
    c.equilibrium = io::to_vec(sys.at("equilibrium"), "system.equilibrium");
  }
  const int n = system_dim(c);

  const json data = j.value("data", json::object());
  detail::reject_unknown(data,
                         {"domain", "grid", "sigma_y", "euler", "kernel",
                          "fixed_rows"},
                         "data");
  if (data.contains("domain")) c.data_domain = detail::read_box(data.at("domain"), "data.domain");
  read(data, "grid", c.data_grid);
  read(data, "sigma_y", c.sigma_y);
  read(data, "euler", c.euler_learning);
  if (data.contains("kernel")) {
    c.drift_kernel = detail::read_kernel(data.at("kernel"), n, "data.kernel");
  }
  if (data.contains("fixed_rows")) {
    std::vector<FixedRow> rows;
    for (const json& r : data.at("fixed_rows")) {
      detail::reject_unknown(r, {"row", "c", "d"}, "fixed_rows");
      FixedRow f;
      read(r, "row", f.row);
      f.c = io::to_vec(io::field(r, "c", "fixed_rows"), "fixed_rows.c").transpose();
      read(r, "d", f.d);
      rows.push_back(f);
    }
    c.fixed_rows = rows;
  }

  const json ctl = j.value("controller", json::object());
  detail::reject_unknown(ctl,
                         {"domain", "grid", "kernel", "model", "mode", "rho",
                          "sigma_p", "margin_target", "hull"},
                         "controller");
  if (ctl.contains("domain")) c.domain = detail::read_box(ctl.at("domain"), "controller.domain");
  read(ctl, "grid", c.controller_grid);
  if (ctl.contains("kernel")) {
    c.controller_kernel = detail::read_kernel(ctl.at("kernel"), n, "controller.kernel");
  }
  read(ctl, "model", c.model_source);
  std::string mode = to_string(c.mode);
  read(ctl, "mode", mode);
  c.mode = synthesis_mode_from_string(mode);
  read(ctl, "rho", c.synthesis.rho);
  read(ctl, "sigma_p", c.synthesis.sigma_p);
  read(ctl, "margin_target", c.synthesis.margin_target);
  if (ctl.contains("hull")) {
    const json& h = ctl.at("hull");
    detail::reject_unknown(h, {"subdivisions", "inflation", "sampling", "max_vertices"},
                           "controller.hull");
    read(h, "subdivisions", c.hull.subdivisions);
    read(h, "inflation", c.hull.inflation);
    read(h, "sampling", c.hull.sampling);
    read(h, "max_vertices", c.hull.max_vertices);
  }

  const json ver = j.value("verify", json::object());
  detail::reject_unknown(ver, {"resolution"}, "verify");
  read(ver, "resolution", c.verify_resolution);

  const json st = j.value("stochastic", json::object());
  detail::reject_unknown(st, {"moment_check", "resolution", "c"}, "stochastic");
  read(st, "moment_check", c.moment_check);
  read(st, "resolution", c.moment_resolution);
  read(st, "c", c.chebyshev_c);

  const json sim = j.value("simulate", json::object());
  detail::reject_unknown(sim,
                         {"steps", "initial_states", "baseline_gain",
                          "converge_ratio", "svg", "stride"},
                         "simulate");
  read(sim, "steps", c.steps);
  if (sim.contains("initial_states")) {
    const json& is = sim.at("initial_states");
    if (is.is_number_integer()) {
      c.initial_count = is.get<int>();
    } else {
      c.initial_states = io::to_points(is, "simulate.initial_states");
    }
  }
  if (sim.contains("baseline_gain")) {
    if (sim.at("baseline_gain").is_null()) {
      c.baseline_gain.reset();
    } else {
      c.baseline_gain = io::to_vec(sim.at("baseline_gain"), "simulate.baseline_gain");
    }
  }
  if (sim.contains("converge_ratio")) {
    c.converge_ratio = io::to_double(sim.at("converge_ratio"), "converge_ratio");
  }
  read(sim, "svg", c.svg);
  read(sim, "stride", c.portrait_stride);

  read(j, "seed", c.seed);
  if (j.contains("out")) c.out = j.at("out").get<std::string>();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  return parse_config(io::read_json(path));
}

/// Checks everything that can be checked without running a computation.
inline void validate(const PipelineConfig& c) {
  if (c.system != "oscillator" && c.system != "sine1d" &&
      c.system != "polynomial") {
    throw_invalid("config: unknown system '" + c.system + "'");
  }
  if (!(c.dt > 0.0)) throw_invalid("config: dt must be positive");
  const SystemModel m = true_system(c);
  validate_model(m, c.domain.grid(3));
  const int n = m.n;
  check_dim("config", "data.domain", c.data_domain.dim(), n);
  check_dim("config", "controller.domain", c.domain.dim(), n);
  if (c.data_grid < 1 || c.controller_grid < 1 || c.verify_resolution < 1 ||
      c.moment_resolution < 1) {
    throw_invalid("config: grid sizes must be positive");
  }
  if (!(c.sigma_y >= 0.0)) throw_invalid("config: sigma_y must be >= 0");
  if (!(c.synthesis.sigma_p >= 0.0)) throw_invalid("config: sigma_p must be >= 0");
  if (!(c.synthesis.rho > 1.0)) throw_invalid("config: rho must be > 1");
  if (c.model_source != "learned" && c.model_source != "analytic") {
    throw_invalid("config: controller.model must be 'learned' or 'analytic'");
  }
  check_dim("config", "data.kernel", drift_kernel(c).dim(), n);
  check_dim("config", "controller.kernel", controller_kernel(c).dim(), n);
  for (const FixedRow& r : fixed_rows(c)) {
    if (r.row < 0 || r.row >= n) throw_invalid("config: fixed row out of range");
    check_dim("config", "fixed_rows.c", r.c.size(), n);
  }
  if (!(c.chebyshev_c > n)) {
    throw_invalid("config: stochastic.c must exceed the state dimension");
  }
  if (c.steps < 1) throw_invalid("config: simulate.steps must be >= 1");
  if (c.portrait_stride < 1) throw_invalid("config: simulate.stride must be >= 1");
  if (c.initial_states.empty() && c.initial_count < 1) {
    throw_invalid("config: simulate.initial_states must be positive");
  }
  for (const auto& x : c.initial_states) {
    check_dim("config", "simulate.initial_states", x.size(), n);
  }
  if (c.baseline_gain) check_dim("config", "simulate.baseline_gain", c.baseline_gain->size(), n);
  if (c.mode == SynthesisMode::kPolytopic) {
    if (c.hull.subdivisions < 1 || c.hull.sampling < 2 || !(c.hull.inflation >= 0.0)) {
      throw_invalid("config: bad hull options");
    }
  }
  if (c.svg && n != 2) throw_invalid("config: svg portraits need a 2-D system");
}

// ---- context ---------------------------------------------------------

class Log {
 public:
  explicit Log(bool quiet) : quiet_(quiet) {}
  template <typename... A>
  void operator()(const A&... parts) const {
    if (quiet_) return;
    (std::cout << ... << parts) << '\n';
  }

 private:
  bool quiet_;
};

struct Paths {
  fs::path data, drift, error_surface, controller, report, margins,
      controller_surface, verify, verify_grid, moment, simulate,
      portrait_controller, portrait_baseline, summary;

  explicit Paths(const fs::path& out)
      : data(out / "data.csv"),
        drift(out / "drift_model.json"),
        error_surface(out / "error_surface.csv"),
        controller(out / "controller.json"),
        report(out / "synthesis_report.json"),
        margins(out / "margins.csv"),
        controller_surface(out / "controller_surface.csv"),
        verify(out / "verify_report.json"),
        verify_grid(out / "verify_grid.csv"),
        moment(out / "moment_ies.json"),
        simulate(out / "simulate.json"),
        portrait_controller(out / "portrait_controller.csv"),
        portrait_baseline(out / "portrait_baseline.csv"),
        summary(out / "summary.json") {}
};

inline void require(const fs::path& p) {
  if (!fs::exists(p)) throw_invalid("missing artifact: " + p.string());
}

inline std::vector<std::optional<FixedComponent>> fixed_components(
    const PipelineConfig& c, int n) {
  std::vector<std::optional<FixedComponent>> out(n);
  for (const FixedRow& r : fixed_rows(c)) {
    FixedComponent f;
    f.c = r.c;
    f.d = r.d;
    out[r.row] = f;
  }
  return out;
}

/// The model synthesis and verification run against.
inline SystemModel design_model(const PipelineConfig& c,
                                const std::optional<DriftModel>& drift) {
  const SystemModel truth = true_system(c);
  if (c.model_source == "analytic") return truth;
  if (!drift) throw_invalid("learned model source needs a drift model");
  return to_system_model(*drift, truth.b, truth.equilibrium, "learned");
}

inline std::optional<DriftModel> load_drift_if_learned(const PipelineConfig& c) {
  if (c.model_source != "learned") return std::nullopt;
  const Paths p(c.out);
  require(p.drift);
  return io::drift_from_json(io::read_json(p.drift));
}

// ---- commands --------------------------------------------------------

inline int cmd_gen_data(const PipelineConfig& c) {
  validate(c);
  const Log log(c.quiet);
  SystemModel m = true_system(c);
  if (!c.euler_learning) m.euler_dt = 0.0;
  std::mt19937_64 rng(c.seed);
  const DriftDataset d = make_drift_dataset(
      m, c.data_domain.grid(c.data_grid), Eigen::VectorXd::Constant(m.n, c.sigma_y),
      rng);
  io::write_text_atomic(Paths(c.out).data, io::drift_data_csv(d));
  log("gen-data: ", d.size(), " samples -> ", Paths(c.out).data.string());
  return 0;
}

inline int cmd_learn(const PipelineConfig& c) {
  validate(c);
  const Log log(c.quiet);
  const Paths p(c.out);
  require(p.data);
  const SystemModel truth = true_system(c);
  const int n = truth.n;
  const DriftDataset d =
      io::drift_data_from_csv(io::read_csv(p.data), Eigen::VectorXd::Constant(n, c.sigma_y));
  if (d.size() == 0) throw_invalid("learn: training data is empty");
  const double dt = c.euler_learning ? truth.euler_dt : 0.0;
  const DriftModel drift = fit_drift(d, std::vector<Kernel>(n, drift_kernel(c)),
                                     fixed_components(c, n), dt);

  // Error surface of the learned Jacobian on the data grid.
  std::vector<std::string> header;
  for (int i = 1; i <= n; ++i) header.push_back("x_" + std::to_string(i));
  auto entries = [&](const std::string& prefix) {
    for (int i = 1; i <= n; ++i) {
      for (int k = 1; k <= n; ++k) {
        header.push_back(prefix + std::to_string(i) + std::to_string(k));
      }
    }
  };
  entries("learned_d");
  entries("true_d");
  entries("error_d");
  io::CsvWriter w(header);
  double worst = 0.0;
  for (const Eigen::VectorXd& x : c.data_domain.grid(c.data_grid)) {
    const Eigen::MatrixXd learned = drift.drift_jacobian(x);
    const Eigen::MatrixXd exact = truth.drift_jacobian(x);
    std::vector<double> r(x.data(), x.data() + n);
    for (const Eigen::MatrixXd* m : {&learned, &exact}) {
      for (int i = 0; i < n; ++i) {
        for (int k = 0; k < n; ++k) r.push_back((*m)(i, k));
      }
    }
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < n; ++k) r.push_back(exact(i, k) - learned(i, k));
    }
    worst = std::max(worst, (exact - learned).cwiseAbs().maxCoeff());
    w.row(r);
  }
  io::write_json(p.drift, io::to_json(drift));
  w.save(p.error_surface);
  log("learn: ", d.size(), " samples, max |Jacobian error| on data grid ", worst);
  return 0;
}

inline int cmd_synth(const PipelineConfig& c) {
  validate(c);
  const Log log(c.quiet);
  const Paths p(c.out);
  const std::optional<DriftModel> drift = load_drift_if_learned(c);
  const SystemModel model = design_model(c, drift);
  const Kernel kernel = controller_kernel(c);

  SynthesisReport rep;
  std::optional<double> confidence;
  if (c.mode == SynthesisMode::kPolytopic) {
    VertexHull hulls = build_hulls(model, c.domain, c.hull);
    if (drift) {
      const ChebyshevHulls ch =
          chebyshev_hulls(*drift, hulls, c.chebyshev_c, c.hull.max_vertices);
      hulls = ch.hull;
      confidence = ch.confidence;
    }
    rep = synthesize(model, kernel, c.mode, {}, &hulls, c.synthesis);
  } else {
    rep = synthesize(model, kernel, c.mode, c.domain.grid(c.controller_grid),
                     nullptr, c.synthesis);
  }

  json rj = io::to_json(rep);
  rj["model"] = c.model_source;
  rj["confidence"] = confidence ? json(*confidence) : json(nullptr);

  io::CsvWriter mw({"label", "site", "vertex", "solver_margin", "certified_margin"});
  for (const ConstraintDiagnostic& d : rep.diagnostics) {
    mw.row_strings({d.label, std::to_string(d.site), std::to_string(d.vertex),
                    io::fmt(d.solver_margin), io::fmt(d.certified_margin)});
  }

  if (!rep.feasible()) {
    io::write_json(p.report, rj);
    mw.save(p.margins);
    log("synth: infeasible (", rep.message, ")");
    return static_cast<int>(ErrorCode::kInfeasible);
  }

  const int n = model.n;
  std::vector<std::string> header;
  for (int i = 1; i <= n; ++i) header.push_back("x_" + std::to_string(i));
  header.push_back("u");
  for (int i = 1; i <= n; ++i) header.push_back("du_" + std::to_string(i));
  io::CsvWriter sw(header);
  for (const Eigen::VectorXd& x : c.domain.grid(c.verify_resolution)) {
    std::vector<double> r(x.data(), x.data() + n);
    r.push_back(rep.controller.eval_control(x));
    const Eigen::RowVectorXd g = rep.controller.eval_control_grad(x);
    for (int i = 0; i < n; ++i) r.push_back(g[i]);
    sw.row(r);
  }
  io::write_json(p.controller, io::to_json(rep.controller));
  io::write_json(p.report, rj);
  mw.save(p.margins);
  sw.save(p.controller_surface);
  log("synth: ", to_string(rep.mode), " ", to_string(rep.status), ", eps ", rep.eps);
  return 0;
}

inline DerivativeController load_controller(const PipelineConfig& c) {
  const Paths p(c.out);
  require(p.controller);
  DerivativeController ctrl = io::controller_from_json(io::read_json(p.controller));
  if (!ctrl.metric()) throw_invalid("controller artifact has no metric");
  return ctrl;
}

struct VerifyOutcome {
  VerificationReport design;
  std::optional<VerificationReport> truth;
  std::optional<MomentIesReport> moment;
  bool contracting = false;
};

inline VerifyOutcome run_verify(const PipelineConfig& c) {
  validate(c);
  const Paths p(c.out);
  const DerivativeController ctrl = load_controller(c);
  const std::optional<DriftModel> drift = load_drift_if_learned(c);
  const SystemModel model = design_model(c, drift);
  const Eigen::MatrixXd& P = *ctrl.metric();

  VerifyOutcome out;
  out.design = verify_grid(model, ctrl, P, c.domain, c.verify_resolution);
  out.contracting = out.design.min_margin > 0.0 && out.design.max_rate < 1.0;
  json j;
  j["model"] = c.model_source;
  j["design_model"] = io::to_json(out.design);
  if (drift) {
    out.truth = verify_grid(true_system(c), ctrl, P, c.domain, c.verify_resolution);
    j["true_system"] = io::to_json(*out.truth);
  }

  io::CsvWriter w([&] {
    std::vector<std::string> h;
    for (int i = 1; i <= model.n; ++i) h.push_back("x_" + std::to_string(i));
    h.push_back("margin");
    h.push_back("rate");
    return h;
  }());
  for (std::size_t k = 0; k < out.design.points.size(); ++k) {
    const Eigen::VectorXd& x = out.design.points[k];
    std::vector<double> r(x.data(), x.data() + model.n);
    r.push_back(out.design.margins[k]);
    r.push_back(out.design.rates[k]);
    w.row(r);
  }

  std::optional<json> mj;
  if (drift && c.moment_check) {
    const StochasticClosedLoop loop = make_stochastic_loop(*drift, ctrl, model.b);
    out.moment = moment_ies_check(loop, c.domain.grid(c.moment_resolution));
    mj = io::to_json(*out.moment,
                     chebyshev_confidence(model.n, c.chebyshev_c));
    (*mj)["c"] = c.chebyshev_c;
    j["moment_ies_pass"] = out.moment->pass;
  }
  j["contracting"] = out.contracting;
  io::write_json(p.verify, j);
  w.save(p.verify_grid);
  if (mj) io::write_json(p.moment, *mj);
  return out;
}

inline int cmd_verify(const PipelineConfig& c) {
  const Log log(c.quiet);
  const VerifyOutcome v = run_verify(c);
  log("verify: min margin ", v.design.min_margin, ", max rate ", v.design.max_rate);
  if (v.truth) {
    log("verify: true system min margin ", v.truth->min_margin, ", max rate ",
        v.truth->max_rate);
  }
  if (v.moment) log("verify: moment IES min margin ", v.moment->min_margin);
  return v.contracting ? 0 : static_cast<int>(ErrorCode::kInfeasible);
}

struct RolloutSummary {
  Eigen::VectorXd x0;
  double ratio = 0.0;
  bool diverged = false;
  bool converged = false;
  MonotoneCheck monotone;
};

struct SimulateOutcome {
  std::vector<RolloutSummary> controller;
  std::vector<RolloutSummary> baseline;
  bool all_pass = false;
  int baseline_non_converging = 0;
};

inline std::string portrait_csv(const std::vector<Trajectory>& ts, int n,
                                int stride) {
  std::vector<std::string> h{"trajectory", "k"};
  for (int i = 1; i <= n; ++i) h.push_back("x_" + std::to_string(i));
  h.push_back("u");
  io::CsvWriter w(h);
  for (std::size_t t = 0; t < ts.size(); ++t) {
    const Trajectory& tr = ts[t];
    for (std::size_t k = 0; k < tr.states.size(); ++k) {
      if (k % stride != 0 && k + 1 != tr.states.size()) continue;
      std::vector<double> r{static_cast<double>(t), static_cast<double>(k)};
      for (int i = 0; i < n; ++i) r.push_back(tr.states[k][i]);
      r.push_back(k < tr.inputs.size() ? tr.inputs[k] : 0.0);
      w.row(r);
    }
  }
  return w.str();
}

/// u = -mu_i(x) + K x along the single actuated coordinate i, where mu_i is
/// the learned (or exact) vector-field component.
inline ControlLaw baseline_law(const PipelineConfig& c, const SystemModel& truth,
                               const std::optional<DriftModel>& drift) {
  int actuated = -1;
  for (int i = 0; i < truth.n; ++i) {
    if (truth.b[i] != 0.0) {
      if (actuated >= 0) throw_invalid("baseline: b must have one nonzero entry");
      actuated = i;
    }
  }
  if (actuated < 0) throw_invalid("baseline: b is zero");
  const Eigen::RowVectorXd k = c.baseline_gain->transpose();
  if (drift) {
    return [drift, actuated, k](const Eigen::VectorXd& x) {
      return -drift->component_mean(actuated, x) + k.dot(x);
    };
  }
  return [truth, actuated, k](const Eigen::VectorXd& x) {
    double g = truth.drift(x)[actuated];
    if (truth.euler_dt > 0.0) g = (g - x[actuated]) / truth.euler_dt;
    return -g + k.dot(x);
  };
}

inline SimulateOutcome run_simulate(const PipelineConfig& c) {
  validate(c);
  const Paths p(c.out);
  const DerivativeController ctrl = load_controller(c);
  const std::optional<DriftModel> drift = load_drift_if_learned(c);
  const SystemModel truth = true_system(c);
  const Eigen::MatrixXd& P = *ctrl.metric();
  const Eigen::VectorXd x_star =
      truth.equilibrium ? *truth.equilibrium : Eigen::VectorXd::Zero(truth.n);
  const double ratio_max = converge_ratio(c);
  const double rate =
      verify_grid(truth, ctrl, P, c.domain, c.verify_resolution).max_rate;
  const double floor = monotone_floor(truth, ctrl, P, x_star, rate);

  SimulateOutcome out;
  auto run = [&](const ControlLaw& law, std::vector<RolloutSummary>& sums,
                 std::vector<Trajectory>& trajs) {
    for (const Eigen::VectorXd& x0 : initial_states(c)) {
      Trajectory t = rollout(truth, law, x0, c.steps);
      RolloutSummary s;
      s.x0 = x0;
      s.diverged = t.diverged;
      const double d0 = (x0 - x_star).norm();
      const double dk = (t.states.back() - x_star).norm();
      s.ratio = d0 > 0.0 ? dk / d0 : dk;
      s.monotone = check_monotone(t, P, x_star, c.domain, floor);
      s.converged = !t.diverged && t.steps() == c.steps &&
                    (d0 > 0.0 ? s.ratio < ratio_max : dk == 0.0);
      sums.push_back(s);
      trajs.push_back(std::move(t));
    }
  };
  std::vector<Trajectory> tc, tb;
  run([&ctrl](const Eigen::VectorXd& x) { return ctrl.eval_control(x); },
      out.controller, tc);
  out.all_pass = true;
  for (const auto& s : out.controller) {
    out.all_pass = out.all_pass && s.converged && s.monotone.monotone;
  }
  if (c.baseline_gain) {
    run(baseline_law(c, truth, drift), out.baseline, tb);
    for (const auto& s : out.baseline) out.baseline_non_converging += !s.converged;
  }

  auto summarize = [](const std::vector<RolloutSummary>& v) {
    json a = json::array();
    for (const auto& s : v) {
      a.push_back({{"x0", io::vec(s.x0)},
                   {"final_ratio", io::number(s.ratio)},
                   {"diverged", s.diverged},
                   {"converged", s.converged},
                   {"monotone", s.monotone.monotone},
                   {"checked_steps", s.monotone.checked},
                   {"below_floor_steps", s.monotone.below_floor},
                   {"first_violation", s.monotone.first_violation}});
    }
    return a;
  };
  json j;
  j["steps"] = c.steps;
  j["converge_ratio"] = ratio_max;
  j["monotone_floor"] = floor;
  j["controller"] = {{"all_pass", out.all_pass},
                     {"trajectories", summarize(out.controller)}};
  if (c.baseline_gain) {
    j["baseline"] = {{"gain", io::vec(*c.baseline_gain)},
                     {"non_converging", out.baseline_non_converging},
                     {"trajectories", summarize(out.baseline)}};
  }
  io::write_text_atomic(p.portrait_controller,
                        portrait_csv(tc, truth.n, c.portrait_stride));
  if (c.baseline_gain) {
    io::write_text_atomic(p.portrait_baseline,
                          portrait_csv(tb, truth.n, c.portrait_stride));
  }
  if (c.svg) {
    io::write_text_atomic(c.out / "portrait_controller.svg",
                          io::phase_portrait_svg(tc, c.domain, "synthesized controller"));
    if (c.baseline_gain) {
      io::write_text_atomic(c.out / "portrait_baseline.svg",
                            io::phase_portrait_svg(tb, c.domain, "baseline"));
    }
  }
  io::write_json(p.simulate, j);
  return out;
}

inline int cmd_simulate(const PipelineConfig& c) {
  const Log log(c.quiet);
  const SimulateOutcome s = run_simulate(c);
  int ok = 0;
  for (const auto& r : s.controller) ok += r.converged && r.monotone.monotone;
  log("simulate: ", ok, "/", s.controller.size(), " trajectories converge monotonically");
  if (!s.baseline.empty()) {
    log("simulate: baseline non-converging ", s.baseline_non_converging, "/",
        s.baseline.size());
  }
  return 0;
}

/// gen-data, learn, synth, verify and simulate on the oscillator with the
/// learned model, plus the analytic-model run under out/analytic.
inline int cmd_reproduce_oscillator(PipelineConfig c) {
  if (c.system != "oscillator") {
    throw_invalid("reproduce-oscillator: config system must be 'oscillator'");
  }
  validate(c);
  const Log log(c.quiet);
  json summary;
  summary["seed"] = c.seed;
  summary["data_points"] = c.data_grid * c.data_grid;
  summary["controller_points"] = c.controller_grid * c.controller_grid;

  auto stage = [&](PipelineConfig cfg, const std::string& name) -> int {
    json s;
    if (cfg.model_source == "learned") {
      cmd_gen_data(cfg);
      cmd_learn(cfg);
    }
    const int rc = cmd_synth(cfg);
    const json rep = io::read_json(Paths(cfg.out).report);
    s["feasible"] = rep.at("feasible");
    s["eps"] = rep.at("eps");
    s["P"] = rep.at("P");
    if (rc != 0) {
      summary[name] = s;
      return rc;
    }
    const VerifyOutcome v = run_verify(cfg);
    s["verify_min_margin"] = io::number(v.design.min_margin);
    s["verify_max_rate"] = io::number(v.design.max_rate);
    s["contracting"] = v.contracting;
    if (v.truth) {
      s["true_min_margin"] = io::number(v.truth->min_margin);
      s["true_max_rate"] = io::number(v.truth->max_rate);
    }
    if (v.moment) {
      s["moment_ies_pass"] = v.moment->pass;
      s["moment_ies_min_margin"] = io::number(v.moment->min_margin);
      s["chebyshev_confidence"] = chebyshev_confidence(2, cfg.chebyshev_c);
    }
    const SimulateOutcome sim = run_simulate(cfg);
    s["rollouts_pass"] = sim.all_pass;
    double worst = 0.0;
    for (const auto& r : sim.controller) worst = std::max(worst, r.ratio);
    s["worst_final_ratio"] = worst;
    if (!sim.baseline.empty()) {
      s["baseline_non_converging"] = sim.baseline_non_converging;
    }
    summary[name] = s;
    log("reproduce: ", name, " feasible, verify min margin ", v.design.min_margin,
        ", rollouts ", sim.all_pass ? "pass" : "FAIL");
    return v.contracting && sim.all_pass ? 0
                                         : static_cast<int>(ErrorCode::kInfeasible);
  };

  PipelineConfig learned = c;
  learned.model_source = "learned";
  PipelineConfig analytic = c;
  analytic.model_source = "analytic";
  analytic.out = c.out / "analytic";
  analytic.baseline_gain.reset();
  const int rl = stage(learned, "learned");
  const int ra = stage(analytic, "analytic");
  summary["reference_P"] = {{30.3, -25.2}, {-25.2, 30.0}};
  io::write_json(Paths(c.out).summary, summary);
  return rl != 0 ? rl : ra;
}

}  // namespace gpcontract::pipeline
