#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "gpcontract/deriv_gp.hpp"
#include "gpcontract/drift_gp.hpp"
#include "gpcontract/error.hpp"
#include "gpcontract/kernels.hpp"
#include "gpcontract/lmi.hpp"
#include "gpcontract/stochastic.hpp"
#include "gpcontract/synthesis.hpp"
#include "gpcontract/verify.hpp"

namespace gpcontract::io {

using json = nlohmann::ordered_json;

// Doubles are written by nlohmann's shortest round-trip formatter, so a
// parse of the dump recovers every bit. Non-finite values become null.

inline json number(double v) {
  return std::isfinite(v) ? json(v) : json(nullptr);
}

inline json vec(const Eigen::VectorXd& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(number(v[i]));
  return out;
}

/// Row-major nested arrays.
inline json mat(const Eigen::MatrixXd& m) {
  json out = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out.push_back(vec(m.row(i).transpose()));
  }
  return out;
}

inline json points(const PointSet& ps) {
  json out = json::array();
  for (const auto& p : ps) out.push_back(vec(p));
  return out;
}

inline const json& field(const json& j, const std::string& key,
                         const std::string& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw_invalid(where + ": missing field '" + key + "'");
  }
  return j.at(key);
}

inline double to_double(const json& j, const std::string& where,
                        double null_value =
                            std::numeric_limits<double>::quiet_NaN()) {
  if (j.is_null()) return null_value;
  if (!j.is_number()) throw_invalid(where + ": expected a number");
  return j.get<double>();
}

inline Eigen::VectorXd to_vec(const json& j, const std::string& where,
                              double null_value =
                                  std::numeric_limits<double>::quiet_NaN()) {
  if (!j.is_array()) throw_invalid(where + ": expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    v[static_cast<Eigen::Index>(i)] = to_double(j[i], where, null_value);
  }
  return v;
}

inline Eigen::MatrixXd to_mat(const json& j, const std::string& where) {
  if (!j.is_array()) throw_invalid(where + ": expected an array of rows");
  if (j.empty()) return Eigen::MatrixXd(0, 0);
  const std::size_t cols = j[0].size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()),
                    static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != cols) {
      throw_invalid(where + ": ragged matrix");
    }
    m.row(static_cast<Eigen::Index>(i)) = to_vec(j[i], where).transpose();
  }
  return m;
}

inline PointSet to_points(const json& j, const std::string& where) {
  if (!j.is_array()) throw_invalid(where + ": expected an array of points");
  PointSet out;
  for (const auto& p : j) out.push_back(to_vec(p, where));
  return out;
}

// ---- kernel ----------------------------------------------------------

inline json to_json(const Kernel& k) {
  json j;
  j["family"] = to_string(k.family());
  j["beta"] = k.beta();
  j["sigma"] = mat(k.sigma());
  if (k.family() == KernelFamily::kPolynomial) j["degree"] = k.degree();
  return j;
}

inline Kernel kernel_from_json(const json& j) {
  const std::string w = "kernel";
  const std::string family = field(j, "family", w).get<std::string>();
  const double beta = to_double(field(j, "beta", w), w);
  const Eigen::MatrixXd sigma = to_mat(field(j, "sigma", w), w + ".sigma");
  const int degree = j.contains("degree") ? j.at("degree").get<int>() : 2;
  return Kernel(kernel_family_from_string(family), beta, sigma, degree);
}

// ---- controller ------------------------------------------------------

inline json to_json(const DerivativeController& c) {
  json j;
  j["kernel"] = to_json(c.kernel());
  j["points"] = points(c.points());
  j["weights"] = vec(c.weights());
  if (!c.value_points().empty()) {
    j["value_points"] = points(c.value_points());
    j["value_weights"] = vec(c.value_weights());
  }
  j["offset"] = c.offset();
  j["anchor"] = c.anchor() ? vec(*c.anchor()) : json(nullptr);
  j["metric"] = c.metric() ? mat(*c.metric()) : json(nullptr);
  j["regularization"] = c.regularization();
  return j;
}

inline DerivativeController controller_from_json(const json& j) {
  const std::string w = "controller";
  Kernel k = kernel_from_json(field(j, "kernel", w));
  PointSet pts = to_points(field(j, "points", w), w + ".points");
  Eigen::VectorXd weights = to_vec(field(j, "weights", w), w + ".weights");
  DerivativeController c;
  if (j.contains("value_points")) {
    c = DerivativeController(
        std::move(k), std::move(pts), std::move(weights),
        to_points(j.at("value_points"), w + ".value_points"),
        to_vec(field(j, "value_weights", w), w + ".value_weights"));
  } else {
    c = DerivativeController(std::move(k), std::move(pts), std::move(weights));
  }
  std::optional<Eigen::VectorXd> anchor;
  if (j.contains("anchor") && !j.at("anchor").is_null()) {
    anchor = to_vec(j.at("anchor"), w + ".anchor");
  }
  c.set_anchor(anchor, to_double(field(j, "offset", w), w));
  if (j.contains("metric") && !j.at("metric").is_null()) {
    c.set_metric(to_mat(j.at("metric"), w + ".metric"));
  }
  if (j.contains("regularization")) {
    c.set_regularization(to_double(j.at("regularization"), w));
  }
  return c;
}

// ---- drift model -----------------------------------------------------

/// The artifact holds everything the fit consumed. Loading refits (the fit
/// is deterministic) and checks the stored weights bit for bit.
inline json to_json(const DriftModel& m) {
  json j;
  j["dim"] = m.dim();
  j["euler_dt"] = m.euler_dt();
  j["points"] = points(m.points());
  j["targets"] = mat(m.targets());
  if (m.learned_input()) j["inputs"] = vec(m.inputs());
  j["fit"] = {{"jitter", m.fit_options().jitter},
              {"auto_jitter", m.fit_options().auto_jitter}};
  json comps = json::array();
  for (const DriftComponent& c : m.components()) {
    json cj;
    cj["kernel"] = to_json(c.kernel);
    cj["sigma_y"] = c.sigma_y;
    if (c.fixed) {
      cj["fixed"] = {{"c", vec(c.fixed->c.transpose())}, {"d", c.fixed->d}};
    } else {
      cj["weights"] = vec(c.weights);
      cj["regularization"] = c.regularization;
      if (m.learned_input()) cj["input_gain"] = c.input_gain;
    }
    comps.push_back(cj);
  }
  j["components"] = comps;
  return j;
}

inline DriftModel drift_from_json(const json& j) {
  const std::string w = "drift model";
  const int n = field(j, "dim", w).get<int>();
  const json& comps = field(j, "components", w);
  if (!comps.is_array() || static_cast<int>(comps.size()) != n) {
    throw_invalid(w + ": expected " + std::to_string(n) + " components");
  }
  DriftDataset d;
  d.points = to_points(field(j, "points", w), w + ".points");
  d.targets = to_mat(field(j, "targets", w), w + ".targets");
  if (d.points.empty()) d.targets.resize(0, n);
  d.sigma_y.resize(n);
  std::vector<Kernel> kernels;
  std::vector<std::optional<FixedComponent>> fixed(n);
  for (int i = 0; i < n; ++i) {
    const json& cj = comps[i];
    kernels.push_back(kernel_from_json(field(cj, "kernel", w)));
    d.sigma_y[i] = to_double(field(cj, "sigma_y", w), w);
    if (cj.contains("fixed")) {
      FixedComponent f;
      f.c = to_vec(field(cj.at("fixed"), "c", w), w + ".fixed").transpose();
      f.d = to_double(field(cj.at("fixed"), "d", w), w);
      fixed[i] = f;
    }
  }
  FitOptions opts;
  if (j.contains("fit")) {
    opts.jitter = to_double(field(j.at("fit"), "jitter", w), w);
    opts.auto_jitter = field(j.at("fit"), "auto_jitter", w).get<bool>();
  }
  const double dt = to_double(field(j, "euler_dt", w), w);
  DriftModel m;
  if (j.contains("inputs")) {
    d.inputs = to_vec(j.at("inputs"), w + ".inputs");
    m = fit_drift_with_input(d, kernels, fixed, dt, opts);
  } else {
    m = fit_drift(d, kernels, fixed, dt, opts);
  }
  for (int i = 0; i < n; ++i) {
    if (!comps[i].contains("weights")) continue;
    const Eigen::VectorXd stored =
        to_vec(comps[i].at("weights"), w + ".weights");
    if (stored.size() != m.components()[i].weights.size() ||
        stored != m.components()[i].weights) {
      throw_numerical(w + ": refit weights of component " + std::to_string(i) +
                      " differ from the stored artifact");
    }
  }
  return m;
}

// ---- reports ---------------------------------------------------------

inline json to_json(const ConstraintDiagnostic& d) {
  return {{"label", d.label},
          {"site", d.site},
          {"vertex", d.vertex},
          {"x", vec(d.x)},
          {"solver_margin", number(d.solver_margin)},
          {"certified_margin", number(d.certified_margin)}};
}

inline json to_json(const SynthesisReport& r) {
  json j;
  j["mode"] = to_string(r.mode);
  j["status"] = to_string(r.status);
  j["feasible"] = r.feasible();
  j["message"] = r.message;
  j["eps"] = number(r.eps);
  j["eps_p"] = number(r.eps_p);
  j["P"] = mat(r.p);
  int worst = -1;
  for (std::size_t i = 0; i < r.diagnostics.size(); ++i) {
    if (worst < 0 || r.diagnostics[i].certified_margin <
                         r.diagnostics[worst].certified_margin) {
      worst = static_cast<int>(i);
    }
  }
  j["constraints"] = r.diagnostics.size();
  j["worst_constraint"] =
      worst < 0 ? json(nullptr) : to_json(r.diagnostics[worst]);
  if (r.mode == SynthesisMode::kPolytopic) {
    j["max_neighbor_target_gap"] = number(r.max_neighbor_target_gap);
  }
  j["controller"] = to_json(r.controller);
  return j;
}

inline json to_json(const VerificationReport& r) {
  json j;
  j["domain"] = {{"lower", vec(r.domain.lo)}, {"upper", vec(r.domain.hi)}};
  j["resolution"] = r.resolution;
  j["points"] = r.points.size();
  j["min_margin"] = number(r.min_margin);
  j["max_rate"] = number(r.max_rate);
  j["worst"] = r.worst >= 0 ? vec(r.points[r.worst]) : json(nullptr);
  j["consistent"] = r.consistent;
  j["contracting"] = r.min_margin > 0.0 && r.max_rate < 1.0;
  return j;
}

inline json to_json(const MomentIesReport& r, double confidence = 1.0) {
  json j;
  j["pass"] = r.pass;
  j["min_margin"] = number(r.min_margin);
  j["noise_margin"] = number(r.noise_margin);
  j["worst"] = r.worst >= 0 ? vec(r.points[r.worst]) : json(nullptr);
  j["confidence"] = confidence;
  int flagged = 0;
  for (bool f : r.flagged) flagged += f;
  j["flagged_points"] = flagged;
  json pts = json::array();
  for (std::size_t k = 0; k < r.points.size(); ++k) {
    pts.push_back({{"x", vec(r.points[k])},
                   {"margin", number(r.margins[k])},
                   {"deterministic_margin", number(r.deterministic_margins[k])},
                   {"flagged", static_cast<bool>(r.flagged[k])}});
  }
  j["per_point"] = pts;
  return j;
}

inline json to_json(const LmiProblem& p) {
  json j;
  j["dim"] = p.dim;
  j["objective"] = p.objective == LmiObjective::kFeasibility
                       ? "feasibility"
                       : "maximize-margin";
  if (p.lower.size() == p.dim && p.dim > 0) {
    j["lower"] = vec(p.lower);
    j["upper"] = vec(p.upper);
  }
  json blocks = json::array();
  for (const AffineBlock& b : p.blocks) {
    json bj;
    bj["label"] = b.label;
    bj["margin"] = b.margin;
    bj["constant"] = mat(b.constant);
    json terms = json::array();
    for (const auto& [k, a] : b.terms) {
      terms.push_back({{"var", k}, {"matrix", mat(a)}});
    }
    bj["terms"] = terms;
    blocks.push_back(bj);
  }
  j["blocks"] = blocks;
  return j;
}

inline LmiProblem lmi_problem_from_json(const json& j) {
  const std::string w = "lmi problem";
  LmiProblem p;
  p.dim = field(j, "dim", w).get<int>();
  p.objective = field(j, "objective", w).get<std::string>() == "feasibility"
                    ? LmiObjective::kFeasibility
                    : LmiObjective::kMaximizeMargin;
  if (j.contains("lower")) {
    const double inf = std::numeric_limits<double>::infinity();
    p.lower = to_vec(j.at("lower"), w + ".lower", -inf);
    p.upper = to_vec(field(j, "upper", w), w + ".upper", inf);
  }
  for (const json& bj : field(j, "blocks", w)) {
    AffineBlock b;
    b.label = field(bj, "label", w).get<std::string>();
    b.margin = field(bj, "margin", w).get<bool>();
    b.constant = to_mat(field(bj, "constant", w), w + ".constant");
    for (const json& t : field(bj, "terms", w)) {
      b.terms.emplace_back(field(t, "var", w).get<int>(),
                           to_mat(field(t, "matrix", w), w + ".matrix"));
    }
    p.blocks.push_back(std::move(b));
  }
  return p;
}

// ---- files -----------------------------------------------------------

/// Writes to a sibling temporary and renames it into place, so a failed
/// command never leaves a partial artifact.
inline void write_text_atomic(const std::filesystem::path& path,
                              const std::string& text) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw_invalid("cannot write " + tmp.string());
    out << text;
    out.close();
    if (!out) throw_invalid("write failed for " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw_invalid("cannot move artifact into place: " + path.string());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_invalid("missing artifact: " + path.string());
  try {
    return json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw_invalid(path.string() + ": " + e.what());
  }
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header) {
    row_strings(header);
  }

  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out_ << ',';
      out_ << fmt(values[i]);
    }
    out_ << '\n';
  }

  void row_strings(const std::vector<std::string>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out_ << ',';
      out_ << values[i];
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }
  void save(const std::filesystem::path& path) const {
    write_text_atomic(path, out_.str());
  }

 private:
  std::ostringstream out_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw_invalid("missing artifact: " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw_invalid(path.string() + ": empty file");
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.header.push_back(cell);
  }
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        r.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw_invalid(path.string() + ":" + std::to_string(lineno) +
                      ": bad number '" + cell + "'");
      }
    }
    if (r.size() != t.header.size()) {
      throw_invalid(path.string() + ":" + std::to_string(lineno) +
                    ": expected " + std::to_string(t.header.size()) +
                    " columns");
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

/// Training data CSV: x_1..x_n, y_1..y_n[, u].
inline std::string drift_data_csv(const DriftDataset& d) {
  const int n = d.dim();
  std::vector<std::string> header;
  for (int i = 1; i <= n; ++i) header.push_back("x_" + std::to_string(i));
  for (int i = 1; i <= n; ++i) header.push_back("y_" + std::to_string(i));
  if (d.has_inputs()) header.push_back("u");
  CsvWriter w(header);
  for (int j = 0; j < d.size(); ++j) {
    std::vector<double> r(d.points[j].data(), d.points[j].data() + n);
    for (int i = 0; i < n; ++i) r.push_back(d.targets(j, i));
    if (d.has_inputs()) r.push_back(d.inputs[j]);
    w.row(r);
  }
  return w.str();
}

inline DriftDataset drift_data_from_csv(const CsvTable& t,
                                        const Eigen::VectorXd& sigma_y) {
  const int cols = static_cast<int>(t.header.size());
  const bool with_u = !t.header.empty() && t.header.back() == "u";
  const int n = (cols - (with_u ? 1 : 0)) / 2;
  if (n < 1 || 2 * n + (with_u ? 1 : 0) != cols) {
    throw_invalid("training data: expected columns x_1..x_n, y_1..y_n[, u]");
  }
  check_dim("training data", "sigma_y", sigma_y.size(), n);
  DriftDataset d;
  d.sigma_y = sigma_y;
  d.targets.resize(static_cast<Eigen::Index>(t.rows.size()), n);
  if (with_u) d.inputs.resize(static_cast<Eigen::Index>(t.rows.size()));
  for (std::size_t j = 0; j < t.rows.size(); ++j) {
    d.points.push_back(Eigen::Map<const Eigen::VectorXd>(t.rows[j].data(), n));
    for (int i = 0; i < n; ++i) {
      d.targets(static_cast<Eigen::Index>(j), i) = t.rows[j][n + i];
    }
    if (with_u) d.inputs[static_cast<Eigen::Index>(j)] = t.rows[j][2 * n];
  }
  return d;
}

/// Self-contained SVG of 2-D trajectories over `box`.
inline std::string phase_portrait_svg(const std::vector<Trajectory>& trajs,
                                      const Box& box, const std::string& title,
                                      int stride = 10) {
  if (box.dim() != 2) throw_invalid("phase portrait: needs a 2-D domain");
  const double size = 480.0, pad = 40.0;
  const double sx = size / (box.hi[0] - box.lo[0]);
  const double sy = size / (box.hi[1] - box.lo[1]);
  auto px = [&](double x) { return pad + (x - box.lo[0]) * sx; };
  auto py = [&](double y) { return pad + (box.hi[1] - y) * sy; };
  char buf[64];
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad
    << "\" height=\"" << size + 2 * pad << "\">\n";
  s << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size
    << "\" height=\"" << size << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << pad << "\" y=\"" << pad - 12
    << "\" font-family=\"sans-serif\" font-size=\"14\">" << title
    << "</text>\n";
  for (const Trajectory& t : trajs) {
    s << "<polyline fill=\"none\" stroke=\""
      << (t.diverged ? "#c0392b" : "#1f77b4") << "\" stroke-width=\"1\" points=\"";
    for (std::size_t k = 0; k < t.states.size(); k += stride) {
      const Eigen::VectorXd& x = t.states[k];
      if (!box.contains(x)) break;
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(x[0]), py(x[1]));
      s << buf;
    }
    s << "\"/>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace gpcontract::io
