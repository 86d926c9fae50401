#pragma once

// Run configuration, case-study tables, Monte Carlo robustness study and plot-data export.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "oed/design.hpp"
#include "oed/errors.hpp"
#include "oed/estimation.hpp"
#include "oed/geometry.hpp"
#include "oed/model.hpp"
#include "oed/statistics.hpp"

namespace oed {

using Json = nlohmann::json;

struct RobustnessSettings {
  int trials = 1000;
  std::uint64_t seed = 2024;
  int N = 0;           // 0: first entry of the N list
  double sigma = -1.0; // < 0: the configured noise level
};

struct RunConfig {
  std::string name = "run";
  std::string model_id = "bod";
  std::map<std::string, double> constants;
  Vector p_hat;
  NoiseModel noise;
  double alpha = 0.9545;
  std::vector<Criterion> criteria{Criterion::A, Criterion::D, Criterion::E};
  std::vector<Method> methods{Method::classical, Method::exact};
  std::vector<int> N{4};
  Vector input_lower;
  Vector input_upper;
  Vector box_lower; // empty: default search box
  Vector box_upper;
  double epsilon = 5e-3;
  SolverSettings solver;
  std::string output_dir = "results";
  bool record_runtime = true; // false makes repeated runs byte-identical
  RobustnessSettings robustness;

  RegionSetup setup() const {
    return {builtin_model(model_id, constants), p_hat, noise, alpha, box_lower, box_upper};
  }

  DesignProblem problem(Criterion c, Method m, int n) const {
    DesignProblem dp(setup());
    dp.criterion = c;
    dp.method = m;
    dp.N = n;
    dp.input_lower = input_lower;
    dp.input_upper = input_upper;
    dp.epsilon = epsilon;
    dp.solver = solver;
    return dp;
  }

  void validate() const {
    const ModelSpec model = builtin_model(model_id, constants);
    if (p_hat.size() != model.n_p())
      throw ConfigError("p_hat must have " + std::to_string(model.n_p()) + " entries");
    if (noise.sigma.size() != model.n_y() || (noise.sigma.array() <= 0.0).any())
      throw ConfigError("noise sigma must have one positive entry per output");
    if (!(alpha > 0.0 && alpha < 1.0))
      throw ConfigError("alpha must lie in (0, 1)");
    if (input_lower.size() != model.n_u() || input_upper.size() != model.n_u())
      throw ConfigError("input bounds must have one entry per input");
    if ((input_lower.array() > input_upper.array()).any())
      throw ConfigError("input bounds must satisfy lower <= upper");
    if (box_lower.size() != box_upper.size() || (box_lower.size() != 0 && box_lower.size() != model.n_p()))
      throw ConfigError("search box must be empty or have n_p entries on both sides");
    if (criteria.empty() || methods.empty() || N.empty())
      throw ConfigError("criteria, methods and N lists must be non-empty");
    for (int n : N)
      if (n < 1)
        throw ConfigError("every N must be at least 1");
    if (!(epsilon > 0.0))
      throw ConfigError("epsilon must be positive");
    if (solver.max_iterations < 1 || solver.n_starts < 0 || solver.grid_resolution < 3 || solver.rays < 2)
      throw ConfigError("solver settings out of range");
    if (robustness.trials < 1)
      throw ConfigError("robustness trials must be at least 1");
  }
};

/// Defaults for the two built-in models (the settings of the bundled configs).
inline RunConfig default_config(const std::string &model_id) {
  RunConfig c;
  c.model_id = model_id;
  c.p_hat.resize(2);
  if (model_id == "bod") {
    c.name = "case1";
    c.p_hat << 2.5, 0.5;
    c.noise = NoiseModel::unknown(Vector::Constant(1, 0.1));
    c.input_lower = Vector::Constant(1, 0.0);
    c.input_upper = Vector::Constant(1, 20.0);
    c.N = {4, 5};
    c.epsilon = 5e-3;
  } else if (model_id == "second-order") {
    c.name = "case2";
    c.p_hat << 0.5, 1.0;
    c.noise = NoiseModel::known(Vector::Constant(1, 0.4));
    c.input_lower = Vector::Constant(1, 0.0);
    c.input_upper = Vector::Constant(1, 10.0);
    c.N = {2, 3, 4};
    c.epsilon = 7.5e-2;
  } else {
    throw ConfigError("unknown model id '" + model_id + "' (expected 'bod' or 'second-order')");
  }
  c.methods = {Method::classical, Method::ellipsoidal, Method::exact, Method::kkt};
  c.output_dir = "results/" + c.name;
  return c;
}

namespace detail {

inline Vector json_vector(const Json &j, const char *what) {
  if (!j.is_array())
    throw ConfigError(std::string(what) + " must be an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number())
      throw ConfigError(std::string(what) + " must be an array of numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

inline Json vector_json(const Vector &v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i)
    a.push_back(v[i]);
  return a;
}

/// Fixed-format number text so outputs do not depend on stream state.
inline std::string num(double x) {
  if (std::isnan(x))
    return "nan";
  if (std::isinf(x))
    return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline void write_text(const std::filesystem::path &path, const std::string &text) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error("cannot write " + path.string());
  out << text;
}

} // namespace detail

inline RunConfig parse_run_config(const Json &j) {
  try {
    RunConfig c;
    if (!j.is_object())
      throw ConfigError("run configuration must be a JSON object");
    static const std::vector<std::string> known{"name", "model", "p_hat", "noise", "alpha", "criteria", "methods",
                                                "N", "input_bounds", "search_box", "epsilon", "solver", "seed",
                                                "output_dir", "record_runtime", "robustness"};
    for (const auto &[key, value] : j.items())
      if (std::find(known.begin(), known.end(), key) == known.end())
        throw ConfigError("unknown configuration key '" + key + "'");
    // settings of the named built-in model are the defaults for every key
    std::string id = "bod";
    if (j.contains("model"))
      id = j.at("model").is_string() ? j.at("model").get<std::string>() : j.at("model").at("id").get<std::string>();
    c = default_config(id);
    if (j.contains("model") && j.at("model").is_object() && j.at("model").contains("constants"))
      for (const auto &[k, v] : j.at("model").at("constants").items())
        c.constants[k] = v.get<double>();
    c.name = j.value("name", c.name);
    c.output_dir = "results/" + c.name;
    if (j.contains("p_hat"))
      c.p_hat = detail::json_vector(j.at("p_hat"), "p_hat");
    if (j.contains("noise")) {
      const Json &n = j.at("noise");
      const std::string kind = n.value("kind", std::string("known_sigma"));
      const Vector sigma = n.at("sigma").is_number() ? Vector::Constant(1, n.at("sigma").get<double>())
                                                     : detail::json_vector(n.at("sigma"), "noise.sigma");
      if (kind == "known_sigma" || kind == "known")
        c.noise = NoiseModel::known(sigma);
      else if (kind == "unknown_variance" || kind == "unknown")
        c.noise = NoiseModel::unknown(sigma);
      else
        throw ConfigError("noise.kind must be known_sigma or unknown_variance");
    }
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("criteria")) {
      c.criteria.clear();
      for (const auto &x : j.at("criteria"))
        c.criteria.push_back(parse_criterion(x.get<std::string>()));
    }
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto &x : j.at("methods"))
        c.methods.push_back(parse_method(x.get<std::string>()));
    }
    if (j.contains("N")) {
      c.N.clear();
      for (const auto &x : j.at("N"))
        c.N.push_back(x.get<int>());
    }
    if (j.contains("input_bounds")) {
      c.input_lower = detail::json_vector(j.at("input_bounds").at("lower"), "input_bounds.lower");
      c.input_upper = detail::json_vector(j.at("input_bounds").at("upper"), "input_bounds.upper");
    }
    if (j.contains("search_box")) {
      c.box_lower = detail::json_vector(j.at("search_box").at("lower"), "search_box.lower");
      c.box_upper = detail::json_vector(j.at("search_box").at("upper"), "search_box.upper");
    }
    c.epsilon = j.value("epsilon", c.epsilon);
    if (j.contains("solver")) {
      const Json &s = j.at("solver");
      SolverSettings &st = c.solver;
      st.tolerance = s.value("tolerance", st.tolerance);
      st.max_iterations = s.value("max_iterations", st.max_iterations);
      st.n_starts = s.value("n_starts", st.n_starts);
      st.grid_resolution = s.value("grid_resolution", st.grid_resolution);
      st.upper_restarts = s.value("upper_restarts", st.upper_restarts);
      st.nested_tolerance = s.value("nested_tolerance", st.nested_tolerance);
      st.rays = s.value("rays", st.rays);
      st.lower_starts = s.value("lower_starts", st.lower_starts);
      st.saddle_probes = s.value("saddle_probes", st.saddle_probes);
      st.saddle_radius = s.value("saddle_radius", st.saddle_radius);
      if (s.contains("registration"))
        st.registration = parse_registration(s.at("registration").get<std::string>());
    }
    if (j.contains("seed"))
      c.solver.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.value("output_dir", c.output_dir);
    c.record_runtime = j.value("record_runtime", c.record_runtime);
    if (j.contains("robustness")) {
      const Json &r = j.at("robustness");
      c.robustness.trials = r.value("trials", c.robustness.trials);
      c.robustness.seed = r.value("seed", c.robustness.seed);
      c.robustness.N = r.value("N", c.robustness.N);
      c.robustness.sigma = r.value("sigma", c.robustness.sigma);
    }
    c.validate();
    return c;
  } catch (const Json::exception &e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open configuration file " + path);
  Json j;
  try {
    j = Json::parse(in, nullptr, true, true);
  } catch (const Json::exception &e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

inline Json to_json(const DesignResult &r, bool with_runtime = true) {
  Json j;
  j["criterion"] = to_string(r.criterion);
  j["method"] = to_string(r.method);
  j["N"] = r.N;
  Json rows = Json::array();
  for (Eigen::Index t = 0; t < r.U_star.rows(); ++t) {
    if (r.U_star.cols() == 1) {
      rows.push_back(r.U_star(t, 0));
    } else {
      rows.push_back(detail::vector_json(r.U_star.row(t).transpose()));
    }
  }
  j["U_star"] = rows;
  auto finite_or_null = [](double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); };
  j["objective_exact"] = finite_or_null(r.objective_exact);
  j["objective_surrogate"] = finite_or_null(r.objective_surrogate);
  j["iterations"] = r.iterations;
  Json certs = Json::array();
  for (double c : r.certificates)
    certs.push_back(finite_or_null(c));
  j["certificates"] = certs;
  j["converged"] = r.converged;
  j["seed"] = r.seed;
  j["runtime_s"] = with_runtime ? finite_or_null(r.runtime_s) : Json(nullptr);
  j["message"] = r.message;
  return j;
}

// ---------------------------------------------------------------------------------------------
// Case-study tables

struct TableRow {
  Method method = Method::classical;
  Criterion criterion = Criterion::A;
  int N = 0;
  std::optional<DesignResult> result;
  std::string error;
  int exit_code = 0; // 0 ok, 2 config, 3 solver, 4 verification
};

inline bool method_applies(Method m, Criterion c) {
  if (m == Method::ellipsoidal)
    return c == Criterion::D;
  if (m == Method::kkt)
    return c == Criterion::A;
  return true;
}

inline std::string design_file_name(Method m, Criterion c, int N) {
  return std::string("design_") + to_string(m) + "_" + to_string(c) + "_N" + std::to_string(N) + ".json";
}

inline std::string table_csv(const std::vector<TableRow> &rows) {
  std::ostringstream os;
  os << "family,criterion,N,U_star,phi_exact,phi_surrogate,status\n";
  for (const auto &r : rows) {
    os << to_string(r.method) << ',' << to_string(r.criterion) << ',' << r.N << ',';
    if (r.result) {
      const Vector u = design_to_vector(r.result->U_star);
      for (Eigen::Index i = 0; i < u.size(); ++i)
        os << (i ? ";" : "") << detail::num(u[i]);
      os << ',' << detail::num(r.result->objective_exact) << ',' << detail::num(r.result->objective_surrogate)
         << ",ok\n";
    } else {
      std::string e = r.error;
      for (auto &ch : e)
        if (ch == ',' || ch == '\n')
          ch = ' ';
      os << ",nan,nan,failed: " << e << '\n';
    }
  }
  return os.str();
}

/// Solve every applicable (method, criterion, N) of the configuration. Failures stay in their row.
inline std::vector<TableRow> run_case_study(const RunConfig &cfg, bool write_files = true,
                                            const std::function<void(const TableRow &)> &progress = {}) {
  cfg.validate();
  std::vector<TableRow> rows;
  for (Method m : cfg.methods)
    for (Criterion c : cfg.criteria) {
      if (!method_applies(m, c))
        continue;
      for (int n : cfg.N) {
        TableRow row;
        row.method = m;
        row.criterion = c;
        row.N = n;
        try {
          row.result = solve_design(cfg.problem(c, m, n));
        } catch (const ConfigError &e) {
          row.error = e.what();
          row.exit_code = 2;
        } catch (const VerificationError &e) {
          row.error = e.what();
          row.exit_code = 4;
        } catch (const Error &e) {
          row.error = e.what();
          row.exit_code = 3;
        }
        if (write_files && row.result)
          detail::write_text(std::filesystem::path(cfg.output_dir) / design_file_name(m, c, n),
                             to_json(*row.result, cfg.record_runtime).dump(2) + "\n");
        if (progress)
          progress(row);
        rows.push_back(std::move(row));
      }
    }
  if (write_files)
    detail::write_text(std::filesystem::path(cfg.output_dir) / "table.csv", table_csv(rows));
  return rows;
}

// ---------------------------------------------------------------------------------------------
// Robustness study

struct RobustnessDesign {
  Method method = Method::classical;
  Criterion criterion = Criterion::A;
  Design U;
};

struct RobustnessSeries {
  RobustnessDesign design;
  double nominal = 0.0;
  std::vector<double> values; // NaN marks a failed trial
  int failed = 0;
  double mean = 0.0;
  double variance = 0.0; // unbiased sample variance over successful trials
  double worst = 0.0;
};

struct RobustnessReport {
  int trials = 0;
  std::uint64_t seed = 0;
  Vector sigma;
  std::vector<RobustnessSeries> series;
};

/// Mean, unbiased variance and maximum over the finite entries, accumulated in trial order.
inline void summarize(RobustnessSeries &s) {
  double sum = 0.0;
  int n = 0;
  s.worst = -std::numeric_limits<double>::infinity();
  s.failed = 0;
  for (double v : s.values) {
    if (!std::isfinite(v)) {
      ++s.failed;
      continue;
    }
    sum += v;
    ++n;
    s.worst = std::max(s.worst, v);
  }
  s.mean = n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
  double ss = 0.0;
  for (double v : s.values)
    if (std::isfinite(v))
      ss += (v - s.mean) * (v - s.mean);
  s.variance = n > 1 ? ss / (n - 1) : std::numeric_limits<double>::quiet_NaN();
  if (n == 0)
    s.worst = std::numeric_limits<double>::quiet_NaN();
}

/// Trial t uses substream t for every design, so the designs see the same standard-normal draws.
/// The region keeps the nominal center and design-time threshold; only the measurements are noisy.
inline RobustnessReport robustness_study(const RegionSetup &setup, const std::vector<RobustnessDesign> &designs,
                                         int trials, std::uint64_t seed, double epsilon,
                                         const GeometrySettings &gs = {},
                                         GridRegistration reg = GridRegistration::cell_centred,
                                         double sigma_override = -1.0) {
  if (trials < 1)
    throw ConfigError("robustness study needs at least one trial");
  RobustnessReport rep;
  rep.trials = trials;
  rep.seed = seed;
  rep.sigma = sigma_override >= 0.0 ? Vector::Constant(setup.noise.sigma.size(), sigma_override) : setup.noise.sigma;
  const NoiseStream stream{seed, rep.sigma, 0};
  const int ny = setup.model.n_y();
  for (const auto &d : designs) {
    RobustnessSeries s;
    s.design = d;
    s.design.U = sorted_design(d.U);
    s.nominal = exact_phi(setup, s.design.U, d.criterion, epsilon, gs, reg).phi;
    const Eigen::Index N = s.design.U.rows();
    const Matrix clean = simulate_dataset(setup.model, setup.p_hat, s.design.U, setup.noise).measurements;
    s.values.reserve(static_cast<std::size_t>(trials));
    for (int t = 0; t < trials; ++t) {
      const auto e = gaussian_draws(stream.substream(static_cast<std::uint64_t>(t)),
                                    static_cast<std::size_t>(N * ny));
      Matrix Y = clean;
      for (Eigen::Index i = 0; i < N; ++i)
        for (int k = 0; k < ny; ++k)
          Y(i, k) += e[static_cast<std::size_t>(i * ny + k)];
      double v = std::numeric_limits<double>::quiet_NaN();
      try {
        v = exact_phi(make_noisy_crspec(setup, s.design.U, Y), d.criterion, epsilon, gs, reg).phi;
      } catch (const Error &) {
        // flagged below through the NaN entry
      }
      s.values.push_back(v);
    }
    summarize(s);
    rep.series.push_back(std::move(s));
  }
  return rep;
}

/// Wide per-trial table: one row per (trial, method) with the three criteria side by side.
inline std::string robustness_csv(const RobustnessReport &rep) {
  std::vector<Method> methods;
  for (const auto &s : rep.series)
    if (std::find(methods.begin(), methods.end(), s.design.method) == methods.end())
      methods.push_back(s.design.method);
  std::ostringstream os;
  os << "trial,method,phi_A,phi_D,phi_E\n";
  for (int t = 0; t < rep.trials; ++t)
    for (Method m : methods) {
      os << t << ',' << to_string(m);
      for (Criterion c : {Criterion::A, Criterion::D, Criterion::E}) {
        os << ',';
        for (const auto &s : rep.series)
          if (s.design.method == m && s.design.criterion == c) {
            os << detail::num(s.values[static_cast<std::size_t>(t)]);
            break;
          }
      }
      os << '\n';
    }
  return os.str();
}

inline std::string robustness_summary_csv(const RobustnessReport &rep) {
  std::ostringstream os;
  os << "method,criterion,N,U_star,nominal,trials,failed,mean,variance,worst,seed\n";
  for (const auto &s : rep.series) {
    os << to_string(s.design.method) << ',' << to_string(s.design.criterion) << ',' << s.design.U.rows() << ',';
    const Vector u = design_to_vector(s.design.U);
    for (Eigen::Index i = 0; i < u.size(); ++i)
      os << (i ? ";" : "") << detail::num(u[i]);
    os << ',' << detail::num(s.nominal) << ',' << rep.trials << ',' << s.failed << ',' << detail::num(s.mean) << ','
       << detail::num(s.variance) << ',' << detail::num(s.worst) << ',' << rep.seed << '\n';
  }
  return os.str();
}

inline void write_robustness(const RobustnessReport &rep, const std::string &dir) {
  detail::write_text(std::filesystem::path(dir) / "robustness.csv", robustness_csv(rep));
  detail::write_text(std::filesystem::path(dir) / "robustness_summary.csv", robustness_summary_csv(rep));
}

/// Designs for the robustness study: the DesignResult rows of a table at the requested N.
inline std::vector<RobustnessDesign> robustness_designs(const std::vector<TableRow> &rows, int N) {
  std::vector<RobustnessDesign> out;
  for (const auto &r : rows)
    if (r.result && r.N == N && r.method != Method::kkt)
      out.push_back({r.method, r.criterion, r.result->U_star});
  return out;
}

/// Read design_*.json files written by run_case_study.
inline std::vector<RobustnessDesign> load_designs(const std::string &dir, int N) {
  std::vector<RobustnessDesign> out;
  if (!std::filesystem::is_directory(dir))
    throw ConfigError("design directory " + dir + " does not exist");
  std::vector<std::filesystem::path> files;
  for (const auto &entry : std::filesystem::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("design_", 0) == 0 && entry.path().extension() == ".json")
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto &f : files) {
    std::ifstream in(f);
    const Json j = Json::parse(in);
    if (j.at("N").get<int>() != N)
      continue;
    RobustnessDesign d;
    d.method = parse_method(j.at("method").get<std::string>());
    if (d.method == Method::kkt)
      continue;
    d.criterion = parse_criterion(j.at("criterion").get<std::string>());
    const Json &u = j.at("U_star");
    const auto n_u = u.at(0).is_array() ? static_cast<Eigen::Index>(u.at(0).size()) : 1;
    d.U.resize(static_cast<Eigen::Index>(u.size()), n_u);
    for (std::size_t t = 0; t < u.size(); ++t)
      for (Eigen::Index k = 0; k < n_u; ++k)
        d.U(static_cast<Eigen::Index>(t), k) = u.at(t).is_array() ? u.at(t).at(static_cast<std::size_t>(k)).get<double>()
                                                           : u.at(t).get<double>();
    out.push_back(std::move(d));
  }
  if (out.empty())
    throw ConfigError("no design files for N=" + std::to_string(N) + " in " + dir);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Plot data

namespace detail {

inline std::vector<Vector> ellipse_points(const Vector &center, const Matrix &M, double level, int count) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(M);
  const Matrix T = es.eigenvectors() * es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse().asDiagonal();
  std::vector<Vector> pts;
  for (int k = 0; k <= count; ++k) {
    const double a = 2.0 * std::numbers::pi * k / count;
    Vector z(2);
    z << std::cos(a), std::sin(a);
    pts.push_back(center + std::sqrt(std::max(level, 0.0)) * T * z);
  }
  return pts;
}

inline std::string points_csv(const std::vector<Vector> &pts, int line = 0) {
  std::ostringstream os;
  for (const auto &p : pts)
    os << line << ',' << num(p[0]) << ',' << num(p[1]) << '\n';
  return os.str();
}

} // namespace detail

struct PlotExport {
  std::vector<std::string> files;
  std::vector<Polyline> exact_boundary;
  AnchorSet anchors;
  FarthestPair pair;
  EllipsoidScalings scalings;
};

/// CSV files (line, p1, p2) describing the design-time region of U for two-parameter models.
inline PlotExport export_region_plots(const RegionSetup &setup, const Design &U, const std::string &dir,
                                      const std::string &prefix, const GeometrySettings &gs = {},
                                      int contour_resolution = 300) {
  if (setup.model.n_p() != 2)
    throw DomainError("plot export needs a two-parameter model");
  const auto cr = make_design_crspec(setup, U);
  PlotExport px;
  const RayFan fan = ray_fan(cr, 4 * gs.rays);
  px.anchors = anchor_points(cr, gs, &fan);
  px.pair = farthest_pair(cr, px.anchors, gs, &fan);
  const Matrix M = cr.quadratic_form_matrix();
  px.scalings = ellipsoid_scalings(cr, M, gs, &fan);
  const LinearizedRegion lin = linearized_cr(setup.model, setup.p_hat, U, setup.noise, setup.alpha);

  Box box = bounding_orthotope(px.anchors);
  const Vector pad = 0.05 * box.width();
  box.lower -= pad;
  box.upper += pad;
  px.exact_boundary = boundary_trace(cr, box, contour_resolution);

  const std::string head = "line,p1,p2\n";
  auto emit = [&](const std::string &name, const std::string &body) {
    const auto path = std::filesystem::path(dir) / (prefix + "_" + name + ".csv");
    detail::write_text(path, head + body);
    px.files.push_back(path.string());
  };
  {
    std::string body;
    for (std::size_t k = 0; k < px.exact_boundary.size(); ++k) {
      auto pts = px.exact_boundary[k].points;
      if (px.exact_boundary[k].closed && !pts.empty())
        pts.push_back(pts.front());
      body += detail::points_csv(pts, static_cast<int>(k));
    }
    emit("exact_cr", body);
  }
  emit("linearized", detail::points_csv(detail::ellipse_points(lin.p_hat, lin.M, lin.c, 360)));
  emit("ellipse_inner", detail::points_csv(detail::ellipse_points(setup.p_hat, M, px.scalings.k_in, 360)));
  emit("ellipse_outer", detail::points_csv(detail::ellipse_points(setup.p_hat, M, px.scalings.k_out, 360)));
  {
    const Vector &a = px.anchors.lower, &b = px.anchors.upper;
    std::vector<Vector> c(5, Vector(2));
    c[0] << a[0], a[1];
    c[1] << b[0], a[1];
    c[2] << b[0], b[1];
    c[3] << a[0], b[1];
    c[4] << a[0], a[1];
    emit("orthotope", detail::points_csv(c));
  }
  emit("anchors", detail::points_csv(px.anchors.pi));
  emit("farthest_pair", detail::points_csv({px.pair.phi1, px.pair.phi2}));
  return px;
}

} // namespace oed
