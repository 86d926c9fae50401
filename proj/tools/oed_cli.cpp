// Command-line front end: design, table, robustness, plot-data, quantile.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "oed/experiments.hpp"

namespace {

using namespace oed;

constexpr int kOk = 0;
constexpr int kConfig = 2;
constexpr int kSolver = 3;
constexpr int kVerification = 4;

struct CommonFlags {
  std::string config;
  std::string model;
  std::vector<double> p_hat;
  std::vector<double> sigma;
  std::string noise_kind;
  std::optional<double> alpha;
  std::optional<double> epsilon;
  std::vector<double> u_lower, u_upper;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string registration;
  std::optional<int> grid_resolution;
  std::optional<int> max_iterations;
  std::optional<bool> deterministic;

  void add(CLI::App *app) {
    app->add_option("--config", config, "JSON run configuration");
    app->add_option("--model", model, "built-in model id (bod, second-order)");
    app->add_option("--p-hat", p_hat, "nominal parameters");
    app->add_option("--sigma", sigma, "noise standard deviation(s)");
    app->add_option("--noise", noise_kind, "known_sigma or unknown_variance");
    app->add_option("--alpha", alpha, "confidence level");
    app->add_option("--epsilon", epsilon, "grid spacing for the volume estimate");
    app->add_option("--u-lower", u_lower, "lower input bound(s)");
    app->add_option("--u-upper", u_upper, "upper input bound(s)");
    app->add_option("--seed", seed, "seed");
    app->add_option("--out", out, "output directory");
    app->add_option("--registration", registration, "volume grid: cell-centred or node-anchored");
    app->add_option("--grid-resolution", grid_resolution, "verification grid nodes per axis");
    app->add_option("--max-iterations", max_iterations, "upper-level iteration cap");
    app->add_flag("--deterministic", deterministic, "omit runtimes so repeated runs give identical files");
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? default_config(model.empty() ? "bod" : model) : load_run_config(config);
    if (!config.empty() && !model.empty() && model != c.model_id) {
      const RunConfig base = default_config(model);
      c.model_id = base.model_id;
      c.p_hat = base.p_hat;
      c.noise = base.noise;
      c.input_lower = base.input_lower;
      c.input_upper = base.input_upper;
    }
    auto vec = [](const std::vector<double> &v) { return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())); };
    if (!p_hat.empty())
      c.p_hat = vec(p_hat);
    if (!sigma.empty())
      c.noise.sigma = vec(sigma);
    if (!noise_kind.empty()) {
      if (noise_kind == "known_sigma" || noise_kind == "known")
        c.noise.kind = NoiseModel::Kind::known_sigma;
      else if (noise_kind == "unknown_variance" || noise_kind == "unknown")
        c.noise.kind = NoiseModel::Kind::unknown_variance;
      else
        throw ConfigError("--noise must be known_sigma or unknown_variance");
    }
    if (alpha)
      c.alpha = *alpha;
    if (epsilon)
      c.epsilon = *epsilon;
    if (!u_lower.empty())
      c.input_lower = vec(u_lower);
    if (!u_upper.empty())
      c.input_upper = vec(u_upper);
    if (seed)
      c.solver.seed = *seed;
    if (!out.empty())
      c.output_dir = out;
    if (!registration.empty())
      c.solver.registration = parse_registration(registration);
    if (grid_resolution)
      c.solver.grid_resolution = *grid_resolution;
    if (max_iterations)
      c.solver.max_iterations = *max_iterations;
    if (deterministic && *deterministic)
      c.record_runtime = false;
    c.validate();
    return c;
  }
};

std::string design_text(const Design &U) {
  std::string s = "{";
  for (Eigen::Index t = 0; t < U.rows(); ++t) {
    for (Eigen::Index k = 0; k < U.cols(); ++k) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4g", U(t, k));
      s += (t || k) ? (k ? " " : ", ") : "";
      s += buf;
    }
  }
  return s + "}";
}

void print_row(const TableRow &r) {
  std::printf("%-11s %s N=%d  ", to_string(r.method), to_string(r.criterion), r.N);
  if (r.result)
    std::printf("U*=%s  phi=%.5g  (%.1fs, %s)\n", design_text(r.result->U_star).c_str(), r.result->objective_exact,
                r.result->runtime_s, r.result->converged ? "converged" : "not converged");
  else
    std::printf("failed: %s\n", r.error.c_str());
  std::fflush(stdout);
}

template <class F> int guarded(F &&body) {
  try {
    return body();
  } catch (const ConfigError &e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfig;
  } catch (const VerificationError &e) {
    std::cerr << "verification failure: " << e.what() << '\n';
    return kVerification;
  } catch (const Error &e) {
    std::cerr << "solver failure: " << e.what() << '\n';
    return kSolver;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kSolver;
  }
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Optimal experiment design on exact confidence regions"};
  app.require_subcommand(1);

  CommonFlags design_flags;
  std::string criterion_s = "a", method_s = "classical";
  int design_n = 0;
  auto *design = app.add_subcommand("design", "solve one design problem");
  design_flags.add(design);
  design->add_option("--criterion", criterion_s, "a, d or e");
  design->add_option("--method", method_s, "classical, exact, ellipsoidal or kkt");
  design->add_option("--n", design_n, "number of samples (default: first N of the config)");

  CommonFlags table_flags;
  auto *table = app.add_subcommand("table", "solve every (method, criterion, N) of a configuration");
  table_flags.add(table);

  CommonFlags rob_flags;
  std::string designs_dir;
  std::optional<int> trials, rob_n;
  std::optional<std::uint64_t> rob_seed;
  auto *rob = app.add_subcommand("robustness", "Monte Carlo study of exact criteria under measurement noise");
  rob_flags.add(rob);
  rob->add_option("--designs", designs_dir, "directory with design_*.json from a table run (default: solve them)");
  rob->add_option("--trials", trials, "number of simulated experiments");
  rob->add_option("--n", rob_n, "sample count of the studied designs");
  rob->add_option("--trial-seed", rob_seed, "seed of the noise draws");

  CommonFlags plot_flags;
  std::string design_file, prefix = "region";
  std::vector<double> plot_u;
  auto *plot = app.add_subcommand("plot-data", "export region geometry of one design as CSV");
  plot_flags.add(plot);
  plot->add_option("--design-file", design_file, "design_*.json to plot");
  plot->add_option("--u", plot_u, "sampling inputs (single-input models)");
  plot->add_option("--prefix", prefix, "file name prefix");

  std::string dist = "chi2";
  double q_alpha = 0.9545;
  int dof1 = 2, dof2 = 2;
  auto *quant = app.add_subcommand("quantile", "chi-squared or F quantile");
  quant->add_option("--dist", dist, "chi2 or f");
  quant->add_option("--alpha", q_alpha, "probability");
  quant->add_option("--dof1", dof1, "degrees of freedom (numerator for f)");
  quant->add_option("--dof2", dof2, "denominator degrees of freedom for f");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (design->parsed())
    return guarded([&] {
      const RunConfig cfg = design_flags.resolve();
      const int n = design_n > 0 ? design_n : cfg.N.front();
      const DesignResult r = solve_design(cfg.problem(parse_criterion(criterion_s), parse_method(method_s), n));
      TableRow row{r.method, r.criterion, r.N, r, {}, 0};
      print_row(row);
      detail::write_text(std::filesystem::path(cfg.output_dir) / design_file_name(r.method, r.criterion, r.N),
                         to_json(r, cfg.record_runtime).dump(2) + "\n");
      return kOk;
    });

  if (table->parsed())
    return guarded([&] {
      const RunConfig cfg = table_flags.resolve();
      const auto rows = run_case_study(cfg, true, print_row);
      std::printf("wrote %s/table.csv\n", cfg.output_dir.c_str());
      for (const auto &r : rows)
        if (r.exit_code != 0)
          return r.exit_code;
      return kOk;
    });

  if (rob->parsed())
    return guarded([&] {
      RunConfig cfg = rob_flags.resolve();
      if (trials)
        cfg.robustness.trials = *trials;
      if (rob_seed)
        cfg.robustness.seed = *rob_seed;
      const int n = rob_n ? *rob_n : (cfg.robustness.N > 0 ? cfg.robustness.N : cfg.N.front());
      std::vector<RobustnessDesign> designs;
      if (!designs_dir.empty()) {
        designs = load_designs(designs_dir, n);
      } else {
        cfg.N = {n};
        cfg.methods = {Method::classical, Method::ellipsoidal, Method::exact};
        designs = robustness_designs(run_case_study(cfg, true, print_row), n);
      }
      const auto rep = robustness_study(cfg.setup(), designs, cfg.robustness.trials, cfg.robustness.seed,
                                        cfg.epsilon, cfg.problem(Criterion::A, Method::exact, n).geometry(),
                                        cfg.solver.registration, cfg.robustness.sigma);
      write_robustness(rep, cfg.output_dir);
      std::printf("%-11s %s  %10s %10s %12s %10s %6s\n", "method", "crit", "nominal", "mean", "variance", "worst",
                  "failed");
      for (const auto &s : rep.series)
        std::printf("%-11s %s     %10.5g %10.5g %12.5g %10.5g %6d\n", to_string(s.design.method),
                    to_string(s.design.criterion), s.nominal, s.mean, s.variance, s.worst, s.failed);
      std::printf("wrote %s/robustness.csv\n", cfg.output_dir.c_str());
      return kOk;
    });

  if (plot->parsed())
    return guarded([&] {
      const RunConfig cfg = plot_flags.resolve();
      Design U;
      if (!design_file.empty()) {
        const auto dir = std::filesystem::path(design_file).parent_path().string();
        std::ifstream in(design_file);
        if (!in)
          throw ConfigError("cannot open " + design_file);
        const Json j = Json::parse(in);
        const auto loaded = load_designs(dir.empty() ? "." : dir, j.at("N").get<int>());
        for (const auto &d : loaded)
          if (to_string(d.method) == j.at("method").get<std::string>() &&
              to_string(d.criterion) == j.at("criterion").get<std::string>())
            U = d.U;
      } else if (!plot_u.empty()) {
        U = Design(static_cast<Eigen::Index>(plot_u.size()), 1);
        for (std::size_t i = 0; i < plot_u.size(); ++i)
          U(static_cast<Eigen::Index>(i), 0) = plot_u[i];
      } else {
        throw ConfigError("plot-data needs --design-file or --u");
      }
      if (U.rows() == 0)
        throw ConfigError("no design found in " + design_file);
      const auto px = export_region_plots(cfg.setup(), U, (std::filesystem::path(cfg.output_dir) / "plots").string(),
                                          prefix, cfg.problem(Criterion::A, Method::exact, static_cast<int>(U.rows())).geometry());
      for (const auto &f : px.files)
        std::printf("wrote %s\n", f.c_str());
      return kOk;
    });

  if (quant->parsed())
    return guarded([&] {
      double q = 0.0;
      try {
        if (dist == "chi2")
          q = chi2_quantile(q_alpha, dof1);
        else if (dist == "f")
          q = f_quantile(q_alpha, dof1, dof2);
        else
          throw ConfigError("--dist must be chi2 or f");
      } catch (const DomainError &e) {
        throw ConfigError(e.what());
      }
      std::printf("%.10g\n", q);
      return kOk;
    });
  return kOk;
}
