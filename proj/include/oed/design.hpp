#pragma once

// Upper-level design optimization: classical A/D/E, exact A/D/E and ellipsoidal D by the
// nested scheme, and exact A through the KKT single-level reformulation.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "oed/errors.hpp"
#include "oed/estimation.hpp"
#include "oed/geometry.hpp"
#include "oed/nlp.hpp"
#include "oed/sensitivity.hpp"

namespace oed {

enum class Criterion { A, D, E };
enum class Method { classical, exact, ellipsoidal, kkt };

inline const char *to_string(Criterion c) {
  switch (c) {
  case Criterion::A: return "A";
  case Criterion::D: return "D";
  case Criterion::E: return "E";
  }
  return "?";
}

inline const char *to_string(Method m) {
  switch (m) {
  case Method::classical: return "classical";
  case Method::exact: return "exact";
  case Method::ellipsoidal: return "ellipsoidal";
  case Method::kkt: return "kkt";
  }
  return "?";
}

inline Criterion parse_criterion(std::string s) {
  for (auto &ch : s)
    ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  if (s == "A")
    return Criterion::A;
  if (s == "D")
    return Criterion::D;
  if (s == "E")
    return Criterion::E;
  throw ConfigError("unknown criterion '" + s + "' (expected a, d or e)");
}

inline Method parse_method(const std::string &s) {
  if (s == "classical")
    return Method::classical;
  if (s == "exact" || s == "nested")
    return Method::exact;
  if (s == "ellipsoidal" || s == "ellipsoidal-d")
    return Method::ellipsoidal;
  if (s == "kkt" || s == "kkt-exact-a")
    return Method::kkt;
  throw ConfigError("unknown method '" + s + "' (expected classical, exact, ellipsoidal or kkt)");
}

struct SolverSettings {
  double tolerance = 1e-8;          // lower-level KKT tolerance
  int max_iterations = 200;         // upper-level iteration cap
  int n_starts = 32;                // classical multistart count
  int grid_resolution = 400;
  std::uint64_t seed = 7;
  int upper_restarts = 8;
  double nested_tolerance = 1e-6;
  int rays = 96;
  int lower_starts = 4;             // extra low-discrepancy starts per lower-level problem
  int saddle_probes = 5;
  double saddle_radius = 1e-3;
  GridRegistration registration = GridRegistration::cell_centred;
  bool evaluate_exact = true;       // score every design on the exact criterion afterwards
};

struct DesignProblem {
  explicit DesignProblem(RegionSetup s) : setup(std::move(s)) {}

  RegionSetup setup;
  Criterion criterion = Criterion::A;
  Method method = Method::classical;
  int N = 1;
  Vector input_lower; // per input
  Vector input_upper;
  double epsilon = 5e-3;
  SolverSettings solver;

  void validate() const {
    const int nu = setup.model.n_u();
    if (N < 1)
      throw ConfigError("N must be at least 1");
    if (input_lower.size() != nu || input_upper.size() != nu)
      throw ConfigError("input bounds must have n_u entries");
    if ((input_lower.array() > input_upper.array()).any())
      throw ConfigError("input bounds must satisfy lower <= upper");
    if (method == Method::ellipsoidal && criterion != Criterion::D)
      throw ConfigError("the ellipsoidal method applies to criterion D only");
    if (method == Method::kkt && criterion != Criterion::A)
      throw ConfigError("the KKT method applies to criterion A only");
    if (setup.p_hat.size() != setup.model.n_p())
      throw ConfigError("p_hat must have n_p entries");
    if (!(epsilon > 0.0))
      throw ConfigError("epsilon must be positive");
    if (setup.noise.kind == NoiseModel::Kind::unknown_variance && N <= setup.model.n_p() && method != Method::classical)
      throw ConfigError("unknown-variance regions need N > n_p");
  }

  GeometrySettings geometry() const {
    GeometrySettings g;
    g.n_starts = solver.lower_starts;
    g.seed = solver.seed;
    g.grid_resolution = solver.grid_resolution;
    g.rays = solver.rays;
    g.tolerances.stationarity = std::min(1e-6, solver.tolerance);
    return g;
  }

  Vector flat_lower() const { return input_lower.replicate(N, 1); }
  Vector flat_upper() const { return input_upper.replicate(N, 1); }
};

struct DesignResult {
  Criterion criterion = Criterion::A;
  Method method = Method::classical;
  int N = 0;
  Design U_star;
  double objective_surrogate = std::numeric_limits<double>::quiet_NaN();
  double objective_exact = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  std::vector<double> certificates;   // lower-level grid/sample gaps at accepted iterates
  bool converged = false;
  double projected_gradient = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t seed = 0;
  double runtime_s = 0.0;
  std::string message;
};

/// Rows sorted lexicographically (results are permutation invariant).
inline Design sorted_design(const Design &U) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(U.rows()));
  for (std::size_t i = 0; i < idx.size(); ++i)
    idx[i] = static_cast<Eigen::Index>(i);
  std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index j = 0; j < U.cols(); ++j)
      if (U(a, j) != U(b, j))
        return U(a, j) < U(b, j);
    return a < b;
  });
  Design S(U.rows(), U.cols());
  for (std::size_t i = 0; i < idx.size(); ++i)
    S.row(static_cast<Eigen::Index>(i)) = U.row(idx[i]);
  return S;
}

// ---------------------------------------------------------------------------------------------
// Exact criteria at a fixed design

struct ExactEvaluation {
  double phi = 0.0;
  AnchorSet anchors;
  std::optional<FarthestPair> pair;
  std::optional<GridVolume> volume;
};

inline ExactEvaluation exact_phi(const ConfidenceRegionSpec &cr, Criterion c, double epsilon,
                                 const GeometrySettings &gs = {},
                                 GridRegistration reg = GridRegistration::cell_centred) {
  const RayFan fan = ray_fan(cr, 4 * gs.rays);
  ExactEvaluation ev;
  ev.anchors = anchor_points(cr, gs, &fan);
  switch (c) {
  case Criterion::A:
    ev.phi = ev.anchors.phi_A;
    break;
  case Criterion::D:
    ev.volume = grid_volume(cr, bounding_orthotope(ev.anchors), epsilon, reg);
    ev.phi = ev.volume->phi_D_hat;
    break;
  case Criterion::E:
    ev.pair = farthest_pair(cr, ev.anchors, gs, &fan);
    ev.phi = ev.pair->phi_E;
    break;
  }
  return ev;
}

/// Exact criterion of the design-time region (noise-free data at p_hat).
inline ExactEvaluation exact_phi(const RegionSetup &setup, const Design &U, Criterion c, double epsilon,
                                 const GeometrySettings &gs = {},
                                 GridRegistration reg = GridRegistration::cell_centred) {
  return exact_phi(make_design_crspec(setup, U), c, epsilon, gs, reg);
}

// ---------------------------------------------------------------------------------------------
// Classical designs

namespace detail {

inline Matrix classical_fim(const RegionSetup &setup, const Design &U) {
  return fisher_information(setup.model, setup.p_hat, U, setup.noise.sigma).matrix;
}

/// Eigenvalues of FIM^-1 (ascending), with a tiny ridge so singular designs stay finite.
inline Vector inverse_fim_eigenvalues(const Matrix &F) {
  const double ridge = 1e-12 * (1.0 + F.trace());
  Eigen::SelfAdjointEigenSolver<Matrix> es(F + ridge * Matrix::Identity(F.rows(), F.cols()));
  Vector ev = es.eigenvalues().cwiseMax(ridge).cwiseInverse();
  std::sort(ev.data(), ev.data() + ev.size());
  return ev;
}

/// log trace, log det or smoothed log lambda_max of FIM^-1.
inline double classical_log_objective(const Vector &inv_ev, Criterion c, double sharpness) {
  switch (c) {
  case Criterion::A: return std::log(inv_ev.sum());
  case Criterion::D: return inv_ev.array().log().sum();
  case Criterion::E: {
    const Vector l = inv_ev.array().log();
    const double m = l.maxCoeff();
    return m + std::log((sharpness * (l.array() - m)).exp().sum()) / sharpness;
  }
  }
  return 0.0;
}

inline double classical_value(const Vector &inv_ev, Criterion c) {
  switch (c) {
  case Criterion::A: return inv_ev.sum();
  case Criterion::D: return inv_ev.prod();
  case Criterion::E: return inv_ev.maxCoeff();
  }
  return 0.0;
}

inline std::vector<Vector> upper_starts(const DesignProblem &dp, int count, std::uint64_t seed) {
  const Vector lo = dp.flat_lower(), hi = dp.flat_upper();
  std::vector<Vector> starts;
  Vector eq(lo.size());
  const int nu = static_cast<int>(dp.input_lower.size());
  for (int t = 0; t < dp.N; ++t)
    for (int j = 0; j < nu; ++j)
      eq[t * nu + j] = dp.input_lower[j] + (dp.input_upper[j] - dp.input_lower[j]) * (t + 1.0) / (dp.N + 1.0);
  starts.push_back(eq);
  if (count > 0) {
    HaltonSequence h(static_cast<int>(lo.size()), seed);
    for (int k = 0; k < count; ++k)
      starts.push_back(lo + h.point(static_cast<std::uint64_t>(k)).cwiseProduct(hi - lo));
  }
  return starts;
}

} // namespace detail

inline DesignResult classical_design(const DesignProblem &dp) {
  dp.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const int nu = dp.setup.model.n_u();
  const double sharpness = 1e3;
  NlpProblem prob;
  prob.n = dp.N * nu;
  prob.objective = [&](const Vector &x) {
    const Vector ev = detail::inverse_fim_eigenvalues(detail::classical_fim(dp.setup, design_from_flat(x, nu)));
    return detail::classical_log_objective(ev, dp.criterion, sharpness);
  };
  prob.lower = dp.flat_lower();
  prob.upper = dp.flat_upper();
  NlpTolerances tol{1e-9, 1e-10, 1e-14, 500, false};
  const auto starts = detail::upper_starts(dp, dp.solver.n_starts, dp.solver.seed);
  NlpSolution best;
  int iterations = 0;
  for (const auto &x0 : starts) {
    NlpSolution s = solve_local(prob, x0, tol);
    iterations += s.iterations;
    if (!std::isfinite(s.value))
      continue;
    // accept non-converged local results too; they are ranked by value and polished below
    if (!std::isfinite(best.value) || s.value < best.value)
      best = std::move(s);
  }
  if (!std::isfinite(best.value))
    throw SolverError("classical design: every start failed");
  if (dp.criterion == Criterion::E) {
    // epigraph polish on the exact largest eigenvalue: min t s.t. log lambda_i(FIM^-1) <= t
    const int n = prob.n;
    const int np = dp.setup.model.n_p();
    NlpProblem epi;
    epi.n = n + 1;
    epi.objective = [n](const Vector &z) { return z[n]; };
    epi.gradient = [n](const Vector &z) { return Vector(Vector::Unit(z.size(), n)); };
    epi.n_ineq = np;
    epi.ineq = [&, n](const Vector &z) {
      const Vector ev = detail::inverse_fim_eigenvalues(detail::classical_fim(dp.setup, design_from_flat(z.head(n), nu)));
      return Vector(ev.array().log() - z[n]);
    };
    Vector lo(n + 1), hi(n + 1);
    lo << prob.lower, -1e6;
    hi << prob.upper, 1e6;
    epi.lower = lo;
    epi.upper = hi;
    Vector z0(n + 1);
    const Vector ev0 = detail::inverse_fim_eigenvalues(detail::classical_fim(dp.setup, design_from_flat(best.x, nu)));
    z0 << best.x, std::log(ev0.maxCoeff());
    const NlpSolution pol = solve_local(epi, z0, tol);
    iterations += pol.iterations;
    if (std::isfinite(pol.value) && pol.constraint_violation <= 1e-8 && pol.value <= z0[n] + 1e-12)
      best.x = pol.x.head(n);
  }
  DesignResult r;
  r.criterion = dp.criterion;
  r.method = Method::classical;
  r.N = dp.N;
  r.U_star = sorted_design(design_from_flat(best.x, nu));
  r.objective_surrogate =
      detail::classical_value(detail::inverse_fim_eigenvalues(detail::classical_fim(dp.setup, r.U_star)), dp.criterion);
  r.iterations = iterations;
  r.converged = true;
  r.seed = dp.solver.seed;
  if (dp.solver.evaluate_exact)
    r.objective_exact = exact_phi(dp.setup, r.U_star, dp.criterion, dp.epsilon, dp.geometry(), dp.solver.registration).phi;
  r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------------------------
// Parametric lower-level families (x1 = flattened design, x2 = lower-level variables)

namespace detail {

inline ConfidenceRegionSpec region_at(const RegionSetup &setup, const Vector &x1) {
  return make_design_crspec(setup, design_from_flat(x1, setup.model.n_u()));
}

} // namespace detail

/// Anchor problem for parameter j as a function of the design; same scaling as anchor_problem.
inline ParametricNlp anchor_parametric(const RegionSetup &setup, int N, int j, bool maximize) {
  const double s = std::max(setup.threshold(N), 1e-12);
  const int np = setup.model.n_p();
  ParametricNlp p;
  p.n_x1 = N * setup.model.n_u();
  p.n_x2 = np;
  p.sense = maximize ? Sense::maximize : Sense::minimize;
  p.objective = [j](const Vector &, const Vector &x2) { return x2[j]; };
  p.gradient_x2 = [j](const Vector &, const Vector &x2) { return Vector(Vector::Unit(x2.size(), j)); };
  p.n_ineq = 1;
  p.ineq = [setup, s](const Vector &x1, const Vector &x2) {
    return Vector::Constant(1, detail::region_at(setup, x1).excess(x2) / s);
  };
  p.ineq_jacobian_x2 = [setup, s](const Vector &x1, const Vector &x2) {
    return Matrix(detail::region_at(setup, x1).excess_gradient(x2).transpose() / s);
  };
  auto [lo, hi] = setup.search_box();
  p.lower = lo;
  p.upper = hi;
  return p;
}

inline ParametricNlp farthest_pair_parametric(const RegionSetup &setup, int N) {
  const double s = std::max(setup.threshold(N), 1e-12);
  const int n = setup.model.n_p();
  ParametricNlp p;
  p.n_x1 = N * setup.model.n_u();
  p.n_x2 = 2 * n;
  p.sense = Sense::maximize;
  p.objective = [n](const Vector &, const Vector &x) { return (x.head(n) - x.tail(n)).squaredNorm(); };
  p.gradient_x2 = [n](const Vector &, const Vector &x) {
    Vector g(2 * n);
    g << 2.0 * (x.head(n) - x.tail(n)), -2.0 * (x.head(n) - x.tail(n));
    return g;
  };
  p.n_ineq = 2;
  p.ineq = [setup, s, n](const Vector &x1, const Vector &x) {
    const auto cr = detail::region_at(setup, x1);
    Vector c(2);
    c << cr.excess(x.head(n)) / s, cr.excess(x.tail(n)) / s;
    return c;
  };
  p.ineq_jacobian_x2 = [setup, s, n](const Vector &x1, const Vector &x) {
    const auto cr = detail::region_at(setup, x1);
    Matrix J = Matrix::Zero(2, 2 * n);
    J.block(0, 0, 1, n) = cr.excess_gradient(x.head(n)).transpose() / s;
    J.block(1, n, 1, n) = cr.excess_gradient(x.tail(n)).transpose() / s;
    return J;
  };
  auto [lo, hi] = setup.search_box();
  Vector l2(2 * n), h2(2 * n);
  l2 << lo, lo;
  h2 << hi, hi;
  p.lower = l2;
  p.upper = h2;
  return p;
}

/// k_out (outer) or k_in problem with q built from the design's own information matrix.
inline ParametricNlp scaling_parametric(const RegionSetup &setup, int N, bool outer) {
  const double s = std::max(setup.threshold(N), 1e-12);
  ParametricNlp p;
  p.n_x1 = N * setup.model.n_u();
  p.n_x2 = setup.model.n_p();
  p.sense = outer ? Sense::maximize : Sense::minimize;
  const Vector ph = setup.p_hat;
  p.objective = [setup, ph](const Vector &x1, const Vector &x2) {
    const Matrix M = detail::region_at(setup, x1).quadratic_form_matrix();
    return (x2 - ph).dot(M * (x2 - ph));
  };
  p.gradient_x2 = [setup, ph](const Vector &x1, const Vector &x2) {
    const Matrix M = detail::region_at(setup, x1).quadratic_form_matrix();
    return Vector(2.0 * M * (x2 - ph));
  };
  auto h = [setup, s](const Vector &x1, const Vector &x2) {
    return Vector::Constant(1, detail::region_at(setup, x1).excess(x2) / s);
  };
  auto J = [setup, s](const Vector &x1, const Vector &x2) {
    return Matrix(detail::region_at(setup, x1).excess_gradient(x2).transpose() / s);
  };
  if (outer) {
    p.n_ineq = 1;
    p.ineq = h;
    p.ineq_jacobian_x2 = J;
  } else {
    p.n_eq = 1;
    p.eq = h;
    p.eq_jacobian_x2 = J;
  }
  auto [lo, hi] = setup.search_box();
  p.lower = lo;
  p.upper = hi;
  return p;
}

// ---------------------------------------------------------------------------------------------
// Nested scheme

/// Upper-level value at a design together with its gradient and the lower-level copy variables.
struct UpperEvaluation {
  double value = 0.0;
  Vector gradient;
  Vector copy;
  double gap = 0.0;
};

using UpperOracle = std::function<UpperEvaluation(const Vector &x, bool verify)>;

struct NestedOutcome {
  Vector x;
  UpperEvaluation at;
  int iterations = 0;
  bool converged = false;
  double projected_gradient = 0.0;
  std::vector<double> certificates;
  std::string message;
};

namespace detail {

inline double projected_gradient_norm(const Vector &x, const Vector &g, const Vector &lo, const Vector &hi) {
  return ((x - g).cwiseMax(lo).cwiseMin(hi) - x).lpNorm<Eigen::Infinity>();
}

} // namespace detail

/// Projected quasi-Newton descent on the upper level. Trial points use the lower level without
/// the grid certificate; every accepted iterate is re-evaluated with it.
inline NestedOutcome nested_minimize(const UpperOracle &oracle, const Vector &x0, const Vector &lo, const Vector &hi,
                                     int max_iterations, double tol) {
  const auto n = x0.size();
  NestedOutcome out;
  Vector x = x0.cwiseMax(lo).cwiseMin(hi);
  UpperEvaluation cur = oracle(x, true);
  out.certificates.push_back(cur.gap);
  Matrix H = Matrix::Identity(n, n);
  const Vector span = (hi - lo).cwiseMax(1e-12);
  bool fresh_H = true;
  double step_cap = 0.1 * span.maxCoeff();
  for (int it = 0; it < max_iterations; ++it) {
    out.iterations = it + 1;
    const Vector &g = cur.gradient;
    const double pg = detail::projected_gradient_norm(x, g, lo, hi);
    if (pg <= 1e-10) {
      out.converged = true;
      out.message = "projected gradient vanished";
      break;
    }
    // variables held at a bound by the gradient stay fixed
    std::vector<char> fixed(static_cast<std::size_t>(n), 0);
    const double at_tol = 1e-12 * (1.0 + span.maxCoeff());
    for (Eigen::Index i = 0; i < n; ++i)
      if ((x[i] <= lo[i] + at_tol && g[i] > 0.0) || (x[i] >= hi[i] - at_tol && g[i] < 0.0))
        fixed[static_cast<std::size_t>(i)] = 1;
    Vector d = Vector::Zero(n);
    {
      std::vector<Eigen::Index> fr;
      for (Eigen::Index i = 0; i < n; ++i)
        if (!fixed[static_cast<std::size_t>(i)])
          fr.push_back(i);
      const auto m = static_cast<Eigen::Index>(fr.size());
      Matrix Hf(m, m);
      Vector gf(m);
      for (Eigen::Index a = 0; a < m; ++a) {
        gf[a] = g[fr[static_cast<std::size_t>(a)]];
        for (Eigen::Index b = 0; b < m; ++b)
          Hf(a, b) = H(fr[static_cast<std::size_t>(a)], fr[static_cast<std::size_t>(b)]);
      }
      const Vector df = -Hf * gf;
      for (Eigen::Index a = 0; a < m; ++a)
        d[fr[static_cast<std::size_t>(a)]] = df[a];
    }
    if (g.dot(d) >= 0.0) {
      H = Matrix::Identity(n, n);
      fresh_H = true;
      d = -g;
      for (Eigen::Index i = 0; i < n; ++i)
        if (fixed[static_cast<std::size_t>(i)])
          d[i] = 0.0;
    }
    if (fresh_H) {
      const double dn = d.lpNorm<Eigen::Infinity>();
      if (dn > step_cap)
        d *= step_cap / dn;
    }
    double alpha = 1.0;
    bool accepted = false;
    Vector xt;
    UpperEvaluation trial;
    for (int ls = 0; ls < 40; ++ls) {
      xt = (x + alpha * d).cwiseMax(lo).cwiseMin(hi);
      if ((xt - x).lpNorm<Eigen::Infinity>() <= 1e-15 * (1.0 + x.lpNorm<Eigen::Infinity>()))
        break;
      try {
        trial = oracle(xt, false);
      } catch (const Error &) {
        alpha *= 0.5;
        continue;
      }
      if (trial.value <= cur.value + 1e-4 * g.dot(xt - x)) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      if (!fresh_H) {
        H = Matrix::Identity(n, n);
        fresh_H = true;
        continue;
      }
      out.converged = pg <= 1e-6 || (alpha * d.lpNorm<Eigen::Infinity>()) <= tol;
      out.message = "line search made no progress";
      break;
    }
    // certify the accepted iterate
    UpperEvaluation certified = oracle(xt, true);
    out.certificates.push_back(certified.gap);
    if (certified.value > trial.value + 1e-9 * (1.0 + std::abs(trial.value)) &&
        certified.value > cur.value) {
      // the uncertified lower level was not global at this point; restart the quasi-Newton model
      H = Matrix::Identity(n, n);
      fresh_H = true;
      if (certified.value >= cur.value)
        continue;
    }
    const Vector s = xt - x;
    const Vector y = certified.gradient - cur.gradient;
    const double copy_move =
        (certified.copy.size() == cur.copy.size()) ? (certified.copy - cur.copy).lpNorm<Eigen::Infinity>() : 1.0;
    x = xt;
    cur = certified;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (fresh_H) {
        H *= sy / y.squaredNorm();
        fresh_H = false;
      }
      const double rho = 1.0 / sy;
      const Matrix I = Matrix::Identity(n, n);
      H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    if (s.lpNorm<Eigen::Infinity>() <= tol && copy_move <= tol) {
      out.converged = true;
      out.message = "design and lower-level copies stopped moving";
      break;
    }
  }
  out.x = x;
  out.at = cur;
  out.projected_gradient = detail::projected_gradient_norm(x, cur.gradient, lo, hi);
  if (out.message.empty())
    out.message = out.converged ? "converged" : "iteration limit";
  return out;
}

namespace detail {

/// Equispaced design followed by the classical optima (own criterion first; the others cover other
/// replication patterns), duplicates removed.
inline std::vector<Vector> classical_starts(const DesignProblem &dp) {
  std::vector<Vector> starts = upper_starts(dp, 0, dp.solver.seed);
  DesignProblem cl = dp;
  cl.method = Method::classical;
  cl.solver.evaluate_exact = false;
  cl.solver.n_starts = std::min(dp.solver.n_starts, 16);
  std::vector<Criterion> order{dp.criterion};
  for (Criterion c : {Criterion::A, Criterion::D, Criterion::E})
    if (c != dp.criterion)
      order.push_back(c);
  for (Criterion c : order) {
    cl.criterion = c;
    const Vector x = design_to_vector(classical_design(cl).U_star);
    bool seen = false;
    for (const auto &y : starts)
      seen = seen || (x - y).lpNorm<Eigen::Infinity>() <= 1e-3;
    if (!seen)
      starts.push_back(x);
  }
  return starts;
}

inline UpperEvaluation evaluate_exact_a(const DesignProblem &dp, const Vector &x, bool verify) {
  const RegionSetup &setup = dp.setup;
  GeometrySettings gs = dp.geometry();
  gs.grid_verify = verify;
  const auto cr = region_at(setup, x);
  const RayFan fan = ray_fan(cr, gs.rays);
  const AnchorSet a = anchor_points(cr, gs, &fan);
  const int np = setup.model.n_p();
  UpperEvaluation ev;
  ev.value = a.phi_A;
  ev.gradient = Vector::Zero(x.size());
  ev.copy.resize(2 * np * np);
  for (int j = 0; j < np; ++j)
    for (int side = 0; side < 2; ++side) {
      const std::size_t k = static_cast<std::size_t>(2 * j + side);
      const auto par = anchor_parametric(setup, dp.N, j, side == 1);
      const auto sens = fiacco_sensitivity(par, x, a.solutions[k]);
      ev.gradient += (side == 1 ? 1.0 : -1.0) * sens.dx2_dx1.row(j).transpose();
      ev.copy.segment(static_cast<Eigen::Index>(k) * np, np) = a.pi[k];
    }
  ev.gap = a.gaps.empty() ? 0.0 : *std::max_element(a.gaps.begin(), a.gaps.end());
  return ev;
}

inline UpperEvaluation evaluate_exact_e(const DesignProblem &dp, const Vector &x, bool verify) {
  const RegionSetup &setup = dp.setup;
  GeometrySettings gs = dp.geometry();
  gs.grid_verify = verify;
  const auto cr = region_at(setup, x);
  const RayFan fan = ray_fan(cr, 4 * gs.rays);
  const AnchorSet a = anchor_points(cr, gs, &fan);
  const FarthestPair fp = farthest_pair(cr, a, gs, &fan);
  const auto par = farthest_pair_parametric(setup, dp.N);
  const auto sens = fiacco_sensitivity(par, x, fp.solution);
  const Vector dF_dx2 = par.gradient_x2(x, fp.solution.x);
  UpperEvaluation ev;
  ev.value = fp.phi_E;
  ev.gradient = total_derivative(Vector::Zero(x.size()), dF_dx2, sens.dx2_dx1);
  ev.copy = fp.solution.x;
  ev.gap = fp.gap;
  return ev;
}

/// Radial-quadrature volume with a fixed ray shape; gradient by implicit differentiation of each radius.
inline UpperEvaluation evaluate_exact_d(const DesignProblem &dp, const Vector &x, const Matrix &shape) {
  const auto cr = region_at(dp.setup, x);
  const RayFan fan = ray_fan(cr, dp.solver.rays, shape);
  const int n = cr.n_p();
  const double V = radial_volume(fan);
  const double C = std::abs(shape.determinant()) * unit_sphere_area(n) / (n * static_cast<double>(fan.radius.size()));
  Vector dV = Vector::Zero(x.size());
  for (std::size_t k = 0; k < fan.points.size(); ++k) {
    const Vector &p = fan.points[k];
    const Vector d = shape * fan.z[k];
    const double slope = cr.excess_gradient(p).dot(d);
    if (!(slope > 0.0))
      throw SolverError("radial volume: boundary is tangent to a ray");
    const Vector dr = -cr.excess_input_gradient(p) / slope;
    dV += C * n * std::pow(fan.radius[k], n - 1) * dr;
  }
  UpperEvaluation ev;
  ev.value = std::log(V);
  ev.gradient = dV / V;
  ev.copy = Eigen::Map<const Vector>(fan.radius.data(), static_cast<Eigen::Index>(fan.radius.size()));
  return ev;
}

inline double ellipsoidal_objective(double k_out, double k_in, const Matrix &M) {
  const int n = static_cast<int>(M.rows());
  return (std::pow(k_out, n - 1) + std::pow(k_in, n - 1)) / M.determinant();
}

inline UpperEvaluation evaluate_ellipsoidal(const DesignProblem &dp, const Vector &x) {
  const RegionSetup &setup = dp.setup;
  const GeometrySettings gs = dp.geometry();
  const auto cr = region_at(setup, x);
  const Matrix M = cr.quadratic_form_matrix();
  const EllipsoidScalings sc = ellipsoid_scalings(cr, M, gs);
  const int n = cr.n_p();
  const double sum_k = std::pow(sc.k_out, n - 1) + std::pow(sc.k_in, n - 1);
  UpperEvaluation ev;
  ev.value = std::log(sum_k) - std::log(M.determinant());
  ev.gradient = Vector::Zero(x.size());
  const Matrix Minv = M.inverse();
  Vector dk_out = Vector::Zero(x.size()), dk_in = Vector::Zero(x.size());
  for (int side = 0; side < 2; ++side) {
    const bool outer = side == 0;
    const auto par = scaling_parametric(setup, dp.N, outer);
    const NlpSolution &sol = outer ? sc.out_solution : sc.in_solution;
    const auto sens = fiacco_sensitivity(par, x, sol);
    const Vector dq_dp = par.gradient_x2(x, sol.x);
    Vector dq_dU(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
      Vector xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      dq_dU[i] = (par.objective(xp, sol.x) - par.objective(xm, sol.x)) / (2.0 * h);
    }
    (outer ? dk_out : dk_in) = total_derivative(dq_dU, dq_dp, sens.dx2_dx1);
  }
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = 1e-6 * std::max(1.0, std::abs(x[i]));
    Vector xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const Matrix dM = (region_at(setup, xp).quadratic_form_matrix() - region_at(setup, xm).quadratic_form_matrix()) / (2.0 * h);
    const double dsum = (n - 1) * (std::pow(sc.k_out, n - 2) * dk_out[i] + std::pow(sc.k_in, n - 2) * dk_in[i]);
    ev.gradient[i] = dsum / sum_k - (Minv * dM).trace();
  }
  ev.copy.resize(2 * n + 2);
  ev.copy << sc.p_out, sc.p_in, sc.k_out, sc.k_in;
  ev.gap = std::max(sc.gap_out, sc.gap_in);
  return ev;
}

inline Vector perturb_in_box(const Vector &x, const Vector &lo, const Vector &hi, double radius, GaussianGenerator &gen) {
  Vector d(x.size());
  for (Eigen::Index i = 0; i < d.size(); ++i)
    d[i] = gen.next();
  d *= radius / std::max(d.norm(), 1e-300);
  return (x + d).cwiseMax(lo).cwiseMin(hi);
}

} // namespace detail

/// Nested bilevel solve for exact A/D/E (method exact) and ellipsoidal D (method ellipsoidal).
inline DesignResult exact_design_nested(const DesignProblem &dp) {
  dp.validate();
  if (dp.method != Method::exact && dp.method != Method::ellipsoidal)
    throw ConfigError("exact_design_nested handles the exact and ellipsoidal methods");
  const auto t0 = std::chrono::steady_clock::now();
  const Vector lo = dp.flat_lower(), hi = dp.flat_upper();
  const int nu = dp.setup.model.n_u();

  const std::vector<Vector> starts = detail::classical_starts(dp);

  Matrix shape;
  UpperOracle oracle;
  if (dp.method == Method::ellipsoidal) {
    oracle = [&](const Vector &x, bool) { return detail::evaluate_ellipsoidal(dp, x); };
  } else if (dp.criterion == Criterion::A) {
    oracle = [&](const Vector &x, bool verify) { return detail::evaluate_exact_a(dp, x, verify); };
  } else if (dp.criterion == Criterion::E) {
    oracle = [&](const Vector &x, bool verify) { return detail::evaluate_exact_e(dp, x, verify); };
  } else {
    shape = ray_shape(detail::region_at(dp.setup, starts[std::min<std::size_t>(1, starts.size() - 1)]));
    oracle = [&](const Vector &x, bool) { return detail::evaluate_exact_d(dp, x, shape); };
  }

  NestedOutcome best;
  bool have = false;
  int total_iterations = 0;
  std::vector<double> certificates;
  auto consider = [&](const NestedOutcome &o) {
    total_iterations += o.iterations;
    certificates.insert(certificates.end(), o.certificates.begin(), o.certificates.end());
    if (!have || o.at.value < best.at.value - 1e-12 * (1.0 + std::abs(best.at.value)) ||
        (o.converged && !best.converged && o.at.value <= best.at.value + 1e-12 * (1.0 + std::abs(best.at.value)))) {
      best = o;
      have = true;
    }
  };
  std::string last_failure;
  bool box_contact = false;
  auto run = [&](const Vector &x0) {
    // a start whose lower level cannot be solved (e.g. an unbounded region) is skipped
    try {
      consider(nested_minimize(oracle, x0, lo, hi, dp.solver.max_iterations, dp.solver.nested_tolerance));
    } catch (const BoxContactError &e) {
      box_contact = true;
      last_failure = e.what();
    } catch (const Error &e) {
      last_failure = e.what();
    }
  };
  for (const auto &x0 : starts)
    run(x0);
  if (!have) {
    if (box_contact)
      throw BoxContactError("nested design: every start reaches the search box (" + last_failure + ")");
    throw SolverError("nested design: no start produced a solvable lower level (" + last_failure + ")");
  }
  GaussianGenerator gen(splitmix64(dp.solver.seed ^ 0xA5A5A5A5ull));
  for (int k = 0; k < dp.solver.upper_restarts; ++k)
    run(detail::perturb_in_box(best.x, lo, hi, 0.05 * (hi - lo).maxCoeff(), gen));

  // saddle / maximum guard
  for (int round = 0; round < 3; ++round) {
    bool improved = false;
    for (int k = 0; k < dp.solver.saddle_probes; ++k) {
      const Vector xp = detail::perturb_in_box(best.x, lo, hi, dp.solver.saddle_radius, gen);
      UpperEvaluation e;
      try {
        e = oracle(xp, true);
      } catch (const Error &) {
        continue;
      }
      if (e.value < best.at.value - 1e-6) {
        run(xp);
        improved = true;
        break;
      }
    }
    if (!improved)
      break;
  }

  DesignResult r;
  r.criterion = dp.criterion;
  r.method = dp.method;
  r.N = dp.N;
  r.U_star = sorted_design(design_from_flat(best.x, nu));
  r.iterations = total_iterations;
  r.certificates = certificates;
  r.converged = best.converged;
  r.projected_gradient = best.projected_gradient;
  r.seed = dp.solver.seed;
  r.message = best.message;
  const bool log_scale = dp.method == Method::ellipsoidal || dp.criterion == Criterion::D;
  r.objective_surrogate = log_scale ? std::exp(best.at.value) : best.at.value;
  if (dp.solver.evaluate_exact)
    r.objective_exact = exact_phi(dp.setup, r.U_star, dp.criterion, dp.epsilon, dp.geometry(), dp.solver.registration).phi;
  r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline DesignResult ellipsoidal_d_design(const DesignProblem &dp) {
  DesignProblem e = dp;
  e.method = Method::ellipsoidal;
  e.criterion = Criterion::D;
  return exact_design_nested(e);
}

// ---------------------------------------------------------------------------------------------
// KKT reformulation of exact A

/// Single level over z = (U, pi_1..pi_2np, nu_1..nu_2np): every anchor problem is written as
/// max sigma_k p_j with stationarity sigma_k e_j + nu_k grad h(pi_k) = 0, h(pi_k) <= 0, nu_k <= 0,
/// and relaxed complementarity nu_k h(pi_k) <= mu driven down to 1e-9.
inline DesignResult exact_a_design_kkt(const DesignProblem &dp) {
  dp.validate();
  if (dp.criterion != Criterion::A)
    throw ConfigError("the KKT method applies to criterion A only");
  const auto t0 = std::chrono::steady_clock::now();
  const RegionSetup &setup = dp.setup;
  const int np = setup.model.n_p(), nu_in = setup.model.n_u();
  const int nU = dp.N * nu_in;
  const int K = 2 * np;
  const int nz = nU + K * np + K;
  const double s = std::max(setup.threshold(dp.N), 1e-12);
  auto [plo, phi] = setup.search_box();
  auto sigma = [](int k) { return (k % 2 == 1) ? 1.0 : -1.0; };

  double mu = 1e-2;
  NlpProblem prob;
  prob.n = nz;
  prob.objective = [&](const Vector &z) {
    double v = 0.0;
    for (int k = 0; k < K; ++k)
      v += sigma(k) * z[nU + k * np + k / 2];
    return v;
  };
  prob.gradient = [&](const Vector &z) {
    Vector g = Vector::Zero(z.size());
    for (int k = 0; k < K; ++k)
      g[nU + k * np + k / 2] = sigma(k);
    return g;
  };
  prob.n_eq = K * np;
  prob.eq = [&](const Vector &z) {
    const auto cr = detail::region_at(setup, z.head(nU));
    Vector c(K * np);
    for (int k = 0; k < K; ++k) {
      const Vector gh = cr.excess_gradient(z.segment(nU + k * np, np)) / s;
      Vector st = z[nU + K * np + k] * gh;
      st[k / 2] += sigma(k);
      c.segment(k * np, np) = st;
    }
    return c;
  };
  prob.n_ineq = 2 * K;
  prob.ineq = [&](const Vector &z) {
    const auto cr = detail::region_at(setup, z.head(nU));
    Vector c(2 * K);
    for (int k = 0; k < K; ++k) {
      const double h = cr.excess(z.segment(nU + k * np, np)) / s;
      c[k] = h;
      c[K + k] = z[nU + K * np + k] * h - mu;
    }
    return c;
  };
  Vector lo(nz), hi(nz);
  lo.head(nU) = dp.flat_lower();
  hi.head(nU) = dp.flat_upper();
  for (int k = 0; k < K; ++k) {
    lo.segment(nU + k * np, np) = plo;
    hi.segment(nU + k * np, np) = phi;
  }
  lo.tail(K).setConstant(-1e6);
  hi.tail(K).setZero();
  prob.lower = lo;
  prob.upper = hi;
  const NlpTolerances tol{1e-9, 1e-10, 1e-15, 400, false};

  struct Candidate {
    Vector z;
    NlpSolution sol;
    AnchorSet global;
    double mismatch = 0.0;
  };
  int iterations = 0;
  std::optional<Candidate> best;
  std::string last_failure;
  for (const Vector &U0 : detail::classical_starts(dp)) {
    try {
      // anchors solved globally at the start design give pi and nu
      const AnchorSet a0 = anchor_points(detail::region_at(setup, U0), dp.geometry());
      Vector z(nz);
      z.head(nU) = U0;
      for (int k = 0; k < K; ++k) {
        z.segment(nU + k * np, np) = a0.pi[static_cast<std::size_t>(k)];
        // own-sense multipliers: max anchors are already <= 0, min anchors flip sign in the max form
        const double nu_own = a0.solutions[static_cast<std::size_t>(k)].nu_ineq[0];
        z[nU + K * np + k] = (k % 2 == 1) ? nu_own : -nu_own;
      }
      NlpSolution sol;
      for (double m : {1e-2, 1e-4, 1e-6, 1e-8, 1e-9}) {
        mu = m;
        sol = solve_local(prob, z, tol);
        iterations += sol.iterations;
        if (!std::isfinite(sol.value))
          throw SolverError("KKT reformulation: local solve failed");
        z = sol.x;
      }
      if (sol.constraint_violation > 1e-7)
        throw SolverError("KKT reformulation: final point is infeasible");
      // the KKT point only certifies local lower-level optimality; compare with globally solved anchors
      const AnchorSet global = anchor_points(detail::region_at(setup, z.head(nU)), dp.geometry());
      double worst = 0.0;
      for (int k = 0; k < K; ++k) {
        const double glob = (k % 2 == 1) ? global.upper[k / 2] : global.lower[k / 2];
        worst = std::max(worst, std::abs(z[nU + k * np + k / 2] - glob));
      }
      if (!best || sol.value < best->sol.value)
        best = Candidate{z, sol, global, worst};
    } catch (const Error &e) {
      last_failure = e.what();
    }
  }
  if (!best)
    throw SolverError("KKT reformulation: no start succeeded (" + last_failure + ")");

  const Vector Ustar = best->z.head(nU);
  DesignResult r;
  r.criterion = Criterion::A;
  r.method = Method::kkt;
  r.N = dp.N;
  r.U_star = sorted_design(design_from_flat(Ustar, nu_in));
  r.objective_surrogate = best->sol.value;
  r.iterations = iterations;
  r.certificates = {best->mismatch};
  r.converged = best->sol.converged() || (best->sol.status == NlpStatus::step_collapse && best->sol.kkt_residual <= 1e-6);
  r.seed = dp.solver.seed;
  r.message = std::string("KKT solve ") + to_string(best->sol.status);
  if (best->mismatch > 1e-6 * (1.0 + std::abs(best->global.phi_A)))
    throw VerificationError("KKT point is not the lower-level global optimum (anchor mismatch " +
                            std::to_string(best->mismatch) + ")");
  r.objective_exact = dp.solver.evaluate_exact ? best->global.phi_A : std::numeric_limits<double>::quiet_NaN();
  r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Dispatch on the method.
inline DesignResult solve_design(const DesignProblem &dp) {
  switch (dp.method) {
  case Method::classical: return classical_design(dp);
  case Method::exact: return exact_design_nested(dp);
  case Method::ellipsoidal: return ellipsoidal_d_design(dp);
  case Method::kkt: return exact_a_design_kkt(dp);
  }
  throw ConfigError("unknown method");
}

} // namespace oed
