#pragma once

// Smooth constrained local optimization (SQP), low-discrepancy multistart and
// dense-grid verification of global optimality for small problems.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "oed/errors.hpp"
#include "oed/model.hpp"
#include "oed/qp.hpp"
#include "oed/statistics.hpp"

namespace oed {

enum class Sense { minimize, maximize };

/// f(x) subject to eq(x) = 0, ineq(x) <= 0 and lower <= x <= upper.
struct NlpProblem {
  int n = 0;
  Sense sense = Sense::minimize;
  std::function<double(const Vector &)> objective;
  std::function<Vector(const Vector &)> gradient; // optional: central differences otherwise
  int n_eq = 0;
  std::function<Vector(const Vector &)> eq;
  std::function<Matrix(const Vector &)> eq_jacobian; // optional
  int n_ineq = 0;
  std::function<Vector(const Vector &)> ineq;
  std::function<Matrix(const Vector &)> ineq_jacobian; // optional
  Vector lower; // empty means unbounded
  Vector upper;

  bool has_analytic_derivatives() const {
    return static_cast<bool>(gradient) && (n_eq == 0 || static_cast<bool>(eq_jacobian)) &&
           (n_ineq == 0 || static_cast<bool>(ineq_jacobian));
  }
};

enum class NlpStatus { converged, max_iterations, step_collapse, infeasible, failed };

inline const char *to_string(NlpStatus s) {
  switch (s) {
  case NlpStatus::converged: return "converged";
  case NlpStatus::max_iterations: return "max-iterations";
  case NlpStatus::step_collapse: return "step-collapse";
  case NlpStatus::infeasible: return "infeasible";
  case NlpStatus::failed: return "failed";
  }
  return "unknown";
}

/// Multipliers follow L = f + nu_eq' h_E + nu_ineq' h_I + nu_upper'(x - u) - nu_lower'(x - l)
/// with f taken in its own sense: nu_ineq >= 0 for minimization, <= 0 for maximization.
struct NlpSolution {
  Vector x;
  double value = std::numeric_limits<double>::quiet_NaN();
  Vector nu_eq;
  Vector nu_ineq;
  Vector nu_lower;
  Vector nu_upper;
  NlpStatus status = NlpStatus::failed;
  double kkt_residual = std::numeric_limits<double>::infinity();
  double constraint_violation = std::numeric_limits<double>::infinity();
  int iterations = 0;

  bool converged() const { return status == NlpStatus::converged; }
};

struct NlpTolerances {
  double stationarity = 1e-8;
  double feasibility = 1e-8;
  double step = 1e-12;
  int max_iterations = 200;
  bool polish = true; // Newton refinement on the active set when analytic derivatives exist
};

namespace detail {

inline double fd_step(double xi) { return 1e-6 * std::max(1.0, std::abs(xi)); }

inline Vector fd_gradient(const std::function<double(const Vector &)> &f, const Vector &x) {
  Vector g(x.size());
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = fd_step(x[i]);
    xp[i] = x[i] + h;
    const double fp = f(xp);
    xp[i] = x[i] - h;
    const double fm = f(xp);
    xp[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline Matrix fd_jacobian(const std::function<Vector(const Vector &)> &c, const Vector &x, Eigen::Index m) {
  Matrix J(m, x.size());
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = fd_step(x[i]);
    xp[i] = x[i] + h;
    const Vector cp = c(xp);
    xp[i] = x[i] - h;
    const Vector cm = c(xp);
    xp[i] = x[i];
    J.col(i) = (cp - cm) / (2.0 * h);
  }
  return J;
}

/// Problem functions evaluated at one point, with the objective sign-flipped to minimization.
struct Evaluation {
  Vector x;
  double f = 0.0; // internal (minimization) objective
  Vector g;
  Vector ce, ci;
  Matrix Je, Ji;
};

class ProblemEvaluator {
public:
  explicit ProblemEvaluator(const NlpProblem &p) : p_(p), sign_(p.sense == Sense::maximize ? -1.0 : 1.0) {
    const auto n = p.n;
    lower_ = p.lower.size() == n ? p.lower : Vector::Constant(n, -std::numeric_limits<double>::infinity());
    upper_ = p.upper.size() == n ? p.upper : Vector::Constant(n, std::numeric_limits<double>::infinity());
  }

  double sign() const { return sign_; }
  const Vector &lower() const { return lower_; }
  const Vector &upper() const { return upper_; }

  double value(const Vector &x) const { return sign_ * p_.objective(x); }

  Vector constraints_eq(const Vector &x) const { return p_.n_eq > 0 ? p_.eq(x) : Vector(); }
  Vector constraints_in(const Vector &x) const { return p_.n_ineq > 0 ? p_.ineq(x) : Vector(); }

  Vector gradient(const Vector &x) const {
    if (p_.gradient)
      return sign_ * p_.gradient(x);
    return sign_ * fd_gradient(p_.objective, x);
  }

  Matrix jac_eq(const Vector &x) const {
    if (p_.n_eq == 0)
      return Matrix(0, p_.n);
    if (p_.eq_jacobian)
      return p_.eq_jacobian(x);
    return fd_jacobian(p_.eq, x, p_.n_eq);
  }

  Matrix jac_in(const Vector &x) const {
    if (p_.n_ineq == 0)
      return Matrix(0, p_.n);
    if (p_.ineq_jacobian)
      return p_.ineq_jacobian(x);
    return fd_jacobian(p_.ineq, x, p_.n_ineq);
  }

  Evaluation evaluate(const Vector &x, bool derivatives) const {
    Evaluation e;
    e.x = x;
    e.f = value(x);
    e.ce = constraints_eq(x);
    e.ci = constraints_in(x);
    if (derivatives) {
      e.g = gradient(x);
      e.Je = jac_eq(x);
      e.Ji = jac_in(x);
    }
    return e;
  }

  double violation(const Evaluation &e) const {
    double v = 0.0;
    for (Eigen::Index i = 0; i < e.ce.size(); ++i)
      v += std::abs(e.ce[i]);
    for (Eigen::Index i = 0; i < e.ci.size(); ++i)
      v += std::max(0.0, e.ci[i]);
    return v;
  }

  double max_violation(const Evaluation &e) const {
    double v = 0.0;
    for (Eigen::Index i = 0; i < e.ce.size(); ++i)
      v = std::max(v, std::abs(e.ce[i]));
    for (Eigen::Index i = 0; i < e.ci.size(); ++i)
      v = std::max(v, e.ci[i]);
    return v;
  }

  const NlpProblem &problem() const { return p_; }

private:
  const NlpProblem &p_;
  double sign_;
  Vector lower_, upper_;
};

inline Vector clamp_to_box(const Vector &x, const Vector &lo, const Vector &hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

/// Internal multipliers (all >= 0 for inequalities/bounds, minimization form).
struct Multipliers {
  Vector eq, in, lower, upper;
};

inline Vector lagrangian_gradient(const Evaluation &e, const Multipliers &m) {
  Vector r = e.g;
  if (e.Je.rows() > 0)
    r += e.Je.transpose() * m.eq;
  if (e.Ji.rows() > 0)
    r += e.Ji.transpose() * m.in;
  r += m.upper - m.lower;
  return r;
}

inline double kkt_residual(const Evaluation &e, const Multipliers &m, const Vector &lo, const Vector &hi) {
  double r = lagrangian_gradient(e, m).lpNorm<Eigen::Infinity>();
  for (Eigen::Index i = 0; i < e.ci.size(); ++i)
    r = std::max(r, std::abs(m.in[i] * e.ci[i]));
  for (Eigen::Index i = 0; i < e.x.size(); ++i) {
    if (std::isfinite(lo[i]))
      r = std::max(r, std::abs(m.lower[i] * (e.x[i] - lo[i])));
    if (std::isfinite(hi[i]))
      r = std::max(r, std::abs(m.upper[i] * (hi[i] - e.x[i])));
  }
  return r;
}

/// Builds and solves the SQP subproblem. shift_e / shift_i replace the constant terms (second-order correction).
inline std::optional<QpResult> sqp_subproblem(const Evaluation &e, const Matrix &B, const Vector &lo,
                                              const Vector &hi, const Vector &ce, const Vector &ci,
                                              Multipliers &mult) {
  const auto n = e.x.size();
  std::vector<Eigen::Index> lb_idx, ub_idx;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isfinite(lo[i]))
      lb_idx.push_back(i);
    if (std::isfinite(hi[i]))
      ub_idx.push_back(i);
  }
  const auto m_in = e.Ji.rows();
  const auto m_box = static_cast<Eigen::Index>(lb_idx.size() + ub_idx.size());
  QpProblem qp;
  qp.G = B;
  qp.g = e.g;
  qp.A_eq = e.Je;
  qp.b_eq = -ce;
  qp.A_in = Matrix::Zero(m_in + m_box, n);
  qp.b_in = Vector::Zero(m_in + m_box);
  if (m_in > 0) {
    qp.A_in.topRows(m_in) = e.Ji;
    qp.b_in.head(m_in) = -ci;
  }
  Eigen::Index row = m_in;
  for (auto i : lb_idx) { // -d_i <= x_i - lo_i
    qp.A_in(row, i) = -1.0;
    qp.b_in[row++] = e.x[i] - lo[i];
  }
  for (auto i : ub_idx) { // d_i <= hi_i - x_i
    qp.A_in(row, i) = 1.0;
    qp.b_in[row++] = hi[i] - e.x[i];
  }
  QpResult r = solve_qp(qp);
  if (!r.ok)
    return std::nullopt;
  mult.eq = r.lambda_eq;
  mult.in = r.lambda_in.head(m_in);
  mult.lower = Vector::Zero(n);
  mult.upper = Vector::Zero(n);
  row = m_in;
  for (auto i : lb_idx)
    mult.lower[i] = r.lambda_in[row++];
  for (auto i : ub_idx)
    mult.upper[i] = r.lambda_in[row++];
  return r;
}

/// Elastic fallback when the linearized constraints are inconsistent: minimizes the l1 violation of the linearization.
inline Vector feasibility_direction(const Evaluation &e, const Vector &lo, const Vector &hi) {
  const auto n = e.x.size();
  const auto me = e.Je.rows(), mi = e.Ji.rows();
  const auto ns = 2 * me + mi;
  QpProblem qp;
  qp.G = Matrix::Identity(n + ns, n + ns);
  qp.G.bottomRightCorner(ns, ns) *= 1e-8;
  qp.g = Vector::Zero(n + ns);
  qp.g.tail(ns).setConstant(1e3);
  qp.A_eq = Matrix::Zero(me, n + ns);
  qp.b_eq = -e.ce;
  for (Eigen::Index k = 0; k < me; ++k) { // Je d + ce = s+ - s-
    qp.A_eq.row(k).head(n) = e.Je.row(k);
    qp.A_eq(k, n + 2 * k) = -1.0;
    qp.A_eq(k, n + 2 * k + 1) = 1.0;
  }
  std::vector<Eigen::Index> lb_idx, ub_idx;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isfinite(lo[i]))
      lb_idx.push_back(i);
    if (std::isfinite(hi[i]))
      ub_idx.push_back(i);
  }
  const auto rows = mi + ns + static_cast<Eigen::Index>(lb_idx.size() + ub_idx.size());
  qp.A_in = Matrix::Zero(rows, n + ns);
  qp.b_in = Vector::Zero(rows);
  Eigen::Index row = 0;
  for (Eigen::Index k = 0; k < mi; ++k) { // Ji d + ci <= t
    qp.A_in.row(row).head(n) = e.Ji.row(k);
    qp.A_in(row, n + 2 * me + k) = -1.0;
    qp.b_in[row++] = -e.ci[k];
  }
  for (Eigen::Index k = 0; k < ns; ++k) { // slacks >= 0
    qp.A_in(row, n + k) = -1.0;
    qp.b_in[row++] = 0.0;
  }
  for (auto i : lb_idx) {
    qp.A_in(row, i) = -1.0;
    qp.b_in[row++] = e.x[i] - lo[i];
  }
  for (auto i : ub_idx) {
    qp.A_in(row, i) = 1.0;
    qp.b_in[row++] = hi[i] - e.x[i];
  }
  QpResult r = solve_qp(qp);
  if (!r.ok)
    return Vector::Zero(n);
  return r.x.head(n);
}

/// Least-squares multipliers on a given active set, sign-projected.
inline Multipliers refit_multipliers(const Evaluation &e, const Multipliers &guess, const Vector &lo,
                                     const Vector &hi, double active_tol) {
  const auto n = e.x.size();
  std::vector<Vector> cols;
  struct Slot { int kind; Eigen::Index idx; };
  std::vector<Slot> slots;
  for (Eigen::Index k = 0; k < e.Je.rows(); ++k) {
    cols.push_back(e.Je.row(k).transpose());
    slots.push_back({0, k});
  }
  for (Eigen::Index k = 0; k < e.Ji.rows(); ++k)
    if (e.ci[k] >= -active_tol && guess.in[k] > 0.0) {
      cols.push_back(e.Ji.row(k).transpose());
      slots.push_back({1, k});
    }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (std::isfinite(lo[i]) && e.x[i] - lo[i] <= active_tol && guess.lower[i] > 0.0) {
      cols.push_back(-Vector::Unit(n, i));
      slots.push_back({2, i});
    }
    if (std::isfinite(hi[i]) && hi[i] - e.x[i] <= active_tol && guess.upper[i] > 0.0) {
      cols.push_back(Vector::Unit(n, i));
      slots.push_back({3, i});
    }
  }
  Multipliers m{Vector::Zero(e.Je.rows()), Vector::Zero(e.Ji.rows()), Vector::Zero(n), Vector::Zero(n)};
  if (cols.empty())
    return m;
  Matrix A(n, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c)
    A.col(static_cast<Eigen::Index>(c)) = cols[c];
  const Vector lam = A.completeOrthogonalDecomposition().solve(-e.g);
  for (std::size_t c = 0; c < slots.size(); ++c) {
    const double v = lam[static_cast<Eigen::Index>(c)];
    switch (slots[c].kind) {
    case 0: m.eq[slots[c].idx] = v; break;
    case 1: m.in[slots[c].idx] = std::max(0.0, v); break;
    case 2: m.lower[slots[c].idx] = std::max(0.0, v); break;
    case 3: m.upper[slots[c].idx] = std::max(0.0, v); break;
    }
  }
  return m;
}

} // namespace detail

/// SQP with Powell-damped BFGS Hessian, l1 merit line search and second-order correction.
inline NlpSolution solve_local(const NlpProblem &problem, const Vector &x0, const NlpTolerances &tol = {}) {
  using namespace detail;
  if (x0.size() != problem.n)
    throw DimensionError("solve_local: start point has wrong size");
  ProblemEvaluator ev(problem);
  const Vector &lo = ev.lower();
  const Vector &hi = ev.upper();
  const auto n = problem.n;

  NlpSolution sol;
  Vector x = clamp_to_box(x0, lo, hi);
  Evaluation cur;
  try {
    cur = ev.evaluate(x, true);
  } catch (const Error &) {
    sol.x = x;
    sol.status = NlpStatus::failed;
    return sol;
  }
  if (!std::isfinite(cur.f) || !cur.g.allFinite()) {
    sol.x = x;
    sol.status = NlpStatus::failed;
    return sol;
  }

  Matrix B = Matrix::Identity(n, n);
  Multipliers mult{Vector::Zero(problem.n_eq), Vector::Zero(problem.n_ineq), Vector::Zero(n), Vector::Zero(n)};
  double rho = 1.0;
  NlpStatus status = NlpStatus::max_iterations;
  int it = 0;
  bool have_multipliers = false;

  auto merit = [&](const Evaluation &e) { return e.f + rho * ev.violation(e); };
  auto safe_eval = [&](const Vector &z, bool deriv) -> std::optional<Evaluation> {
    try {
      Evaluation e = ev.evaluate(z, deriv);
      if (!std::isfinite(e.f) || !e.ce.allFinite() || !e.ci.allFinite())
        return std::nullopt;
      if (deriv && (!e.g.allFinite() || !e.Je.allFinite() || !e.Ji.allFinite()))
        return std::nullopt;
      return e;
    } catch (const Error &) {
      return std::nullopt;
    }
  };

  for (; it < tol.max_iterations; ++it) {
    if (have_multipliers && kkt_residual(cur, mult, lo, hi) <= tol.stationarity &&
        ev.max_violation(cur) <= tol.feasibility) {
      status = NlpStatus::converged;
      break;
    }
    Multipliers trial_mult = mult;
    auto qp = sqp_subproblem(cur, B, lo, hi, cur.ce, cur.ci, trial_mult);
    Vector d;
    bool restoration = false;
    if (qp) {
      d = qp->x;
    } else {
      d = feasibility_direction(cur, lo, hi);
      restoration = true;
      if (d.lpNorm<Eigen::Infinity>() <= tol.step) {
        status = NlpStatus::infeasible;
        break;
      }
    }
    if (!restoration) {
      mult = trial_mult;
      have_multipliers = true;
      // check optimality of the current point with the fresh multipliers
      if (kkt_residual(cur, mult, lo, hi) <= tol.stationarity && ev.max_violation(cur) <= tol.feasibility) {
        status = NlpStatus::converged;
        break;
      }
      double lam_max = 0.0;
      if (mult.eq.size())
        lam_max = std::max(lam_max, mult.eq.lpNorm<Eigen::Infinity>());
      if (mult.in.size())
        lam_max = std::max(lam_max, mult.in.lpNorm<Eigen::Infinity>());
      if (rho < 1.1 * lam_max + 1e-8)
        rho = 2.0 * lam_max + 1e-8;
    }
    if (d.lpNorm<Eigen::Infinity>() <= tol.step * (1.0 + x.lpNorm<Eigen::Infinity>())) {
      if (ev.max_violation(cur) <= tol.feasibility) {
        // Tiny step at a feasible point: accept as converged when the multipliers are near KKT.
        status = kkt_residual(cur, mult, lo, hi) <= std::max(tol.stationarity, 1e3 * tol.stationarity)
                     ? NlpStatus::converged
                     : NlpStatus::step_collapse;
      } else {
        status = NlpStatus::step_collapse;
      }
      break;
    }

    const double phi0 = merit(cur);
    const double viol0 = ev.violation(cur);
    double dirderiv = cur.g.dot(d) - rho * viol0;
    if (restoration)
      dirderiv = -viol0;
    if (dirderiv > 0.0)
      dirderiv = -1e-12;
    double alpha = 1.0;
    std::optional<Evaluation> next;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      const Vector xt = clamp_to_box(x + alpha * d, lo, hi);
      auto et = safe_eval(xt, false);
      if (et) {
        const double phit = restoration ? ev.violation(*et) + 1e-12 * et->f : merit(*et);
        const double ref = restoration ? viol0 + 1e-12 * cur.f : phi0;
        if (phit <= ref + 1e-4 * alpha * dirderiv) {
          next = et;
          accepted = true;
          break;
        }
        if (alpha == 1.0 && !restoration && (problem.n_eq + problem.n_ineq) > 0) {
          // second-order correction
          Multipliers soc_mult = mult;
          Vector ce_soc = et->ce - cur.Je * d;
          Vector ci_soc = et->ci - cur.Ji * d;
          auto soc = sqp_subproblem(cur, B, lo, hi, ce_soc, ci_soc, soc_mult);
          if (soc) {
            const Vector xs = clamp_to_box(x + soc->x, lo, hi);
            auto es = safe_eval(xs, false);
            if (es && merit(*es) <= phi0 + 1e-4 * dirderiv) {
              next = es;
              accepted = true;
              break;
            }
          }
        }
      }
      alpha *= 0.5;
      if (alpha * d.lpNorm<Eigen::Infinity>() < 1e-16 * (1.0 + x.lpNorm<Eigen::Infinity>()))
        break;
    }
    if (!accepted) {
      status = NlpStatus::step_collapse;
      break;
    }
    auto full = safe_eval(next->x, true);
    if (!full) {
      status = NlpStatus::failed;
      break;
    }
    // damped BFGS on the Lagrangian
    const Vector s = full->x - cur.x;
    Vector y = lagrangian_gradient(*full, mult) - lagrangian_gradient(cur, mult);
    // bound terms cancel in the difference
    const Vector Bs = B * s;
    const double sBs = s.dot(Bs);
    if (sBs > 1e-300) {
      const double sy = s.dot(y);
      double theta = 1.0;
      if (sy < 0.2 * sBs)
        theta = 0.8 * sBs / (sBs - sy);
      const Vector r = theta * y + (1.0 - theta) * Bs;
      const double sr = s.dot(r);
      if (sr > 1e-300) {
        B += r * r.transpose() / sr - Bs * Bs.transpose() / sBs;
        B = 0.5 * (B + B.transpose());
      }
    }
    x = full->x;
    cur = std::move(*full);
  }

  // Final multipliers and optional Newton polish on the active set.
  if (!have_multipliers)
    mult = refit_multipliers(cur, Multipliers{Vector::Zero(problem.n_eq), Vector::Constant(problem.n_ineq, 1.0),
                                              Vector::Constant(n, 1.0), Vector::Constant(n, 1.0)},
                             lo, hi, 1e-7);
  if (tol.polish && problem.has_analytic_derivatives() && ev.max_violation(cur) <= 1e-5) {
    for (int k = 0; k < 8; ++k) {
      const Multipliers fitted = refit_multipliers(cur, mult, lo, hi, 1e-6);
      // active set from fitted multipliers
      std::vector<Vector> rows;
      std::vector<double> rhs;
      for (Eigen::Index i = 0; i < cur.Je.rows(); ++i) {
        rows.push_back(cur.Je.row(i).transpose());
        rhs.push_back(-cur.ce[i]);
      }
      for (Eigen::Index i = 0; i < cur.Ji.rows(); ++i)
        if (fitted.in[i] > 1e-12) {
          rows.push_back(cur.Ji.row(i).transpose());
          rhs.push_back(-cur.ci[i]);
        }
      for (Eigen::Index i = 0; i < n; ++i) {
        if (fitted.lower[i] > 1e-12) {
          rows.push_back(-Vector::Unit(n, i));
          rhs.push_back(cur.x[i] - lo[i]);
        }
        if (fitted.upper[i] > 1e-12) {
          rows.push_back(Vector::Unit(n, i));
          rhs.push_back(hi[i] - cur.x[i]);
        }
      }
      const auto m = static_cast<Eigen::Index>(rows.size());
      // Hessian of the Lagrangian by central differences of its gradient
      auto lag_grad_at = [&](const Vector &z) -> std::optional<Vector> {
        auto e = safe_eval(z, true);
        if (!e)
          return std::nullopt;
        Vector r = e->g;
        if (e->Je.rows() > 0)
          r += e->Je.transpose() * fitted.eq;
        if (e->Ji.rows() > 0)
          r += e->Ji.transpose() * fitted.in;
        return r;
      };
      Matrix H(n, n);
      bool ok = true;
      for (Eigen::Index j = 0; j < n && ok; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(cur.x[j]));
        Vector zp = cur.x, zm = cur.x;
        zp[j] += h;
        zm[j] -= h;
        auto gp = lag_grad_at(zp), gm = lag_grad_at(zm);
        if (!gp || !gm)
          ok = false;
        else
          H.col(j) = (*gp - *gm) / (2.0 * h);
      }
      if (!ok)
        break;
      H = 0.5 * (H + H.transpose());
      Matrix K = Matrix::Zero(n + m, n + m);
      K.topLeftCorner(n, n) = H;
      Vector rhs_v(n + m);
      rhs_v.head(n) = -cur.g;
      for (Eigen::Index r = 0; r < m; ++r) {
        K.block(n + r, 0, 1, n) = rows[static_cast<std::size_t>(r)].transpose();
        K.block(0, n + r, n, 1) = rows[static_cast<std::size_t>(r)];
        rhs_v[n + r] = rhs[static_cast<std::size_t>(r)];
      }
      Eigen::FullPivLU<Matrix> lu(K);
      if (lu.rank() < n + m)
        break;
      const Vector sol_k = lu.solve(rhs_v);
      const Vector dx = sol_k.head(n);
      auto cand = safe_eval(clamp_to_box(cur.x + dx, lo, hi), true);
      if (!cand)
        break;
      const Multipliers cand_mult = refit_multipliers(*cand, fitted, lo, hi, 1e-6);
      const double r_old = std::max(kkt_residual(cur, fitted, lo, hi), ev.max_violation(cur));
      const double r_new = std::max(kkt_residual(*cand, cand_mult, lo, hi), ev.max_violation(*cand));
      if (!(r_new < r_old))
        break;
      cur = std::move(*cand);
      mult = cand_mult;
      if (r_new <= 1e-14)
        break;
    }
    if (kkt_residual(cur, mult, lo, hi) <= tol.stationarity && ev.max_violation(cur) <= tol.feasibility)
      status = NlpStatus::converged;
  }

  sol.x = cur.x;
  sol.value = problem.objective(cur.x);
  const double s = ev.sign();
  sol.nu_eq = s * mult.eq;
  sol.nu_ineq = s * mult.in;
  sol.nu_lower = s * mult.lower;
  sol.nu_upper = s * mult.upper;
  sol.kkt_residual = kkt_residual(cur, mult, lo, hi);
  sol.constraint_violation = ev.max_violation(cur);
  sol.iterations = it;
  sol.status = status;
  if (status == NlpStatus::converged &&
      (sol.kkt_residual > 1e3 * tol.stationarity || sol.constraint_violation > tol.feasibility))
    sol.status = NlpStatus::step_collapse;
  return sol;
}

/// Halton sequence in [0,1)^dim with a seeded Cranley-Patterson rotation. Point i is independent of how many are drawn.
class HaltonSequence {
public:
  HaltonSequence(int dim, std::uint64_t seed) : dim_(dim), shift_(dim) {
    static constexpr int primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53,
                                     59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131};
    if (dim < 1 || dim > 32)
      throw DimensionError("Halton sequence supports 1..32 dimensions");
    bases_.assign(primes, primes + dim);
    std::uint64_t state = splitmix64(seed);
    for (int d = 0; d < dim; ++d) {
      state = splitmix64(state);
      shift_[d] = seed == 0 ? 0.0 : static_cast<double>(state >> 11) * 0x1.0p-53;
    }
  }

  Vector point(std::uint64_t index) const {
    Vector x(dim_);
    for (int d = 0; d < dim_; ++d) {
      double f = 1.0, r = 0.0;
      std::uint64_t i = index + 1;
      const int b = bases_[static_cast<std::size_t>(d)];
      while (i > 0) {
        f /= b;
        r += f * static_cast<double>(i % static_cast<std::uint64_t>(b));
        i /= static_cast<std::uint64_t>(b);
      }
      r += shift_[d];
      x[d] = r - std::floor(r);
    }
    return x;
  }

private:
  int dim_;
  std::vector<int> bases_;
  std::vector<double> shift_;
};

struct MultistartResult {
  NlpSolution best;
  std::vector<NlpSolution> pool;
  std::vector<Vector> starts;
  int best_index = -1;
};

namespace detail {

inline bool better(const NlpSolution &a, const NlpSolution &b, Sense sense) {
  return sense == Sense::minimize ? a.value < b.value : a.value > b.value;
}

} // namespace detail

/// Local solves from n_starts low-discrepancy points in box (plus optional extra starts, tried first).
inline MultistartResult solve_multistart(const NlpProblem &problem, const Vector &box_lower,
                                         const Vector &box_upper, int n_starts, std::uint64_t seed,
                                         const NlpTolerances &tol = {},
                                         const std::vector<Vector> &extra_starts = {}) {
  if (n_starts < 1 && extra_starts.empty())
    throw DomainError("solve_multistart: need at least one start");
  if (box_lower.size() != problem.n || box_upper.size() != problem.n)
    throw DimensionError("solve_multistart: box has wrong size");
  MultistartResult out;
  out.starts = extra_starts;
  HaltonSequence seq(problem.n, seed);
  for (int k = 0; k < n_starts; ++k) {
    const Vector t = seq.point(static_cast<std::uint64_t>(k));
    out.starts.push_back(box_lower + t.cwiseProduct(box_upper - box_lower));
  }
  for (std::size_t k = 0; k < out.starts.size(); ++k) {
    NlpSolution s = solve_local(problem, out.starts[k], tol);
    out.pool.push_back(s);
    if (s.converged() && (out.best_index < 0 || detail::better(s, out.best, problem.sense))) {
      out.best = s;
      out.best_index = static_cast<int>(k);
    }
  }
  if (out.best_index < 0)
    throw SolverError("solve_multistart: no start converged");
  return out;
}

/// Largest distance between converged pool members whose values agree with the best to rel_tol.
/// A large spread flags that the best value is attained on different points (symmetry) or that
/// some starts stalled at saddles or maxima.
inline int count_distinct_optima(const MultistartResult &ms, double value_tol, double x_tol) {
  std::vector<Vector> reps;
  for (const auto &s : ms.pool) {
    if (!s.converged())
      continue;
    bool seen = false;
    for (const auto &r : reps)
      if ((r - s.x).lpNorm<Eigen::Infinity>() <= x_tol)
        seen = true;
    if (!seen && std::abs(s.value - ms.best.value) > value_tol)
      reps.push_back(s.x);
  }
  return static_cast<int>(reps.size());
}

struct GridCertificate {
  double gap = 0.0;       // sense-adjusted: positive means the grid found a better point than the solver
  Vector witness;         // best feasible grid node
  double witness_value = 0.0;
  long long feasible_nodes = 0;
  double spacing = 0.0;   // largest node spacing
};

/// Evaluates the objective on a tensor grid of resolution^n nodes over the box (n <= 4, inequality constraints only).
inline GridCertificate verify_global_on_grid(const NlpProblem &problem, const Vector &box_lower,
                                             const Vector &box_upper, int resolution, double solver_value,
                                             double feasibility_tol = 0.0) {
  if (problem.n < 1 || problem.n > 4)
    throw DomainError("grid verification supports 1 to 4 variables");
  if (problem.n_eq > 0)
    throw DomainError("grid verification supports inequality constraints only");
  if (resolution < 2)
    throw DomainError("grid resolution must be at least 2");
  const int n = problem.n;
  long long total = 1;
  for (int d = 0; d < n; ++d)
    total *= resolution;
  GridCertificate cert;
  cert.spacing = ((box_upper - box_lower) / (resolution - 1)).maxCoeff();
  const double sgn = problem.sense == Sense::maximize ? 1.0 : -1.0;
  double best = -std::numeric_limits<double>::infinity();
  Vector x(n);
  std::vector<int> idx(static_cast<std::size_t>(n), 0);
  for (long long k = 0; k < total; ++k) {
    long long rem = k;
    for (int d = 0; d < n; ++d) {
      idx[static_cast<std::size_t>(d)] = static_cast<int>(rem % resolution);
      rem /= resolution;
      x[d] = box_lower[d] + (box_upper[d] - box_lower[d]) * idx[static_cast<std::size_t>(d)] / (resolution - 1);
    }
    if (problem.n_ineq > 0) {
      Vector c;
      try {
        c = problem.ineq(x);
      } catch (const Error &) {
        continue;
      }
      if (!c.allFinite() || c.maxCoeff() > feasibility_tol)
        continue;
    }
    double v;
    try {
      v = problem.objective(x);
    } catch (const Error &) {
      continue;
    }
    if (!std::isfinite(v))
      continue;
    ++cert.feasible_nodes;
    if (sgn * v > best) {
      best = sgn * v;
      cert.witness = x;
      cert.witness_value = v;
    }
  }
  if (cert.feasible_nodes == 0)
    throw VerificationError("grid verification: no feasible grid node");
  cert.gap = sgn * (cert.witness_value - solver_value);
  return cert;
}

} // namespace oed
