#pragma once

// Parametric lower-level problems min/max_x2 f(x1, x2) s.t. h(x1, x2) and the derivative of
// their solution with respect to x1 from the KKT system.

#include <Eigen/Dense>

#include <functional>
#include <vector>

#include "oed/errors.hpp"
#include "oed/nlp.hpp"

namespace oed {

struct ParametricNlp {
  int n_x1 = 0;
  int n_x2 = 0;
  Sense sense = Sense::minimize;
  std::function<double(const Vector &x1, const Vector &x2)> objective;
  std::function<Vector(const Vector &x1, const Vector &x2)> gradient_x2; // optional
  int n_eq = 0;
  std::function<Vector(const Vector &x1, const Vector &x2)> eq;
  std::function<Matrix(const Vector &x1, const Vector &x2)> eq_jacobian_x2; // optional
  int n_ineq = 0;
  std::function<Vector(const Vector &x1, const Vector &x2)> ineq;
  std::function<Matrix(const Vector &x1, const Vector &x2)> ineq_jacobian_x2; // optional
  Vector lower; // bounds on x2
  Vector upper;

  /// The lower-level problem at fixed x1.
  NlpProblem at(const Vector &x1) const {
    NlpProblem p;
    p.n = n_x2;
    p.sense = sense;
    auto f = objective;
    p.objective = [f, x1](const Vector &x2) { return f(x1, x2); };
    if (gradient_x2) {
      auto g = gradient_x2;
      p.gradient = [g, x1](const Vector &x2) { return g(x1, x2); };
    }
    p.n_eq = n_eq;
    if (n_eq > 0) {
      auto h = eq;
      p.eq = [h, x1](const Vector &x2) { return h(x1, x2); };
      if (eq_jacobian_x2) {
        auto J = eq_jacobian_x2;
        p.eq_jacobian = [J, x1](const Vector &x2) { return J(x1, x2); };
      }
    }
    p.n_ineq = n_ineq;
    if (n_ineq > 0) {
      auto h = ineq;
      p.ineq = [h, x1](const Vector &x2) { return h(x1, x2); };
      if (ineq_jacobian_x2) {
        auto J = ineq_jacobian_x2;
        p.ineq_jacobian = [J, x1](const Vector &x2) { return J(x1, x2); };
      }
    }
    p.lower = lower;
    p.upper = upper;
    return p;
  }
};

struct Sensitivity {
  Matrix dx2_dx1;              // n_x2 x n_x1
  Matrix dnu_dx1;              // active multipliers x n_x1 (empty on fallback)
  std::vector<int> active_ineq;
  std::vector<int> active_bounds; // +(i+1) upper, -(i+1) lower
  bool fallback = false;       // finite differences of re-solved problems were used
};

struct SensitivitySettings {
  double active_tol = 1e-7;    // |h_i| below this counts as active
  double weak_multiplier = 1e-9; // active constraints with smaller |nu| are left out
  double hessian_step = 1e-5;
  double fallback_step = 1e-5;
  double singular_rcond = 1e-12;
  NlpTolerances resolve{1e-10, 1e-11, 1e-15, 200, true};
};

namespace detail {

inline Vector grad_x2(const ParametricNlp &p, const Vector &x1, const Vector &x2) {
  if (p.gradient_x2)
    return p.gradient_x2(x1, x2);
  return fd_gradient([&](const Vector &z) { return p.objective(x1, z); }, x2);
}

inline Matrix jac_x2(const std::function<Vector(const Vector &, const Vector &)> &h,
                     const std::function<Matrix(const Vector &, const Vector &)> &J, int m, const Vector &x1,
                     const Vector &x2) {
  if (m == 0)
    return Matrix(0, x2.size());
  if (J)
    return J(x1, x2);
  return fd_jacobian([&](const Vector &z) { return h(x1, z); }, x2, m);
}

} // namespace detail

/// Gradient of the lower-level Lagrangian f + nu_E' h_E + nu_I' h_I + bound terms with respect to x2.
inline Vector lagrangian_gradient_x2(const ParametricNlp &p, const Vector &x1, const Vector &x2, const Vector &nu_eq,
                                     const Vector &nu_ineq) {
  Vector g = detail::grad_x2(p, x1, x2);
  if (p.n_eq > 0)
    g += detail::jac_x2(p.eq, p.eq_jacobian_x2, p.n_eq, x1, x2).transpose() * nu_eq;
  if (p.n_ineq > 0)
    g += detail::jac_x2(p.ineq, p.ineq_jacobian_x2, p.n_ineq, x1, x2).transpose() * nu_ineq;
  return g;
}

/// Forward differences of re-solved lower levels, warm-started at the current solution.
inline Matrix resolved_sensitivity(const ParametricNlp &p, const Vector &x1, const NlpSolution &sol, double step,
                                   const NlpTolerances &tol, bool central = false) {
  Matrix D(p.n_x2, p.n_x1);
  for (int i = 0; i < p.n_x1; ++i) {
    const double h = step * std::max(1.0, std::abs(x1[i]));
    Vector xp = x1;
    xp[i] += h;
    const NlpSolution sp = solve_local(p.at(xp), sol.x, tol);
    if (!sp.converged())
      throw SolverError("re-solved lower level did not converge during sensitivity fallback");
    if (!central) {
      D.col(i) = (sp.x - sol.x) / h;
      continue;
    }
    Vector xm = x1;
    xm[i] -= h;
    const NlpSolution sm = solve_local(p.at(xm), sol.x, tol);
    if (!sm.converged())
      throw SolverError("re-solved lower level did not converge during sensitivity check");
    D.col(i) = (sp.x - sm.x) / (2.0 * h);
  }
  return D;
}

/// d x2* / d x1 from
///   [ H   A' ] [dx2]     [ d2L/dx2dx1 ]
///   [ A   0  ] [dnu] = - [ dh_A/dx1   ]
/// with H the Lagrangian Hessian in x2 and A the Jacobian of the strongly active constraints.
inline Sensitivity fiacco_sensitivity(const ParametricNlp &p, const Vector &x1, const NlpSolution &sol,
                                      const SensitivitySettings &st = {}) {
  if (x1.size() != p.n_x1 || sol.x.size() != p.n_x2)
    throw DimensionError("fiacco_sensitivity: argument sizes disagree with the problem");
  if (!sol.converged())
    throw SolverError("fiacco_sensitivity needs a converged lower-level solution");
  const Vector &x2 = sol.x;
  const int n2 = p.n_x2, n1 = p.n_x1;
  Sensitivity out;

  // active set
  std::vector<Vector> A_rows;
  std::vector<std::function<double(const Vector &, const Vector &)>> h_active;
  for (int i = 0; i < p.n_eq; ++i) {
    h_active.push_back([&p, i](const Vector &a, const Vector &b) { return p.eq(a, b)[i]; });
  }
  Matrix Je = detail::jac_x2(p.eq, p.eq_jacobian_x2, p.n_eq, x1, x2);
  for (int i = 0; i < p.n_eq; ++i)
    A_rows.push_back(Je.row(i).transpose());
  if (p.n_ineq > 0) {
    const Vector hi = p.ineq(x1, x2);
    const Matrix Ji = detail::jac_x2(p.ineq, p.ineq_jacobian_x2, p.n_ineq, x1, x2);
    for (int i = 0; i < p.n_ineq; ++i)
      if (std::abs(hi[i]) <= st.active_tol && std::abs(sol.nu_ineq[i]) >= st.weak_multiplier) {
        out.active_ineq.push_back(i);
        A_rows.push_back(Ji.row(i).transpose());
        h_active.push_back([&p, i](const Vector &a, const Vector &b) { return p.ineq(a, b)[i]; });
      }
  }
  for (int i = 0; i < n2; ++i) {
    if (sol.nu_upper.size() == n2 && p.upper.size() == n2 && std::abs(sol.nu_upper[i]) >= st.weak_multiplier &&
        std::abs(p.upper[i] - x2[i]) <= st.active_tol) {
      out.active_bounds.push_back(i + 1);
      A_rows.push_back(Vector::Unit(n2, i));
      h_active.push_back([&p, i](const Vector &, const Vector &b) { return b[i] - p.upper[i]; });
    }
    if (sol.nu_lower.size() == n2 && p.lower.size() == n2 && std::abs(sol.nu_lower[i]) >= st.weak_multiplier &&
        std::abs(x2[i] - p.lower[i]) <= st.active_tol) {
      out.active_bounds.push_back(-(i + 1));
      A_rows.push_back(-Vector::Unit(n2, i));
      h_active.push_back([&p, i](const Vector &, const Vector &b) { return p.lower[i] - b[i]; });
    }
  }
  const int m = static_cast<int>(A_rows.size());

  // bound terms of the Lagrangian are linear in x2 and independent of x1, so they drop out of both Hessian blocks
  auto grad_L = [&](const Vector &a, const Vector &b) {
    return lagrangian_gradient_x2(p, a, b, sol.nu_eq, sol.nu_ineq);
  };
  Matrix H(n2, n2);
  for (int j = 0; j < n2; ++j) {
    const double h = st.hessian_step * std::max(1.0, std::abs(x2[j]));
    Vector bp = x2, bm = x2;
    bp[j] += h;
    bm[j] -= h;
    H.col(j) = (grad_L(x1, bp) - grad_L(x1, bm)) / (2.0 * h);
  }
  H = 0.5 * (H + H.transpose());
  Matrix Hx(n2, n1);
  Matrix Ax(m, n1);
  for (int i = 0; i < n1; ++i) {
    const double h = st.hessian_step * std::max(1.0, std::abs(x1[i]));
    Vector ap = x1, am = x1;
    ap[i] += h;
    am[i] -= h;
    Hx.col(i) = (grad_L(ap, x2) - grad_L(am, x2)) / (2.0 * h);
    for (int r = 0; r < m; ++r)
      Ax(r, i) = (h_active[static_cast<std::size_t>(r)](ap, x2) - h_active[static_cast<std::size_t>(r)](am, x2)) /
                 (2.0 * h);
  }
  Matrix K = Matrix::Zero(n2 + m, n2 + m);
  K.topLeftCorner(n2, n2) = H;
  for (int r = 0; r < m; ++r) {
    K.block(n2 + r, 0, 1, n2) = A_rows[static_cast<std::size_t>(r)].transpose();
    K.block(0, n2 + r, n2, 1) = A_rows[static_cast<std::size_t>(r)];
  }
  Matrix rhs(n2 + m, n1);
  rhs.topRows(n2) = -Hx;
  rhs.bottomRows(m) = -Ax;
  Eigen::FullPivLU<Matrix> lu(K);
  const double rcond = lu.rcond();
  if (lu.rank() < n2 + m || !(rcond > st.singular_rcond)) {
    out.dx2_dx1 = resolved_sensitivity(p, x1, sol, st.fallback_step, st.resolve);
    out.fallback = true;
    return out;
  }
  const Matrix s = lu.solve(rhs);
  out.dx2_dx1 = s.topRows(n2);
  out.dnu_dx1 = s.bottomRows(m);
  return out;
}

/// dF/dx1 for F(x1, x2*(x1)): explicit partial plus chain rule through the lower-level solution.
inline Vector total_derivative(const Vector &dF_dx1, const Vector &dF_dx2, const Matrix &dx2_dx1) {
  return dF_dx1 + dx2_dx1.transpose() * dF_dx2;
}

} // namespace oed
