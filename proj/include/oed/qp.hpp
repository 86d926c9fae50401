#pragma once

// Dense strictly convex QP by the Goldfarb-Idnani dual active-set method.
//
//   min 0.5 x'Gx + g'x   s.t.  A_eq x = b_eq,  A_in x <= b_in
//
// The active-set projections are rebuilt from scratch after every change of the
// working set. Problems here have at most a few dozen variables, so the O(n^3)
// refactorizations are irrelevant next to callback costs.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace oed {

struct QpProblem {
  Eigen::MatrixXd G;
  Eigen::VectorXd g;
  Eigen::MatrixXd A_eq; // m_eq x n
  Eigen::VectorXd b_eq;
  Eigen::MatrixXd A_in; // m_in x n
  Eigen::VectorXd b_in;
};

struct QpResult {
  bool ok = false;
  Eigen::VectorXd x;
  /// Multipliers in G x + g + A_eq' lambda_eq + A_in' lambda_in = 0, lambda_in >= 0.
  Eigen::VectorXd lambda_eq;
  Eigen::VectorXd lambda_in;
  int iterations = 0;
  std::string message;
};

namespace detail {

class ActiveSetProjector {
public:
  explicit ActiveSetProjector(const Eigen::MatrixXd &Ginv) : Ginv_(Ginv) {}

  void rebuild(const Eigen::MatrixXd &normals) {
    q_ = static_cast<int>(normals.cols());
    if (q_ == 0) {
      H_ = Ginv_;
      Nstar_.resize(0, Ginv_.rows());
      return;
    }
    const Eigen::MatrixXd GinvN = Ginv_ * normals;
    const Eigen::MatrixXd M = normals.transpose() * GinvN;
    Nstar_ = M.ldlt().solve(GinvN.transpose());
    H_ = Ginv_ - GinvN * Nstar_;
  }

  Eigen::VectorXd z(const Eigen::VectorXd &n) const { return H_ * n; }
  Eigen::VectorXd r(const Eigen::VectorXd &n) const {
    if (q_ == 0)
      return Eigen::VectorXd();
    return Nstar_ * n;
  }

private:
  const Eigen::MatrixXd &Ginv_;
  Eigen::MatrixXd H_;
  Eigen::MatrixXd Nstar_;
  int q_ = 0;
};

} // namespace detail

inline QpResult solve_qp(const QpProblem &qp, int max_iterations = -1) {
  const auto n = qp.G.rows();
  const auto m_eq = qp.A_eq.rows();
  const auto m_in = qp.A_in.rows();
  QpResult res;
  res.lambda_eq = Eigen::VectorXd::Zero(m_eq);
  res.lambda_in = Eigen::VectorXd::Zero(m_in);

  Eigen::LLT<Eigen::MatrixXd> llt(qp.G);
  if (llt.info() != Eigen::Success) {
    res.message = "QP Hessian is not positive definite";
    return res;
  }
  const Eigen::MatrixXd Ginv = llt.solve(Eigen::MatrixXd::Identity(n, n));
  if (max_iterations < 0)
    max_iterations = static_cast<int>(10 * (n + m_eq + m_in) + 100);

  // Constraint k in GI form: s_k(x) = n_k' x - c_k, equalities s = 0, inequalities s >= 0.
  auto normal = [&](Eigen::Index k) -> Eigen::VectorXd {
    if (k < m_eq)
      return qp.A_eq.row(k).transpose();
    return -qp.A_in.row(k - m_eq).transpose();
  };
  auto slack = [&](Eigen::Index k, const Eigen::VectorXd &x) -> double {
    if (k < m_eq)
      return qp.A_eq.row(k).dot(x) - qp.b_eq[k];
    return qp.b_in[k - m_eq] - qp.A_in.row(k - m_eq).dot(x);
  };
  const double scale = 1.0 + qp.g.lpNorm<Eigen::Infinity>() + qp.G.lpNorm<Eigen::Infinity>();
  const double tiny = 1e-14 * scale;

  Eigen::VectorXd x = -(Ginv * qp.g);
  std::vector<Eigen::Index> active;
  std::vector<double> u; // GI multipliers of active constraints
  detail::ActiveSetProjector proj(Ginv);

  auto normals_matrix = [&]() {
    Eigen::MatrixXd N(n, static_cast<Eigen::Index>(active.size()));
    for (std::size_t i = 0; i < active.size(); ++i)
      N.col(static_cast<Eigen::Index>(i)) = normal(active[i]);
    return N;
  };
  proj.rebuild(normals_matrix());

  // Equalities: full steps, never dropped.
  for (Eigen::Index k = 0; k < m_eq; ++k) {
    const Eigen::VectorXd nk = normal(k);
    const Eigen::VectorXd z = proj.z(nk);
    const Eigen::VectorXd r = proj.r(nk);
    const double zn = z.dot(nk);
    if (std::abs(zn) <= tiny * (1.0 + nk.squaredNorm())) {
      if (std::abs(slack(k, x)) > 1e-9 * (1.0 + std::abs(qp.b_eq[k]))) {
        res.message = "inconsistent equality constraints";
        return res;
      }
      continue; // linearly dependent and consistent
    }
    const double t = -slack(k, x) / zn;
    x += t * z;
    for (std::size_t i = 0; i < u.size(); ++i)
      u[i] -= t * r[static_cast<Eigen::Index>(i)];
    u.push_back(t);
    active.push_back(k);
    proj.rebuild(normals_matrix());
  }

  std::vector<char> is_active(static_cast<std::size_t>(m_eq + m_in), 0);
  for (auto k : active)
    is_active[static_cast<std::size_t>(k)] = 1;

  int iter = 0;
  for (; iter < max_iterations; ++iter) {
    // most violated inequality
    Eigen::Index p = -1;
    double worst = 0.0;
    for (Eigen::Index k = m_eq; k < m_eq + m_in; ++k) {
      if (is_active[static_cast<std::size_t>(k)])
        continue;
      const double s = slack(k, x);
      const double tol = 1e-12 * (1.0 + std::abs(qp.b_in[k - m_eq]) + qp.A_in.row(k - m_eq).cwiseAbs().dot(x.cwiseAbs()));
      if (s < -tol && s < worst) {
        worst = s;
        p = k;
      }
    }
    if (p < 0)
      break;

    const Eigen::VectorXd np = normal(p);
    double u_plus = 0.0;
    for (int inner = 0; inner < max_iterations; ++inner) {
      const Eigen::VectorXd z = proj.z(np);
      const Eigen::VectorXd r = proj.r(np);
      // partial (dual) step limit over active inequalities
      double t1 = std::numeric_limits<double>::infinity();
      std::size_t drop = active.size();
      for (std::size_t i = 0; i < active.size(); ++i) {
        if (active[i] < m_eq)
          continue;
        const double ri = r[static_cast<Eigen::Index>(i)];
        if (ri > tiny) {
          const double ratio = u[i] / ri;
          if (ratio < t1) {
            t1 = ratio;
            drop = i;
          }
        }
      }
      const double zn = z.dot(np);
      const double t2 = (std::abs(zn) > tiny * (1.0 + np.squaredNorm()))
                            ? -slack(p, x) / zn
                            : std::numeric_limits<double>::infinity();
      const double t = std::min(t1, t2);
      if (!std::isfinite(t)) {
        res.message = "infeasible QP";
        res.x = x;
        res.iterations = iter;
        return res;
      }
      if (!std::isfinite(t2)) {
        for (std::size_t i = 0; i < u.size(); ++i)
          u[i] -= t * r[static_cast<Eigen::Index>(i)];
        u_plus += t;
        is_active[static_cast<std::size_t>(active[drop])] = 0;
        active.erase(active.begin() + static_cast<std::ptrdiff_t>(drop));
        u.erase(u.begin() + static_cast<std::ptrdiff_t>(drop));
        proj.rebuild(normals_matrix());
        continue;
      }
      x += t * z;
      for (std::size_t i = 0; i < u.size(); ++i)
        u[i] -= t * r[static_cast<Eigen::Index>(i)];
      u_plus += t;
      if (t2 <= t1) {
        active.push_back(p);
        u.push_back(u_plus);
        is_active[static_cast<std::size_t>(p)] = 1;
        proj.rebuild(normals_matrix());
        break;
      }
      is_active[static_cast<std::size_t>(active[drop])] = 0;
      active.erase(active.begin() + static_cast<std::ptrdiff_t>(drop));
      u.erase(u.begin() + static_cast<std::ptrdiff_t>(drop));
      proj.rebuild(normals_matrix());
    }
  }
  res.iterations = iter;
  if (iter >= max_iterations) {
    res.message = "QP iteration limit";
    res.x = x;
    return res;
  }
  for (std::size_t i = 0; i < active.size(); ++i) {
    const auto k = active[i];
    if (k < m_eq)
      res.lambda_eq[k] = -u[i];
    else
      res.lambda_in[k - m_eq] = std::max(0.0, u[i]);
  }
  res.x = x;
  res.ok = true;
  return res;
}

} // namespace oed
