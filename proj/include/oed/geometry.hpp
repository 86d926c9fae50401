#pragma once

// Lower-level geometry of exact confidence regions: anchor points and bounding box,
// gridded volume, farthest pair, inner/outer ellipsoid scalings, ray fans and 2-D contours.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "oed/errors.hpp"
#include "oed/estimation.hpp"
#include "oed/nlp.hpp"
#include "oed/statistics.hpp"

namespace oed {

struct GeometrySettings {
  int n_starts = 8;            // extra low-discrepancy starts per extremal problem
  std::uint64_t seed = 1;
  int grid_resolution = 400;   // nodes per axis for verification grids (n_p = 2)
  int rays = 96;
  double verify_margin = 0.2;  // relative padding of the fine verification grid around the ray-fan box
  bool grid_verify = true;     // dense-grid certificate for anchors (skipped for line-search trial points)
  NlpTolerances tolerances{1e-9, 1e-10, 1e-14, 200, true};
};

struct Box {
  Vector lower;
  Vector upper;

  bool contains(const Vector &p, double tol = 0.0) const {
    return ((p.array() >= lower.array() - tol) && (p.array() <= upper.array() + tol)).all();
  }
  Vector width() const { return upper - lower; }
  double volume() const { return width().prod(); }
};

// ---------------------------------------------------------------------------------------------
// Rays from p_hat

struct RayFan {
  Matrix shape;                  // p = p_hat + r * shape * z
  std::vector<Vector> z;         // unit directions in the shaped coordinates
  std::vector<double> radius;
  std::vector<Vector> points;    // boundary points
};

namespace detail {

inline double box_exit(const Vector &p0, const Vector &d, const Vector &lo, const Vector &hi) {
  double t = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < d.size(); ++j) {
    if (d[j] > 0.0)
      t = std::min(t, (hi[j] - p0[j]) / d[j]);
    else if (d[j] < 0.0)
      t = std::min(t, (lo[j] - p0[j]) / d[j]);
  }
  return t;
}

inline double constraint_scale(const ConfidenceRegionSpec &cr) { return std::max(cr.threshold(), 1e-12); }

} // namespace detail

/// Distance t along p_hat + t d at which excess changes sign (single crossing assumed).
inline double boundary_radius(const ConfidenceRegionSpec &cr, const Vector &d) {
  const Vector &p0 = cr.p_hat();
  const double t_box = detail::box_exit(p0, d, cr.box_lower(), cr.box_upper());
  if (!std::isfinite(t_box) || t_box <= 0.0)
    throw DomainError("boundary_radius: direction must be non-zero");
  double lo = 0.0;
  double hi = std::min(t_box, 0.5 * std::sqrt(std::max(cr.threshold(), 1e-12)) / std::max(d.norm(), 1e-300));
  while (cr.excess(p0 + hi * d) <= 0.0) {
    if (hi >= t_box)
      throw BoxContactError("confidence region reaches the parameter search box; enlarge the box");
    lo = hi;
    hi = std::min(2.0 * hi, t_box);
  }
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (cr.excess(p0 + mid * d) <= 0.0)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

/// Cholesky factor L of M^-1 (L L' = M^-1) so rays are spread evenly over ellipsoid-like regions;
/// falls back to a diagonal built from the search box when M is singular.
inline Matrix ray_shape(const ConfidenceRegionSpec &cr) {
  const Matrix M = cr.quadratic_form_matrix();
  Eigen::SelfAdjointEigenSolver<Matrix> es(M);
  if (es.eigenvalues().minCoeff() > 1e-10 * std::max(1.0, es.eigenvalues().maxCoeff())) {
    Eigen::LLT<Matrix> llt(M.inverse());
    if (llt.info() == Eigen::Success)
      return llt.matrixL();
  }
  return (0.01 * (cr.box_upper() - cr.box_lower())).asDiagonal();
}

/// Unit directions: evenly spaced angles for n = 2, seeded Gaussian directions otherwise.
inline std::vector<Vector> unit_directions(int n, int count) {
  std::vector<Vector> z;
  z.reserve(static_cast<std::size_t>(count));
  if (n == 1) {
    z.push_back(Vector::Constant(1, 1.0));
    z.push_back(Vector::Constant(1, -1.0));
    return z;
  }
  if (n == 2) {
    for (int k = 0; k < count; ++k) {
      const double th = 2.0 * std::numbers::pi * (k + 0.5) / count;
      Vector v(2);
      v << std::cos(th), std::sin(th);
      z.push_back(v);
    }
    return z;
  }
  GaussianGenerator gen(splitmix64(0x5eed0000u + static_cast<std::uint64_t>(n)));
  for (int k = 0; k < count; ++k) {
    Vector v(n);
    for (int j = 0; j < n; ++j)
      v[j] = gen.next();
    z.push_back(v.normalized());
  }
  return z;
}

inline RayFan ray_fan(const ConfidenceRegionSpec &cr, int count, const Matrix &shape) {
  if (count < 2)
    throw DomainError("ray fan needs at least two rays");
  RayFan fan;
  fan.shape = shape;
  fan.z = unit_directions(cr.n_p(), count);
  for (const auto &z : fan.z) {
    const Vector d = shape * z;
    const double r = boundary_radius(cr, d);
    fan.radius.push_back(r);
    fan.points.push_back(cr.p_hat() + r * d);
  }
  return fan;
}

inline RayFan ray_fan(const ConfidenceRegionSpec &cr, int count) { return ray_fan(cr, count, ray_shape(cr)); }

inline double unit_sphere_area(int n) {
  // surface area of the unit sphere in R^n
  return 2.0 * std::pow(std::numbers::pi, 0.5 * n) / std::tgamma(0.5 * n);
}

/// Star-shaped volume |det L| * area(S^{n-1}) / (n K) * Sum r_k^n.
inline double radial_volume(const RayFan &fan) {
  const int n = static_cast<int>(fan.shape.rows());
  double s = 0.0;
  for (double r : fan.radius)
    s += std::pow(r, n);
  return std::abs(fan.shape.determinant()) * unit_sphere_area(n) / (n * static_cast<double>(fan.radius.size())) * s;
}

// ---------------------------------------------------------------------------------------------
// Dense scans

struct GridScan {
  Vector min_coord, max_coord;
  std::vector<Vector> argmin, argmax;
  long long feasible = 0;
  Vector spacing;
};

namespace detail {

inline int resolution_for_budget(int n, int requested, long long budget = 4000000) {
  int r = requested;
  while (r > 2 && std::pow(static_cast<double>(r), n) > static_cast<double>(budget))
    --r;
  return r;
}

} // namespace detail

/// Coordinate extremes of region members among the nodes of a tensor grid over box.
inline GridScan scan_region(const ConfidenceRegionSpec &cr, const Box &box, int resolution) {
  const int n = cr.n_p();
  if (n > 4)
    throw DomainError("grid scans support at most 4 parameters");
  const int res = detail::resolution_for_budget(n, resolution);
  GridScan s;
  s.min_coord = Vector::Constant(n, std::numeric_limits<double>::infinity());
  s.max_coord = Vector::Constant(n, -std::numeric_limits<double>::infinity());
  s.argmin.assign(static_cast<std::size_t>(n), Vector());
  s.argmax.assign(static_cast<std::size_t>(n), Vector());
  s.spacing = box.width() / (res - 1);
  long long total = 1;
  for (int d = 0; d < n; ++d)
    total *= res;
  Vector p(n);
  for (long long k = 0; k < total; ++k) {
    long long rem = k;
    for (int d = 0; d < n; ++d) {
      p[d] = box.lower[d] + s.spacing[d] * static_cast<double>(rem % res);
      rem /= res;
    }
    if (cr.excess(p) > 0.0)
      continue;
    ++s.feasible;
    for (int d = 0; d < n; ++d) {
      if (p[d] < s.min_coord[d]) {
        s.min_coord[d] = p[d];
        s.argmin[static_cast<std::size_t>(d)] = p;
      }
      if (p[d] > s.max_coord[d]) {
        s.max_coord[d] = p[d];
        s.argmax[static_cast<std::size_t>(d)] = p;
      }
    }
  }
  return s;
}

// ---------------------------------------------------------------------------------------------
// Anchor points

/// min or max p_j subject to excess(p) / c <= 0 inside the search box.
inline NlpProblem anchor_problem(const ConfidenceRegionSpec &cr, int j, bool maximize) {
  const double s = detail::constraint_scale(cr);
  NlpProblem prob;
  prob.n = cr.n_p();
  prob.sense = maximize ? Sense::maximize : Sense::minimize;
  prob.objective = [j](const Vector &p) { return p[j]; };
  prob.gradient = [j](const Vector &p) { return Vector::Unit(p.size(), j); };
  prob.n_ineq = 1;
  prob.ineq = [&cr, s](const Vector &p) { return Vector::Constant(1, cr.excess(p) / s); };
  prob.ineq_jacobian = [&cr, s](const Vector &p) { return Matrix(cr.excess_gradient(p).transpose() / s); };
  prob.lower = cr.box_lower();
  prob.upper = cr.box_upper();
  return prob;
}

struct AnchorSet {
  std::vector<Vector> pi;          // min p1, max p1, min p2, max p2, ...
  Vector lower, upper;             // coordinate ranges
  double phi_A = 0.0;
  std::vector<NlpSolution> solutions;
  std::vector<double> gaps;        // grid certificate per anchor (positive: grid beat the solver)
};

namespace detail {

inline void check_box_contact(const ConfidenceRegionSpec &cr, const Vector &p, const char *what) {
  const Vector w = cr.box_upper() - cr.box_lower();
  for (Eigen::Index j = 0; j < p.size(); ++j)
    if (p[j] - cr.box_lower()[j] <= 1e-9 * w[j] || cr.box_upper()[j] - p[j] <= 1e-9 * w[j])
      throw BoxContactError(std::string(what) + " touches the parameter search box; enlarge the box");
}

inline Box padded_box(const std::vector<Vector> &pts, const Vector &center, double margin, const Box &clip) {
  Box b{center, center};
  for (const auto &p : pts) {
    b.lower = b.lower.cwiseMin(p);
    b.upper = b.upper.cwiseMax(p);
  }
  const Vector pad = margin * b.width();
  b.lower = (b.lower - pad).cwiseMax(clip.lower);
  b.upper = (b.upper + pad).cwiseMin(clip.upper);
  return b;
}

inline bool solution_better(const NlpSolution &a, const NlpSolution &b, Sense sense) {
  if (!b.converged())
    return a.converged();
  if (!a.converged())
    return false;
  return sense == Sense::maximize ? a.value > b.value : a.value < b.value;
}

inline NlpSolution best_of_starts(const NlpProblem &prob, const std::vector<Vector> &starts, const NlpTolerances &tol) {
  NlpSolution best;
  for (const auto &x0 : starts) {
    NlpSolution s = solve_local(prob, x0, tol);
    if (solution_better(s, best, prob.sense))
      best = std::move(s);
  }
  return best;
}

inline std::vector<Vector> halton_points(const Box &box, int count, std::uint64_t seed) {
  std::vector<Vector> pts;
  if (count <= 0)
    return pts;
  HaltonSequence h(static_cast<int>(box.lower.size()), seed);
  for (int k = 0; k < count; ++k)
    pts.push_back(box.lower + h.point(static_cast<std::uint64_t>(k)).cwiseProduct(box.width()));
  return pts;
}

} // namespace detail

/// The 2 n_p coordinate extremes, each by multistart SQP and checked against dense grid scans.
inline AnchorSet anchor_points(const ConfidenceRegionSpec &cr, const GeometrySettings &gs = {},
                               const RayFan *fan_hint = nullptr) {
  const int n = cr.n_p();
  RayFan local_fan;
  if (!fan_hint) {
    local_fan = ray_fan(cr, gs.rays);
    fan_hint = &local_fan;
  }
  const Box search{cr.box_lower(), cr.box_upper()};
  const Box fine = detail::padded_box(fan_hint->points, cr.p_hat(), gs.verify_margin, search);

  std::optional<GridScan> scan_fine, scan_coarse;
  if (n <= 4 && gs.grid_verify) {
    scan_fine = scan_region(cr, fine, gs.grid_resolution);
    scan_coarse = scan_region(cr, search, gs.grid_resolution);
  }
  const auto extra = detail::halton_points(fine, gs.n_starts, gs.seed);

  AnchorSet a;
  a.lower.resize(n);
  a.upper.resize(n);
  for (int j = 0; j < n; ++j) {
    for (int side = 0; side < 2; ++side) {
      const bool maximize = side == 1;
      const NlpProblem prob = anchor_problem(cr, j, maximize);
      std::vector<Vector> starts{cr.p_hat()};
      std::size_t best_ray = 0;
      for (std::size_t k = 1; k < fan_hint->points.size(); ++k) {
        const double a_k = fan_hint->points[k][j], a_b = fan_hint->points[best_ray][j];
        if (maximize ? a_k > a_b : a_k < a_b)
          best_ray = k;
      }
      starts.push_back(fan_hint->points[best_ray]);
      starts.insert(starts.end(), extra.begin(), extra.end());
      NlpSolution best = detail::best_of_starts(prob, starts, gs.tolerances);
      double gap = -std::numeric_limits<double>::infinity();
      for (const auto *scan : {scan_fine ? &*scan_fine : nullptr, scan_coarse ? &*scan_coarse : nullptr}) {
        if (!scan || scan->feasible == 0)
          continue;
        const double grid = maximize ? scan->max_coord[j] : scan->min_coord[j];
        const Vector &witness = maximize ? scan->argmax[static_cast<std::size_t>(j)]
                                         : scan->argmin[static_cast<std::size_t>(j)];
        const double solver = best.converged() ? best.value : (maximize ? -1e300 : 1e300);
        double g = maximize ? grid - solver : solver - grid;
        if (g > 1e-9 * (1.0 + std::abs(grid))) {
          NlpSolution again = solve_local(prob, witness, gs.tolerances);
          if (detail::solution_better(again, best, prob.sense))
            best = std::move(again);
          g = maximize ? grid - best.value : best.value - grid;
        }
        gap = std::max(gap, g);
      }
      if (!best.converged())
        throw SolverError("anchor problem for parameter " + std::to_string(j + 1) + " did not converge");
      if (gap > 1e-6 * (1.0 + std::abs(best.value)))
        throw VerificationError("anchor for parameter " + std::to_string(j + 1) +
                                " is beaten by a feasible grid node; lower level not globally solved");
      detail::check_box_contact(cr, best.x, "anchor point");
      (maximize ? a.upper[j] : a.lower[j]) = best.value;
      a.pi.push_back(best.x);
      a.gaps.push_back(gap);
      a.solutions.push_back(std::move(best));
    }
  }
  a.phi_A = (a.upper - a.lower).sum();
  return a;
}

inline Box bounding_orthotope(const AnchorSet &a) { return {a.lower, a.upper}; }

// ---------------------------------------------------------------------------------------------
// Gridded volume

enum class GridRegistration {
  cell_centred, // nodes at lower + (k + 1/2) eps
  node_anchored // nodes at lower + k eps, last node clamped to upper
};

inline const char *to_string(GridRegistration r) {
  return r == GridRegistration::cell_centred ? "cell-centred" : "node-anchored";
}

inline GridRegistration parse_registration(const std::string &s) {
  if (s == "cell-centred" || s == "cell-centered" || s == "centred" || s == "centered")
    return GridRegistration::cell_centred;
  if (s == "node-anchored" || s == "node")
    return GridRegistration::node_anchored;
  throw ConfigError("unknown grid registration '" + s + "'");
}

struct GridVolume {
  double epsilon = 0.0;
  long long count = 0;
  double phi_D_hat = 0.0;
  Box box;
  GridRegistration registration = GridRegistration::cell_centred;
};

inline GridVolume grid_volume(const ConfidenceRegionSpec &cr, const Box &box, double epsilon,
                              GridRegistration reg = GridRegistration::cell_centred,
                              long long node_cap = 50000000) {
  if (!(epsilon > 0.0))
    throw DomainError("grid spacing must be positive");
  const int n = cr.n_p();
  std::vector<long long> counts(static_cast<std::size_t>(n));
  long long total = 1;
  for (int d = 0; d < n; ++d) {
    const double w = box.upper[d] - box.lower[d];
    long long c;
    if (reg == GridRegistration::cell_centred)
      c = std::max<long long>(1, static_cast<long long>(std::ceil(w / epsilon - 1e-9)));
    else {
      c = static_cast<long long>(std::floor(w / epsilon + 1e-9)) + 1;
      if (box.lower[d] + (c - 1) * epsilon < box.upper[d] - 1e-12 * std::max(1.0, std::abs(box.upper[d])))
        ++c; // clamped final node
    }
    counts[static_cast<std::size_t>(d)] = c;
    if (static_cast<double>(total) * static_cast<double>(c) > static_cast<double>(node_cap))
      throw DomainError("volume grid exceeds the node budget; increase epsilon");
    total *= c;
  }
  GridVolume gv;
  gv.epsilon = epsilon;
  gv.box = box;
  gv.registration = reg;
  Vector p(n);
  for (long long k = 0; k < total; ++k) {
    long long rem = k;
    for (int d = 0; d < n; ++d) {
      const long long c = counts[static_cast<std::size_t>(d)];
      const long long i = rem % c;
      rem /= c;
      if (reg == GridRegistration::cell_centred)
        p[d] = box.lower[d] + (static_cast<double>(i) + 0.5) * epsilon;
      else
        p[d] = std::min(box.lower[d] + static_cast<double>(i) * epsilon, box.upper[d]);
    }
    if (cr.contains(p))
      ++gv.count;
  }
  gv.phi_D_hat = static_cast<double>(gv.count) * std::pow(epsilon, n);
  return gv;
}

// ---------------------------------------------------------------------------------------------
// Farthest pair

/// max ||phi1 - phi2||^2 subject to both points in the region; x = (phi1, phi2).
inline NlpProblem farthest_pair_problem(const ConfidenceRegionSpec &cr) {
  const int n = cr.n_p();
  const double s = detail::constraint_scale(cr);
  NlpProblem prob;
  prob.n = 2 * n;
  prob.sense = Sense::maximize;
  prob.objective = [n](const Vector &x) { return (x.head(n) - x.tail(n)).squaredNorm(); };
  prob.gradient = [n](const Vector &x) {
    Vector g(2 * n);
    const Vector d = x.head(n) - x.tail(n);
    g.head(n) = 2.0 * d;
    g.tail(n) = -2.0 * d;
    return g;
  };
  prob.n_ineq = 2;
  prob.ineq = [&cr, n, s](const Vector &x) {
    Vector c(2);
    c << cr.excess(x.head(n)) / s, cr.excess(x.tail(n)) / s;
    return c;
  };
  prob.ineq_jacobian = [&cr, n, s](const Vector &x) {
    Matrix J = Matrix::Zero(2, 2 * n);
    J.block(0, 0, 1, n) = cr.excess_gradient(x.head(n)).transpose() / s;
    J.block(1, n, 1, n) = cr.excess_gradient(x.tail(n)).transpose() / s;
    return J;
  };
  Vector lo(2 * n), hi(2 * n);
  lo << cr.box_lower(), cr.box_lower();
  hi << cr.box_upper(), cr.box_upper();
  prob.lower = lo;
  prob.upper = hi;
  return prob;
}

struct FarthestPair {
  Vector phi1, phi2;
  double phi_E = 0.0;
  NlpSolution solution;
  double gap = 0.0; // best boundary-sample pair minus solver value
};

inline FarthestPair farthest_pair(const ConfidenceRegionSpec &cr, const AnchorSet &anchors,
                                  const GeometrySettings &gs = {}, const RayFan *fan_hint = nullptr) {
  const int n = cr.n_p();
  RayFan local_fan;
  if (!fan_hint) {
    local_fan = ray_fan(cr, 4 * gs.rays);
    fan_hint = &local_fan;
  }
  const auto &pts = fan_hint->points;
  const NlpProblem prob = farthest_pair_problem(cr);
  auto pack = [n](const Vector &a, const Vector &b) {
    Vector x(2 * n);
    x << a, b;
    return x;
  };
  std::vector<Vector> starts;
  for (int j = 0; j < n; ++j)
    starts.push_back(pack(anchors.pi[static_cast<std::size_t>(2 * j)], anchors.pi[static_cast<std::size_t>(2 * j + 1)]));
  // most distant boundary-sample pairs, one per distinct first point
  struct Cand { double d; std::size_t a, b; };
  std::vector<Cand> cands;
  for (std::size_t a = 0; a < pts.size(); ++a) {
    Cand best{-1.0, a, a};
    for (std::size_t b = 0; b < pts.size(); ++b) {
      const double d = (pts[a] - pts[b]).squaredNorm();
      if (d > best.d)
        best = {d, a, b};
    }
    cands.push_back(best);
  }
  std::sort(cands.begin(), cands.end(), [](const Cand &x, const Cand &y) {
    return x.d != y.d ? x.d > y.d : x.a < y.a;
  });
  const double sample_best = cands.empty() ? 0.0 : cands.front().d;
  for (std::size_t k = 0, used = 0; k < cands.size() && used < 4; ++k) {
    if (k > 0 && cands[k].a == cands[k - 1].b && cands[k].b == cands[k - 1].a)
      continue;
    starts.push_back(pack(pts[cands[k].a], pts[cands[k].b]));
    ++used;
  }
  NlpSolution best = detail::best_of_starts(prob, starts, gs.tolerances);
  if (!best.converged())
    throw SolverError("farthest-pair problem did not converge");
  double gap = sample_best - best.value;
  if (gap > 1e-9 * (1.0 + sample_best)) {
    NlpSolution again = solve_local(prob, pack(pts[cands.front().a], pts[cands.front().b]), gs.tolerances);
    if (detail::solution_better(again, best, prob.sense))
      best = std::move(again);
    gap = sample_best - best.value;
    if (gap > 1e-6 * (1.0 + sample_best))
      throw VerificationError("farthest pair is beaten by boundary samples; lower level not globally solved");
  }
  FarthestPair fp;
  fp.phi1 = best.x.head(n);
  fp.phi2 = best.x.tail(n);
  detail::check_box_contact(cr, fp.phi1, "farthest-pair point");
  detail::check_box_contact(cr, fp.phi2, "farthest-pair point");
  fp.phi_E = best.value;
  fp.gap = gap;
  fp.solution = std::move(best);
  return fp;
}

// ---------------------------------------------------------------------------------------------
// Ellipsoid scalings

/// k_out: max q(p) over the region (outer = true); k_in: min q(p) over its boundary excess = 0.
inline NlpProblem scaling_problem(const ConfidenceRegionSpec &cr, const Matrix &M, bool outer) {
  const double s = detail::constraint_scale(cr);
  const Vector ph = cr.p_hat();
  NlpProblem prob;
  prob.n = cr.n_p();
  prob.sense = outer ? Sense::maximize : Sense::minimize;
  prob.objective = [M, ph](const Vector &p) {
    const Vector d = p - ph;
    return d.dot(M * d);
  };
  prob.gradient = [M, ph](const Vector &p) { return Vector(2.0 * M * (p - ph)); };
  auto h = [&cr, s](const Vector &p) { return Vector::Constant(1, cr.excess(p) / s); };
  auto J = [&cr, s](const Vector &p) { return Matrix(cr.excess_gradient(p).transpose() / s); };
  if (outer) {
    prob.n_ineq = 1;
    prob.ineq = h;
    prob.ineq_jacobian = J;
  } else {
    prob.n_eq = 1;
    prob.eq = h;
    prob.eq_jacobian = J;
  }
  prob.lower = cr.box_lower();
  prob.upper = cr.box_upper();
  return prob;
}

struct EllipsoidScalings {
  double k_out = 0.0, k_in = 0.0;
  Vector p_out, p_in;
  NlpSolution out_solution, in_solution;
  double gap_out = 0.0, gap_in = 0.0; // boundary-sample certificates
};

inline EllipsoidScalings ellipsoid_scalings(const ConfidenceRegionSpec &cr, const Matrix &M,
                                            const GeometrySettings &gs = {}, const RayFan *fan_hint = nullptr) {
  if (M.rows() != cr.n_p() || M.cols() != cr.n_p())
    throw DimensionError("ellipsoid matrix must be n_p x n_p");
  Eigen::SelfAdjointEigenSolver<Matrix> es(M);
  if (!(es.eigenvalues().minCoeff() > 0.0))
    throw DomainError("ellipsoid scalings need a nonsingular information matrix");
  RayFan local_fan;
  if (!fan_hint) {
    local_fan = ray_fan(cr, 4 * gs.rays);
    fan_hint = &local_fan;
  }
  const auto &pts = fan_hint->points;
  std::vector<std::pair<double, std::size_t>> q;
  for (std::size_t k = 0; k < pts.size(); ++k) {
    const Vector d = pts[k] - cr.p_hat();
    q.emplace_back(d.dot(M * d), k);
  }
  std::sort(q.begin(), q.end());
  EllipsoidScalings out;
  for (int side = 0; side < 2; ++side) {
    const bool outer = side == 0;
    const NlpProblem prob = scaling_problem(cr, M, outer);
    std::vector<Vector> starts;
    for (int k = 0; k < 3 && k < static_cast<int>(q.size()); ++k)
      starts.push_back(pts[outer ? q[q.size() - 1 - static_cast<std::size_t>(k)].second
                                 : q[static_cast<std::size_t>(k)].second]);
    NlpSolution best = detail::best_of_starts(prob, starts, gs.tolerances);
    if (!best.converged())
      throw SolverError(std::string(outer ? "outer" : "inner") + " ellipsoid scaling did not converge");
    const double sample = outer ? q.back().first : q.front().first;
    const double gap = outer ? sample - best.value : best.value - sample;
    if (gap > 1e-6 * (1.0 + std::abs(sample)))
      throw VerificationError("ellipsoid scaling is beaten by boundary samples; lower level not globally solved");
    detail::check_box_contact(cr, best.x, "ellipsoid touching point");
    if (outer) {
      out.k_out = best.value;
      out.p_out = best.x;
      out.gap_out = gap;
      out.out_solution = std::move(best);
    } else {
      out.k_in = best.value;
      out.p_in = best.x;
      out.gap_in = gap;
      out.in_solution = std::move(best);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Contours (n_p = 2)

struct Polyline {
  std::vector<Vector> points;
  bool closed = false;
};

namespace detail {

inline Vector refine_on_segment(const ConfidenceRegionSpec &cr, Vector a, Vector b, double fa) {
  // a and b bracket the level set; bisection keeps the inside end in a when fa <= 0
  bool a_inside = fa <= 0.0;
  for (int it = 0; it < 60; ++it) {
    const Vector m = 0.5 * (a + b);
    const bool inside = cr.excess(m) <= 0.0;
    if (inside == a_inside)
      a = m;
    else
      b = m;
    if ((a - b).lpNorm<Eigen::Infinity>() < 1e-14)
      break;
  }
  return 0.5 * (a + b);
}

} // namespace detail

/// Level set excess = 0 by marching squares on a resolution x resolution node grid, with
/// center-value saddle disambiguation and bisection refinement of every vertex on its cell edge.
inline std::vector<Polyline> boundary_trace(const ConfidenceRegionSpec &cr, const Box &box, int resolution) {
  if (cr.n_p() != 2)
    throw DomainError("boundary tracing needs exactly two parameters");
  if (resolution < 3)
    throw DomainError("contour resolution must be at least 3");
  const int R = resolution;
  const double hx = (box.upper[0] - box.lower[0]) / (R - 1), hy = (box.upper[1] - box.lower[1]) / (R - 1);
  auto node = [&](int i, int j) {
    Vector p(2);
    p << box.lower[0] + i * hx, box.lower[1] + j * hy;
    return p;
  };
  std::vector<double> f(static_cast<std::size_t>(R) * R);
  for (int j = 0; j < R; ++j)
    for (int i = 0; i < R; ++i) {
      double v = cr.excess(node(i, j));
      if (!std::isfinite(v))
        v = 1e300;
      f[static_cast<std::size_t>(j) * R + i] = v;
    }
  auto F = [&](int i, int j) { return f[static_cast<std::size_t>(j) * R + i]; };
  // edge ids: horizontal edge (i,j)-(i+1,j) -> 2*(j*R+i), vertical (i,j)-(i,j+1) -> 2*(j*R+i)+1
  auto hedge = [&](int i, int j) { return 2LL * (static_cast<long long>(j) * R + i); };
  auto vedge = [&](int i, int j) { return 2LL * (static_cast<long long>(j) * R + i) + 1; };
  std::map<long long, Vector> vertex;
  auto edge_point = [&](long long id) -> const Vector & {
    auto it = vertex.find(id);
    if (it != vertex.end())
      return it->second;
    const long long base = id / 2;
    const int i = static_cast<int>(base % R), j = static_cast<int>(base / R);
    const bool horizontal = (id % 2) == 0;
    const int i2 = horizontal ? i + 1 : i, j2 = horizontal ? j : j + 1;
    const double fa = F(i, j), fb = F(i2, j2);
    // linear interpolation start, then bisection on the edge
    Vector p = detail::refine_on_segment(cr, node(i, j), node(i2, j2), fa);
    (void)fb;
    return vertex.emplace(id, p).first->second;
  };
  std::vector<std::pair<long long, long long>> segs;
  for (int j = 0; j + 1 < R; ++j)
    for (int i = 0; i + 1 < R; ++i) {
      const bool b0 = F(i, j) <= 0.0, b1 = F(i + 1, j) <= 0.0, b2 = F(i + 1, j + 1) <= 0.0, b3 = F(i, j + 1) <= 0.0;
      const int code = (b0 ? 1 : 0) | (b1 ? 2 : 0) | (b2 ? 4 : 0) | (b3 ? 8 : 0);
      if (code == 0 || code == 15)
        continue;
      const long long e0 = hedge(i, j), e1 = vedge(i + 1, j), e2 = hedge(i, j + 1), e3 = vedge(i, j);
      auto add = [&](long long a, long long b) { segs.emplace_back(a, b); };
      switch (code) {
      case 1: case 14: add(e3, e0); break;
      case 2: case 13: add(e0, e1); break;
      case 3: case 12: add(e3, e1); break;
      case 4: case 11: add(e1, e2); break;
      case 6: case 9: add(e0, e2); break;
      case 7: case 8: add(e3, e2); break;
      case 5: case 10: {
        Vector c(2);
        c << box.lower[0] + (i + 0.5) * hx, box.lower[1] + (j + 0.5) * hy;
        const bool center_in = cr.excess(c) <= 0.0;
        // code 5: corners 0 and 2 inside
        const bool connect_inside = (code == 5) == center_in;
        if (connect_inside) {
          add(e3, e2);
          add(e0, e1);
        } else {
          add(e3, e0);
          add(e1, e2);
        }
        break;
      }
      default: break;
      }
    }
  // chain segments
  std::map<long long, std::vector<std::size_t>> at;
  for (std::size_t k = 0; k < segs.size(); ++k) {
    at[segs[k].first].push_back(k);
    at[segs[k].second].push_back(k);
  }
  std::vector<char> used(segs.size(), 0);
  std::vector<Polyline> lines;
  for (std::size_t s0 = 0; s0 < segs.size(); ++s0) {
    if (used[s0])
      continue;
    used[s0] = 1;
    std::vector<long long> chain{segs[s0].first, segs[s0].second};
    auto extend = [&](bool forward) {
      while (true) {
        const long long end = forward ? chain.back() : chain.front();
        std::size_t next = segs.size();
        for (auto k : at[end])
          if (!used[k]) {
            next = k;
            break;
          }
        if (next == segs.size())
          return;
        used[next] = 1;
        const long long other = segs[next].first == end ? segs[next].second : segs[next].first;
        if (forward)
          chain.push_back(other);
        else
          chain.insert(chain.begin(), other);
      }
    };
    extend(true);
    extend(false);
    Polyline pl;
    pl.closed = chain.size() > 2 && chain.front() == chain.back();
    if (pl.closed)
      chain.pop_back();
    for (auto id : chain)
      pl.points.push_back(edge_point(id));
    lines.push_back(std::move(pl));
  }
  return lines;
}

/// Shoelace area of a closed polyline.
inline double polygon_area(const Polyline &pl) {
  double a = 0.0;
  const auto &p = pl.points;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const auto &u = p[k];
    const auto &v = p[(k + 1) % p.size()];
    a += u[0] * v[1] - v[0] * u[1];
  }
  return 0.5 * std::abs(a);
}

/// Winding number of a closed polyline around point c (non-zero: enclosed).
inline int winding_number(const Polyline &pl, const Vector &c) {
  int w = 0;
  const auto &p = pl.points;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const Vector &a = p[k];
    const Vector &b = p[(k + 1) % p.size()];
    const double cross = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    if (a[1] <= c[1]) {
      if (b[1] > c[1] && cross > 0)
        ++w;
    } else if (b[1] <= c[1] && cross < 0) {
      --w;
    }
  }
  return w;
}

} // namespace oed
