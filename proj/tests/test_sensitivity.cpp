#include <gtest/gtest.h>

#include <cmath>

#include "oed/design.hpp"
#include "oed/sensitivity.hpp"

using namespace oed;

namespace {

Vector v1(double a) { return Vector::Constant(1, a); }

Vector v2(double a, double b) {
  Vector x(2);
  x << a, b;
  return x;
}

RegionSetup case1() { return {builtin_bod(), v2(2.5, 0.5), NoiseModel::unknown(Vector::Constant(1, 0.1)), 0.9545, {}, {}}; }
RegionSetup case2() {
  return {builtin_second_order(), v2(0.5, 1.0), NoiseModel::known(Vector::Constant(1, 0.4)), 0.9545, {}, {}};
}

Vector flat(std::initializer_list<double> u) {
  Vector x(static_cast<Eigen::Index>(u.size()));
  Eigen::Index i = 0;
  for (double d : u)
    x[i++] = d;
  return x;
}

double max_rel(const Matrix &a, const Matrix &b) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-12);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

} // namespace

TEST(Sensitivity, UnconstrainedTracksParameter) {
  ParametricNlp p;
  p.n_x1 = 2;
  p.n_x2 = 2;
  p.objective = [](const Vector &x1, const Vector &x2) { return (x2 - x1).squaredNorm(); };
  p.lower = v2(-10, -10);
  p.upper = v2(10, 10);
  const Vector x1 = v2(0.3, -1.2);
  const auto sol = solve_local(p.at(x1), Vector::Zero(2));
  ASSERT_TRUE(sol.converged());
  const auto s = fiacco_sensitivity(p, x1, sol);
  EXPECT_FALSE(s.fallback);
  EXPECT_LT((s.dx2_dx1 - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Sensitivity, ActiveBoundFreezesSolution) {
  ParametricNlp p;
  p.n_x1 = 1;
  p.n_x2 = 1;
  p.objective = [](const Vector &x1, const Vector &x2) { return (x2 - x1).squaredNorm(); };
  p.lower = v1(1.0);
  p.upper = v1(5.0);
  const Vector x1 = v1(0.0);
  const auto sol = solve_local(p.at(x1), v1(3.0));
  ASSERT_TRUE(sol.converged());
  EXPECT_NEAR(sol.x[0], 1.0, 1e-9);
  const auto s = fiacco_sensitivity(p, x1, sol);
  EXPECT_EQ(s.active_bounds.size(), 1u);
  EXPECT_NEAR(s.dx2_dx1(0, 0), 0.0, 1e-9);
}

TEST(Sensitivity, MaximizationWithCurvedConstraint) {
  // max x2 s.t. x2^2 <= x1  ->  x2* = sqrt(x1), dx2/dx1 = 1 / (2 sqrt(x1))
  ParametricNlp p;
  p.n_x1 = 1;
  p.n_x2 = 1;
  p.sense = Sense::maximize;
  p.objective = [](const Vector &, const Vector &x2) { return x2[0]; };
  p.n_ineq = 1;
  p.ineq = [](const Vector &x1, const Vector &x2) { return v1(x2[0] * x2[0] - x1[0]); };
  p.lower = v1(-10);
  p.upper = v1(10);
  const Vector x1 = v1(2.0);
  const auto sol = solve_local(p.at(x1), v1(0.5));
  ASSERT_TRUE(sol.converged());
  EXPECT_NEAR(sol.x[0], std::sqrt(2.0), 1e-8);
  EXPECT_LE(sol.nu_ineq[0], 0.0);
  const auto s = fiacco_sensitivity(p, x1, sol);
  EXPECT_EQ(s.active_ineq.size(), 1u);
  EXPECT_NEAR(s.dx2_dx1(0, 0), 0.5 / std::sqrt(2.0), 1e-6);
}

TEST(Sensitivity, TotalDerivativeChainRule) {
  Matrix D(2, 3);
  D << 1, 2, 3, 4, 5, 6;
  const Vector g = total_derivative(flat({1, 1, 1}), v2(1, -1), D);
  EXPECT_EQ(g, flat({1 - 3, 1 - 3, 1 - 3}));
}

TEST(Sensitivity, AnchorFamilyAgreesWithResolvedDifferences) {
  const auto setup = case1();
  const Vector x1 = flat({1.37, 1.37, 20, 20});
  const auto cr = make_design_crspec(setup, design_from_flat(x1, 1));
  const AnchorSet a = anchor_points(cr);
  for (int k = 0; k < 4; ++k) {
    const auto par = anchor_parametric(setup, 4, k / 2, k % 2 == 1);
    const auto s = fiacco_sensitivity(par, x1, a.solutions[static_cast<std::size_t>(k)]);
    EXPECT_FALSE(s.fallback);
    const Matrix fd = resolved_sensitivity(par, x1, a.solutions[static_cast<std::size_t>(k)], 1e-5,
                                           SensitivitySettings{}.resolve, true);
    // samples pinned at the input bound move the anchor too, so all columns are compared
    EXPECT_LT(max_rel(s.dx2_dx1, fd), 1e-4) << "anchor " << k;
  }
}

TEST(Sensitivity, FarthestPairFamilyAgreesWithResolvedDifferences) {
  const auto setup = case2();
  const Vector x1 = flat({1.63, 1.63, 10});
  const auto cr = make_design_crspec(setup, design_from_flat(x1, 1));
  const AnchorSet a = anchor_points(cr);
  const FarthestPair fp = farthest_pair(cr, a);
  const auto par = farthest_pair_parametric(setup, 3);
  const auto s = fiacco_sensitivity(par, x1, fp.solution);
  const Matrix fd = resolved_sensitivity(par, x1, fp.solution, 1e-5, SensitivitySettings{}.resolve, true);
  EXPECT_LT(max_rel(s.dx2_dx1, fd), 1e-4);
}

TEST(Sensitivity, ScalingFamiliesAgreeWithResolvedDifferences) {
  const auto setup = case1();
  const Vector x1 = flat({1.42, 1.42, 20, 20});
  const auto cr = make_design_crspec(setup, design_from_flat(x1, 1));
  const auto sc = ellipsoid_scalings(cr, cr.quadratic_form_matrix());
  for (bool outer : {true, false}) {
    const auto par = scaling_parametric(setup, 4, outer);
    const NlpSolution &sol = outer ? sc.out_solution : sc.in_solution;
    const auto s = fiacco_sensitivity(par, x1, sol);
    const Matrix fd = resolved_sensitivity(par, x1, sol, 1e-5, SensitivitySettings{}.resolve, true);
    EXPECT_LT(max_rel(s.dx2_dx1, fd), 1e-4) << (outer ? "outer" : "inner");
  }
}

TEST(Sensitivity, RejectsUnconvergedSolution) {
  ParametricNlp p;
  p.n_x1 = 1;
  p.n_x2 = 1;
  p.objective = [](const Vector &x1, const Vector &x2) { return (x2 - x1).squaredNorm(); };
  NlpSolution bad;
  bad.x = v1(0.0);
  EXPECT_THROW(fiacco_sensitivity(p, v1(0.0), bad), SolverError);
  EXPECT_THROW(fiacco_sensitivity(p, v2(0.0, 1.0), bad), DimensionError);
}
