#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oed/estimation.hpp"

using namespace oed;

namespace {

Vector v2(double a, double b) {
  Vector x(2);
  x << a, b;
  return x;
}

Design col(std::initializer_list<double> u) {
  Design U(static_cast<Eigen::Index>(u.size()), 1);
  Eigen::Index i = 0;
  for (double d : u)
    U(i++, 0) = d;
  return U;
}

ModelSpec line_model() {
  return make_linear_model(
      "line", 2, 1, [](std::span<const double> u, std::span<double> q) { q[0] = 1.0; q[1] = u[0]; },
      Vector::Constant(1, -1.0), Vector::Constant(1, 1.0));
}

RegionSetup case1() { return {builtin_bod(), v2(2.5, 0.5), NoiseModel::unknown(Vector::Constant(1, 0.1)), 0.9545, {}, {}}; }
RegionSetup case2() {
  return {builtin_second_order(), v2(0.5, 1.0), NoiseModel::known(Vector::Constant(1, 0.4)), 0.9545, {}, {}};
}

} // namespace

TEST(Residual, Examples) {
  const auto bod = builtin_bod();
  const Design U = col({1.37, 1.37, 20, 20});
  const Dataset d = simulate_dataset(bod, v2(2.5, 0.5), U, NoiseModel::known(Vector::Constant(1, 0.1)));
  EXPECT_EQ(residual_objective(bod, d, v2(2.5, 0.5), true), 0.0);
  // independent summation oracle
  const Vector p = v2(2.6, 0.45);
  double oracle = 0.0;
  for (double u : {1.37, 1.37, 20.0, 20.0}) {
    const double r = 2.5 * (1 - std::exp(-0.5 * u)) - 2.6 * (1 - std::exp(-0.45 * u));
    oracle += r * r;
  }
  EXPECT_NEAR(residual_objective(bod, d, p, false), oracle, 1e-12);
  EXPECT_NEAR(residual_objective(bod, d, p, true), oracle / 0.01, 1e-10);

  Dataset one{col({2.0}), Matrix::Constant(1, 1, 0.0), NoiseModel::known(Vector::Constant(1, 0.1))};
  one.measurements(0, 0) = evaluate_model(bod, v2(2.5, 0.5), Vector::Constant(1, 2.0))[0] + 0.2;
  EXPECT_NEAR(residual_objective(bod, one, v2(2.5, 0.5), true), 4.0, 1e-10);

  Dataset zero = one;
  zero.noise.sigma[0] = 0.0;
  EXPECT_THROW(residual_objective(bod, zero, v2(2.5, 0.5), true), DomainError);
  Dataset unk = one;
  unk.noise.kind = NoiseModel::Kind::unknown_variance;
  EXPECT_THROW(residual_objective(bod, unk, v2(2.5, 0.5), true), DomainError);
}

TEST(Fisher, Examples) {
  const auto lin = make_linear_model(
      "id", 1, 1, [](std::span<const double>, std::span<double> q) { q[0] = 1.0; }, Vector::Zero(1),
      Vector::Ones(1));
  EXPECT_NEAR(fisher_information(lin, Vector::Zero(1), col({0.3}), Vector::Ones(1)).matrix(0, 0), 1.0, 1e-15);

  const auto bod = builtin_bod();
  EXPECT_EQ(fisher_information(bod, v2(2.5, 0.5), col({0, 0}), Vector::Constant(1, 0.1)).matrix.norm(), 0.0);

  const Matrix F = fisher_information(bod, v2(2.5, 0.5), col({1.69, 1.69, 20, 20}), Vector::Constant(1, 0.1)).matrix;
  Matrix oracle = Matrix::Zero(2, 2);
  for (double u : {1.69, 1.69, 20.0, 20.0}) {
    const double e = std::exp(-0.5 * u);
    const Vector s = v2(1 - e, 2.5 * u * e);
    oracle += s * s.transpose() / 0.01;
  }
  EXPECT_LT((F - oracle).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Fisher, SymmetricPsdAndLoewnerMonotone) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ud(0.0, 10.0);
  const auto m = builtin_second_order();
  for (int k = 0; k < 30; ++k) {
    Design U(4, 1);
    for (int i = 0; i < 4; ++i)
      U(i, 0) = ud(rng);
    const Matrix F = fisher_information(m, v2(0.5, 1.0), U, Vector::Constant(1, 0.4)).matrix;
    EXPECT_LT((F - F.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    Eigen::SelfAdjointEigenSolver<Matrix> es(F);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
    Design U5(5, 1);
    U5.topRows(4) = U;
    U5(4, 0) = ud(rng);
    const Matrix F5 = fisher_information(m, v2(0.5, 1.0), U5, Vector::Constant(1, 0.4)).matrix;
    Eigen::SelfAdjointEigenSolver<Matrix> es5(F5 - F);
    EXPECT_GE(es5.eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(Variance, Examples) {
  EXPECT_NEAR(variance_estimate(0.8, 10, 2).s2, 0.1, 1e-15);
  EXPECT_EQ(variance_estimate(0.0, 5, 2).s2, 0.0);
  EXPECT_THROW(variance_estimate(1.0, 2, 2), DomainError);
}

TEST(Threshold, Examples) {
  const auto known = NoiseModel::known(Vector::Constant(1, 0.4));
  const auto unknown = NoiseModel::unknown(Vector::Constant(1, 0.1));
  EXPECT_NEAR(exact_cr_threshold(known, 0.9545, 2, 2, 0.0), 6.18008, 1e-5);
  EXPECT_EQ(exact_cr_threshold(known, 0.0, 2, 2, 0.0), 0.0);
  EXPECT_EQ(exact_cr_threshold(unknown, 0.0, 2, 4, 0.01), 0.0);
  EXPECT_NEAR(exact_cr_threshold(unknown, 0.9545, 2, 4, 0.01), 0.41956, 1e-5);
  EXPECT_THROW(exact_cr_threshold(unknown, 0.9545, 2, 2, 0.01), DomainError);
  EXPECT_NEAR(case1().threshold(4), 0.41956, 1e-5);
}

TEST(Membership, Basics) {
  const auto cr = make_design_crspec(case1(), col({1.37, 1.37, 20, 20}));
  const auto m = cr_membership(cr, v2(2.5, 0.5));
  EXPECT_TRUE(m.member);
  EXPECT_NEAR(m.excess, -cr.threshold(), 1e-15);
  for (const auto &setup : {case1(), case2()}) {
    const auto c = make_design_crspec(setup, setup.model.name() == "bod" ? col({1.37, 1.37, 20, 20}) : col({1.63, 10}));
    EXPECT_FALSE(cr_membership(c, setup.p_hat + v2(10, 10)).member);
  }
}

TEST(Membership, LinearModelMatchesEllipsoid) {
  const auto lin = line_model();
  const Design U = col({-1, -0.2, 0.5, 1});
  const RegionSetup setup{lin, v2(1.0, 2.0), NoiseModel::known(Vector::Constant(1, 0.3)), 0.9545,
                          v2(-20, -20), v2(20, 20)};
  const auto cr = make_design_crspec(setup, U);
  const auto ell = linearized_cr(lin, setup.p_hat, U, setup.noise, setup.alpha);
  ASSERT_TRUE(ell.bounded);
  EXPECT_NEAR(ell.c, cr.threshold(), 1e-14);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 0.6);
  int disagree = 0;
  for (int k = 0; k < 1000; ++k) {
    const Vector p = setup.p_hat + v2(nd(rng), nd(rng));
    const double q = ell.quadratic_form(p);
    EXPECT_NEAR(cr.excess(p) + cr.threshold(), q, 1e-10 * std::max(1.0, q));
    if (cr_membership(cr, p).member != ell.contains(p))
      ++disagree;
  }
  EXPECT_EQ(disagree, 0);
}

TEST(Membership, UnknownVarianceLinearizedScale) {
  const auto lin = line_model();
  const Design U = col({-1, 0, 1, 1});
  const auto setup = RegionSetup{lin, v2(0.0, 1.0), NoiseModel::unknown(Vector::Constant(1, 0.1)), 0.9545,
                                 v2(-5, -5), v2(5, 5)};
  const auto ell = linearized_cr(lin, setup.p_hat, U, setup.noise, setup.alpha);
  EXPECT_NEAR(ell.c, make_design_crspec(setup, U).threshold(), 1e-14);
}

TEST(Membership, SingleCrossingPerRay) {
  for (const auto &[setup, U] : {std::pair{case1(), col({1.37, 1.37, 20, 20})}, std::pair{case2(), col({1.63, 10})}}) {
    const auto cr = make_design_crspec(setup, U);
    for (int k = 0; k < 48; ++k) {
      const double th = 2.0 * std::numbers::pi * k / 48.0;
      const Vector d = v2(std::cos(th), std::sin(th));
      int changes = 0;
      bool inside = true;
      for (int s = 1; s <= 2000; ++s) {
        const Vector p = cr.p_hat() + (s * 0.0015) * d;
        if ((p.array() <= cr.box_lower().array()).any() || (p.array() >= cr.box_upper().array()).any())
          break;
        const bool in = cr.excess(p) <= 0.0;
        if (in != inside)
          ++changes;
        inside = in;
      }
      EXPECT_LE(changes, 1) << "ray " << k;
    }
  }
}

TEST(Linearized, BoundaryPointsOnQuadric) {
  const auto setup = case1();
  const auto ell = linearized_cr(setup.model, setup.p_hat, col({1.37, 1.37, 20, 20}), setup.noise, setup.alpha);
  Eigen::SelfAdjointEigenSolver<Matrix> es(ell.M);
  for (int k = 0; k < 36; ++k) {
    const double th = 2.0 * std::numbers::pi * k / 36.0;
    const Vector z = v2(std::cos(th), std::sin(th));
    const Vector p = setup.p_hat +
                     es.eigenvectors() * (z.array() * (ell.c / es.eigenvalues().array()).sqrt()).matrix();
    EXPECT_NEAR(ell.quadratic_form(p), ell.c, 1e-10);
  }
  const auto singular = linearized_cr(setup.model, setup.p_hat, col({0, 0, 0}), setup.noise, setup.alpha);
  EXPECT_FALSE(singular.bounded);
}

TEST(Fit, NoiseFreeAndLinear) {
  const auto bod = builtin_bod();
  const Design U = col({1, 2, 5, 10, 20});
  const auto d = simulate_dataset(bod, v2(2.5, 0.5), U, NoiseModel::known(Vector::Constant(1, 0.1)));
  const Vector p = least_squares_fit(bod, d, v2(2.0, 0.8));
  EXPECT_NEAR(p[0], 2.5, 1e-6);
  EXPECT_NEAR(p[1], 0.5, 1e-6);

  const auto lin = line_model();
  const Design Ul = col({-1, -0.5, 0, 0.5, 1});
  Dataset dl{Ul, Matrix(5, 1), NoiseModel::unknown(Vector::Ones(1))};
  dl.measurements << 0.1, 0.9, 2.2, 2.8, 4.1;
  Matrix Q(5, 2);
  Q.col(0).setOnes();
  Q.col(1) = Ul.col(0);
  const Vector ne = (Q.transpose() * Q).ldlt().solve(Q.transpose() * dl.measurements.col(0));
  const Vector pl = least_squares_fit(lin, dl, v2(0, 0));
  EXPECT_LT((pl - ne).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Fit, NoisyEstimateCentersItsRegion) {
  const auto setup = case1();
  const Design U = col({1.37, 1.37, 20, 20});
  auto d = simulate_dataset(setup.model, setup.p_hat, U, setup.noise);
  const auto e = gaussian_draws(NoiseStream{7, Vector::Constant(1, 0.1)}, 4);
  for (int i = 0; i < 4; ++i)
    d.measurements(i, 0) += e[static_cast<std::size_t>(i)];
  const Vector p = least_squares_fit(setup.model, d, setup.p_hat);
  RegionSetup centered = setup;
  centered.p_hat = p;
  const auto cr = make_noisy_crspec(centered, U, d.measurements);
  const auto m = cr_membership(cr, p);
  EXPECT_TRUE(m.member);
  EXPECT_NEAR(m.excess, -cr.threshold(), 1e-15);
}
