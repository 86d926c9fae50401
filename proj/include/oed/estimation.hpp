#pragma once

// Least-squares objectives, Fisher information, linearized and exact confidence regions.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "oed/errors.hpp"
#include "oed/model.hpp"
#include "oed/nlp.hpp"
#include "oed/statistics.hpp"

namespace oed {

/// Sample inputs, one row per sample (N x n_u).
using Design = Matrix;

inline Design design_from_vector(const Vector &u) { return Design(u); }

/// Flattens a single-input design to a vector of length N.
inline Vector design_to_vector(const Design &U) {
  Vector v(U.size());
  for (Eigen::Index i = 0; i < U.rows(); ++i)
    for (Eigen::Index j = 0; j < U.cols(); ++j)
      v[i * U.cols() + j] = U(i, j);
  return v;
}

inline Design design_from_flat(const Vector &v, int n_u) {
  if (n_u < 1 || v.size() % n_u != 0)
    throw DimensionError("flat design length is not a multiple of n_u");
  Design U(v.size() / n_u, n_u);
  for (Eigen::Index i = 0; i < U.rows(); ++i)
    for (Eigen::Index j = 0; j < n_u; ++j)
      U(i, j) = v[i * n_u + j];
  return U;
}

struct NoiseModel {
  enum class Kind { known_sigma, unknown_variance };
  Kind kind = Kind::known_sigma;
  /// Per-output standard deviation. For unknown variance this is the nominal value used at design time.
  Vector sigma = Vector::Ones(1);

  static NoiseModel known(Vector s) { return {Kind::known_sigma, std::move(s)}; }
  static NoiseModel unknown(Vector nominal) { return {Kind::unknown_variance, std::move(nominal)}; }

  bool weighted() const { return kind == Kind::known_sigma; }
};

struct Dataset {
  Design inputs;       // N x n_u
  Matrix measurements; // N x n_y
  NoiseModel noise;

  int size() const { return static_cast<int>(inputs.rows()); }

  void validate(const ModelSpec &model) const {
    if (inputs.rows() < 1)
      throw DimensionError("dataset needs at least one sample");
    if (inputs.cols() != model.n_u())
      throw DimensionError("dataset inputs have " + std::to_string(inputs.cols()) + " columns, model expects " +
                           std::to_string(model.n_u()));
    if (measurements.rows() != inputs.rows() || measurements.cols() != model.n_y())
      throw DimensionError("dataset measurements must be N x n_y");
    if (noise.sigma.size() != model.n_y())
      throw DimensionError("noise sigma must have one entry per output");
    if (!inputs.allFinite() || !measurements.allFinite())
      throw NonFiniteError("dataset contains non-finite entries");
  }
};

/// Noise-free measurements y = F(p, u) at every design row.
inline Dataset simulate_dataset(const ModelSpec &model, const Vector &p, const Design &U, const NoiseModel &noise) {
  Dataset d{U, Matrix(U.rows(), model.n_y()), noise};
  for (Eigen::Index t = 0; t < U.rows(); ++t)
    d.measurements.row(t) = evaluate_model(model, p, U.row(t).transpose()).transpose();
  return d;
}

namespace detail {

inline Vector residual_weights(const NoiseModel &noise, bool weighted) {
  if (!weighted)
    return Vector::Ones(noise.sigma.size());
  Vector w(noise.sigma.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    if (!(noise.sigma[i] > 0.0))
      throw DomainError("weighted residual needs sigma_i > 0");
    w[i] = 1.0 / (noise.sigma[i] * noise.sigma[i]);
  }
  return w;
}

/// Sum_t Sum_i w_i (y_it - F_i(p, u_t))^2 without allocation in the loop.
inline double weighted_sse(const ModelSpec &model, const Design &U, const Matrix &Y, const Vector &w,
                           const double *p) {
  const int ny = model.n_y(), np = model.n_p(), nu = model.n_u();
  std::array<double, 16> ybuf{};
  std::vector<double> big;
  double *y = ybuf.data();
  if (ny > 16) {
    big.resize(static_cast<std::size_t>(ny));
    y = big.data();
  }
  std::array<double, 16> ubuf{};
  double sum = 0.0;
  for (Eigen::Index t = 0; t < U.rows(); ++t) {
    for (int j = 0; j < nu && j < 16; ++j)
      ubuf[static_cast<std::size_t>(j)] = U(t, j);
    model.eval_raw({p, static_cast<std::size_t>(np)}, {ubuf.data(), static_cast<std::size_t>(nu)},
                   {y, static_cast<std::size_t>(ny)});
    for (int i = 0; i < ny; ++i) {
      const double r = Y(t, i) - y[i];
      sum += w[i] * r * r;
    }
  }
  return sum;
}

} // namespace detail

/// J_w (weighted by sigma^-2) or the unweighted J.
inline double residual_objective(const ModelSpec &model, const Dataset &data, const Vector &p, bool weighted) {
  data.validate(model);
  if (p.size() != model.n_p())
    throw DimensionError("parameter vector has wrong size");
  if (!p.allFinite())
    throw NonFiniteError("parameter vector contains non-finite entries");
  if (weighted && data.noise.kind != NoiseModel::Kind::known_sigma)
    throw DomainError("weighted objective requires known sigma");
  const Vector w = detail::residual_weights(data.noise, weighted);
  const double v = detail::weighted_sse(model, data.inputs, data.measurements, w, p.data());
  if (!std::isfinite(v))
    throw NonFiniteError("residual objective is not finite");
  return v;
}

inline Vector residual_gradient(const ModelSpec &model, const Dataset &data, const Vector &p, bool weighted) {
  const Vector w = detail::residual_weights(data.noise, weighted);
  Vector g = Vector::Zero(model.n_p());
  for (Eigen::Index t = 0; t < data.inputs.rows(); ++t) {
    const Vector u = data.inputs.row(t).transpose();
    const Vector y = evaluate_model(model, p, u);
    const Matrix S = param_jacobian(model, p, u);
    for (int i = 0; i < model.n_y(); ++i)
      g -= 2.0 * w[i] * (data.measurements(t, i) - y[i]) * S.row(i).transpose();
  }
  return g;
}

struct FisherInformation {
  Matrix matrix;
  Design design;
};

/// Sum_t S_t' diag(sigma^-2) S_t with S_t = dF/dp at (p, u_t).
inline FisherInformation fisher_information(const ModelSpec &model, const Vector &p, const Design &U,
                                            const Vector &sigma) {
  if (sigma.size() != model.n_y())
    throw DimensionError("sigma must have one entry per output");
  if (U.cols() != model.n_u())
    throw DimensionError("design has wrong number of input columns");
  Vector w(sigma.size());
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (!(sigma[i] > 0.0))
      throw DomainError("Fisher information needs sigma_i > 0");
    w[i] = 1.0 / (sigma[i] * sigma[i]);
  }
  Matrix F = Matrix::Zero(model.n_p(), model.n_p());
  for (Eigen::Index t = 0; t < U.rows(); ++t) {
    const Matrix S = param_jacobian(model, p, U.row(t).transpose());
    F.noalias() += S.transpose() * w.asDiagonal() * S;
  }
  F = 0.5 * (F + F.transpose());
  return {F, U};
}

struct VarianceEstimate {
  double s2 = 0.0;
  int N = 0;
  int n_p = 0;
};

inline VarianceEstimate variance_estimate(double J_hat, int N, int n_p) {
  if (N <= n_p)
    throw DomainError("variance estimate needs N > n_p");
  if (!(J_hat >= 0.0))
    throw DomainError("residual sum must be non-negative");
  return {J_hat / (N - n_p), N, n_p};
}

/// Right-hand side c of the exact region: chi2 quantile for known sigma, n_p s2 F quantile otherwise.
inline double exact_cr_threshold(const NoiseModel &noise, double alpha, int n_p, int N, double s2) {
  if (noise.kind == NoiseModel::Kind::known_sigma)
    return chi2_quantile(alpha, n_p);
  if (N <= n_p)
    throw DomainError("unknown-variance threshold needs N > n_p");
  if (!(s2 >= 0.0))
    throw DomainError("variance must be non-negative");
  return n_p * s2 * f_quantile(alpha, n_p, N - n_p);
}

/// Everything needed to test membership in {p : J(p) - J(p_hat) <= c}.
class ConfidenceRegionSpec {
public:
  ConfidenceRegionSpec(ModelSpec model, Dataset data, Vector p_hat, double alpha, double threshold,
                       Vector box_lower, Vector box_upper, bool data_follows_design = false)
      : model_(std::move(model)), data_(std::move(data)), p_hat_(std::move(p_hat)), alpha_(alpha),
        c_(threshold), lo_(std::move(box_lower)), hi_(std::move(box_upper)),
        follows_design_(data_follows_design) {
    data_.validate(model_);
    if (p_hat_.size() != model_.n_p() || lo_.size() != model_.n_p() || hi_.size() != model_.n_p())
      throw DimensionError("region spec: p_hat and search box must have n_p entries");
    if (!(c_ >= 0.0))
      throw DomainError("region threshold must be non-negative");
    if ((lo_.array() >= hi_.array()).any() || (p_hat_.array() <= lo_.array()).any() ||
        (p_hat_.array() >= hi_.array()).any())
      throw DomainError("search box must strictly contain p_hat");
    weights_ = detail::residual_weights(data_.noise, weighted());
    J_hat_ = sse(p_hat_);
  }

  const ModelSpec &model() const { return model_; }
  const Dataset &dataset() const { return data_; }
  const Vector &p_hat() const { return p_hat_; }
  double alpha() const { return alpha_; }
  double threshold() const { return c_; }
  double J_hat() const { return J_hat_; }
  bool weighted() const { return data_.noise.kind == NoiseModel::Kind::known_sigma; }
  const Vector &box_lower() const { return lo_; }
  const Vector &box_upper() const { return hi_; }
  const Vector &weights() const { return weights_; }
  int n_p() const { return model_.n_p(); }
  /// True when measurements are the noise-free model output at p_hat and move with the design.
  bool data_follows_design() const { return follows_design_; }

  double boundary_tolerance() const { return 1e-9 * std::max(1.0, c_); }

  /// Residual objective (weighted or not according to the noise model).
  double sse(const Vector &p) const {
    return detail::weighted_sse(model_, data_.inputs, data_.measurements, weights_, p.data());
  }

  /// J(p) - J(p_hat) - c; non-positive inside the region. Non-finite model output maps to +inf.
  double excess(const Vector &p) const {
    double v;
    try {
      v = sse(p) - J_hat_ - c_;
    } catch (const DomainError &) {
      return std::numeric_limits<double>::infinity();
    }
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  }

  bool contains(const Vector &p) const { return excess(p) <= boundary_tolerance(); }

  Vector excess_gradient(const Vector &p) const {
    const int ny = model_.n_y(), np = model_.n_p();
    Vector g = Vector::Zero(np);
    Vector y(ny);
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> S(ny, np);
    Vector u(model_.n_u());
    for (Eigen::Index t = 0; t < data_.inputs.rows(); ++t) {
      u = data_.inputs.row(t).transpose();
      model_.eval_raw({p.data(), static_cast<std::size_t>(np)}, {u.data(), static_cast<std::size_t>(u.size())},
                      {y.data(), static_cast<std::size_t>(ny)});
      model_.jacobian_raw({p.data(), static_cast<std::size_t>(np)},
                          {u.data(), static_cast<std::size_t>(u.size())},
                          {S.data(), static_cast<std::size_t>(S.size())});
      for (int i = 0; i < ny; ++i)
        g -= 2.0 * weights_[i] * (data_.measurements(t, i) - y[i]) * S.row(i).transpose();
    }
    return g;
  }

  /// Matrix M of the linearized region (p - p_hat)' M (p - p_hat) <= c, on the scale of the residual objective.
  Matrix quadratic_form_matrix() const {
    Matrix M = Matrix::Zero(n_p(), n_p());
    for (Eigen::Index t = 0; t < data_.inputs.rows(); ++t) {
      const Matrix S = param_jacobian(model_, p_hat_, data_.inputs.row(t).transpose());
      M.noalias() += S.transpose() * weights_.asDiagonal() * S;
    }
    return 0.5 * (M + M.transpose());
  }

  /// d excess / d u for every design entry (row-major over N x n_u) at fixed p.
  /// When the data follow the design, the measurement term moves too (y_m = F(p_hat, u)).
  Vector excess_input_gradient(const Vector &p) const {
    const int nu = model_.n_u(), ny = model_.n_y();
    const auto N = data_.inputs.rows();
    Vector g = Vector::Zero(N * nu);
    Vector yp(ny), yh(ny);
    auto term = [&](const Vector &u, Eigen::Index t) {
      model_.eval_raw({p.data(), static_cast<std::size_t>(n_p())}, {u.data(), static_cast<std::size_t>(nu)},
                      {yp.data(), static_cast<std::size_t>(ny)});
      if (follows_design_)
        model_.eval_raw({p_hat_.data(), static_cast<std::size_t>(n_p())},
                        {u.data(), static_cast<std::size_t>(nu)}, {yh.data(), static_cast<std::size_t>(ny)});
      else
        yh = data_.measurements.row(t).transpose();
      double s = 0.0;
      for (int i = 0; i < ny; ++i)
        s += weights_[i] * (yh[i] - yp[i]) * (yh[i] - yp[i]);
      return s;
    };
    for (Eigen::Index t = 0; t < N; ++t) {
      Vector u = data_.inputs.row(t).transpose();
      for (int j = 0; j < nu; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(u[j]));
        const double uj = u[j];
        u[j] = uj + h;
        const double fp = term(u, t);
        u[j] = uj - h;
        const double fm = term(u, t);
        u[j] = uj;
        g[t * nu + j] = (fp - fm) / (2.0 * h);
      }
    }
    return g;
  }

private:
  ModelSpec model_;
  Dataset data_;
  Vector p_hat_;
  double alpha_;
  double c_;
  Vector lo_, hi_;
  bool follows_design_;
  Vector weights_;
  double J_hat_ = 0.0;
};

struct Membership {
  bool member = false;
  double excess = 0.0;
};

inline Membership cr_membership(const ConfidenceRegionSpec &cr, const Vector &p) {
  if (p.size() != cr.n_p())
    throw DimensionError("probe has wrong size");
  if (!p.allFinite())
    throw NonFiniteError("probe contains non-finite entries");
  const double e = cr.excess(p);
  return {e <= cr.boundary_tolerance(), e};
}

/// Ellipsoid {p : (p - p_hat)' M (p - p_hat) <= c}.
struct LinearizedRegion {
  Vector p_hat;
  Matrix M;
  double c = 0.0;
  bool bounded = false;

  double quadratic_form(const Vector &p) const {
    const Vector d = p - p_hat;
    return d.dot(M * d);
  }
  bool contains(const Vector &p) const { return quadratic_form(p) <= c * (1.0 + 1e-12); }
};

/// Linearized region with M and c on the same scale as the exact region of the same data.
/// Known sigma: M = FIM, c = chi2. Unknown variance: M = S'S, c = n_p s2 F.
inline LinearizedRegion linearized_cr(const ModelSpec &model, const Vector &p_hat, const Design &U,
                                      const NoiseModel &noise, double alpha, double s2 = -1.0) {
  const int N = static_cast<int>(U.rows());
  LinearizedRegion r;
  r.p_hat = p_hat;
  if (noise.kind == NoiseModel::Kind::known_sigma) {
    r.M = fisher_information(model, p_hat, U, noise.sigma).matrix;
    r.c = chi2_quantile(alpha, model.n_p());
  } else {
    r.M = fisher_information(model, p_hat, U, Vector::Ones(model.n_y())).matrix;
    if (s2 < 0.0)
      s2 = noise.sigma.squaredNorm() / static_cast<double>(noise.sigma.size());
    r.c = exact_cr_threshold(noise, alpha, model.n_p(), N, s2);
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(r.M);
  r.bounded = es.eigenvalues().minCoeff() > 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff());
  return r;
}

/// Shared construction of the design-time region: data = F(p_hat, U), unknown variance uses s2 := sigma^2.
struct RegionSetup {
  ModelSpec model;
  Vector p_hat;
  NoiseModel noise;
  double alpha = 0.9545;
  Vector box_lower; // empty: [p_hat/10, 10 p_hat]
  Vector box_upper;

  std::pair<Vector, Vector> search_box() const {
    if (box_lower.size() == p_hat.size() && box_upper.size() == p_hat.size())
      return {box_lower, box_upper};
    Vector lo(p_hat.size()), hi(p_hat.size());
    for (Eigen::Index j = 0; j < p_hat.size(); ++j) {
      const double a = p_hat[j] / 10.0, b = p_hat[j] * 10.0;
      lo[j] = std::min(a, b);
      hi[j] = std::max(a, b);
      if (p_hat[j] == 0.0) {
        lo[j] = -1.0;
        hi[j] = 1.0;
      }
    }
    return {lo, hi};
  }

  double design_s2() const { return noise.sigma.squaredNorm() / static_cast<double>(noise.sigma.size()); }

  double threshold(int N) const { return exact_cr_threshold(noise, alpha, model.n_p(), N, design_s2()); }
};

inline ConfidenceRegionSpec make_design_crspec(const RegionSetup &setup, const Design &U) {
  auto [lo, hi] = setup.search_box();
  Dataset d = simulate_dataset(setup.model, setup.p_hat, U, setup.noise);
  const double c = setup.threshold(static_cast<int>(U.rows()));
  return ConfidenceRegionSpec(setup.model, std::move(d), setup.p_hat, setup.alpha, c, lo, hi, true);
}

/// Same thresholds as the design-time region, but with measured (noisy) data and the nominal center.
inline ConfidenceRegionSpec make_noisy_crspec(const RegionSetup &setup, const Design &U, const Matrix &measurements) {
  auto [lo, hi] = setup.search_box();
  Dataset d{U, measurements, setup.noise};
  const double c = setup.threshold(static_cast<int>(U.rows()));
  return ConfidenceRegionSpec(setup.model, std::move(d), setup.p_hat, setup.alpha, c, lo, hi, false);
}

struct FitSettings {
  int n_starts = 8;
  std::uint64_t seed = 1;
  Vector box_lower; // empty: unbounded fit, starts drawn from p0 -/+ max(1, |p0|)
  Vector box_upper;
  NlpTolerances tolerances{1e-10, 1e-10, 1e-14, 300, true};
};

/// Least-squares estimate by multistart SQP from p0 and low-discrepancy points in the fit box.
inline Vector least_squares_fit(const ModelSpec &model, const Dataset &data, const Vector &p0,
                                const FitSettings &settings = {}) {
  data.validate(model);
  if (p0.size() != model.n_p() || !p0.allFinite())
    throw DomainError("least_squares_fit: start point must be finite with n_p entries");
  const bool weighted = data.noise.kind == NoiseModel::Kind::known_sigma;
  const Vector w = detail::residual_weights(data.noise, weighted);
  Vector lo = settings.box_lower, hi = settings.box_upper;
  const bool bounded = lo.size() == p0.size() && hi.size() == p0.size();
  if (!bounded) {
    const Vector r = p0.cwiseAbs().cwiseMax(1.0);
    lo = p0 - r;
    hi = p0 + r;
  }
  NlpProblem prob;
  prob.n = model.n_p();
  prob.objective = [&](const Vector &p) {
    try {
      return detail::weighted_sse(model, data.inputs, data.measurements, w, p.data());
    } catch (const DomainError &) {
      return std::numeric_limits<double>::infinity();
    }
  };
  prob.gradient = [&](const Vector &p) { return residual_gradient(model, data, p, weighted); };
  if (bounded) {
    prob.lower = lo;
    prob.upper = hi;
  }
  MultistartResult ms;
  try {
    ms = solve_multistart(prob, lo, hi, settings.n_starts, settings.seed, settings.tolerances, {p0});
  } catch (const SolverError &e) {
    throw SolverError(std::string("least_squares_fit: ") + e.what());
  }
  return ms.best.x;
}

} // namespace oed
