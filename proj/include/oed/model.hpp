#pragma once

// Static explicit models y = F(p, u) and their parameter sensitivities.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "oed/errors.hpp"

namespace oed {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

using ParameterVector = Eigen::VectorXd;
using InputVector = Eigen::VectorXd;
using OutputVector = Eigen::VectorXd;

/// Writes F(p, u) into y. Must be a pure function.
using ModelFunction =
    std::function<void(std::span<const double> p, std::span<const double> u, std::span<double> y)>;

/// Writes dF/dp (row-major, n_y x n_p) into jac.
using JacobianFunction =
    std::function<void(std::span<const double> p, std::span<const double> u, std::span<double> jac)>;

/// Immutable description of a static model. Cheap to copy (shared callbacks).
class ModelSpec {
public:
  struct Definition {
    std::string name;
    int n_p = 0;
    int n_u = 0;
    int n_y = 0;
    ModelFunction eval;
    JacobianFunction jacobian; // optional; central differences when empty
    std::map<std::string, double> known_constants;
    std::vector<std::string> parameter_names;
    Vector input_lower; // default experimental bounds
    Vector input_upper;
  };

  explicit ModelSpec(Definition def) : def_(std::make_shared<const Definition>(std::move(def))) {
    const auto &d = *def_;
    if (d.n_p < 1 || d.n_u < 1 || d.n_y < 1)
      throw DimensionError("model '" + d.name + "': dimensions must be positive");
    if (!d.eval)
      throw Error("model '" + d.name + "': missing evaluation function");
    if (d.input_lower.size() != 0 && d.input_lower.size() != d.n_u)
      throw DimensionError("model '" + d.name + "': input bounds have wrong size");
  }

  const std::string &name() const { return def_->name; }
  int n_p() const { return def_->n_p; }
  int n_u() const { return def_->n_u; }
  int n_y() const { return def_->n_y; }
  bool has_analytic_jacobian() const { return static_cast<bool>(def_->jacobian); }
  const std::map<std::string, double> &known_constants() const { return def_->known_constants; }
  const std::vector<std::string> &parameter_names() const { return def_->parameter_names; }
  const Vector &input_lower() const { return def_->input_lower; }
  const Vector &input_upper() const { return def_->input_upper; }

  /// Unchecked evaluation for inner loops; sizes are the caller's responsibility.
  void eval_raw(std::span<const double> p, std::span<const double> u, std::span<double> y) const {
    def_->eval(p, u, y);
  }

  /// Unchecked Jacobian (analytic or central differences), row-major n_y x n_p.
  void jacobian_raw(std::span<const double> p, std::span<const double> u,
                    std::span<double> jac) const {
    if (def_->jacobian) {
      def_->jacobian(p, u, jac);
      return;
    }
    central_difference_jacobian(p, u, jac);
  }

  /// Central differences with step h_j = max(1e-6, 1e-6 |p_j|), independent of any analytic form.
  void central_difference_jacobian(std::span<const double> p, std::span<const double> u,
                                   std::span<double> jac) const {
    const int np = n_p(), ny = n_y();
    std::vector<double> pp(p.begin(), p.end());
    std::vector<double> yp(ny), ym(ny);
    for (int j = 0; j < np; ++j) {
      const double h = std::max(1e-6, 1e-6 * std::abs(p[j]));
      pp[j] = p[j] + h;
      def_->eval(pp, u, yp);
      pp[j] = p[j] - h;
      def_->eval(pp, u, ym);
      pp[j] = p[j];
      for (int i = 0; i < ny; ++i)
        jac[i * np + j] = (yp[i] - ym[i]) / (2.0 * h);
    }
  }

private:
  std::shared_ptr<const Definition> def_;
};

namespace detail {

inline void check_finite(const Eigen::Ref<const Vector> &v, const char *what) {
  if (!v.allFinite())
    throw NonFiniteError(std::string(what) + " contains non-finite entries");
}

inline void check_sizes(const ModelSpec &model, const Eigen::Ref<const Vector> &p,
                        const Eigen::Ref<const Vector> &u) {
  if (p.size() != model.n_p())
    throw DimensionError("parameter vector has size " + std::to_string(p.size()) + ", model '" +
                         model.name() + "' expects " + std::to_string(model.n_p()));
  if (u.size() != model.n_u())
    throw DimensionError("input vector has size " + std::to_string(u.size()) + ", model '" +
                         model.name() + "' expects " + std::to_string(model.n_u()));
}

inline std::span<const double> as_span(const Eigen::Ref<const Vector> &v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

} // namespace detail

/// F(p, u), with dimension and finiteness checks.
inline OutputVector evaluate_model(const ModelSpec &model, const Eigen::Ref<const Vector> &p,
                                   const Eigen::Ref<const Vector> &u) {
  detail::check_sizes(model, p, u);
  detail::check_finite(p, "parameter vector");
  detail::check_finite(u, "input vector");
  OutputVector y(model.n_y());
  model.eval_raw(detail::as_span(p), detail::as_span(u), {y.data(), static_cast<std::size_t>(y.size())});
  if (!y.allFinite())
    throw NonFiniteError("model '" + model.name() + "' produced a non-finite output");
  return y;
}

/// dF/dp as an n_y x n_p matrix.
inline Matrix param_jacobian(const ModelSpec &model, const Eigen::Ref<const Vector> &p,
                             const Eigen::Ref<const Vector> &u) {
  detail::check_sizes(model, p, u);
  detail::check_finite(p, "parameter vector");
  detail::check_finite(u, "input vector");
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> jac(model.n_y(), model.n_p());
  model.jacobian_raw(detail::as_span(p), detail::as_span(u),
                     {jac.data(), static_cast<std::size_t>(jac.size())});
  if (!jac.allFinite())
    throw NonFiniteError("model '" + model.name() + "' produced non-finite sensitivities");
  return jac;
}

/// Biochemical oxygen demand: y = p1 (1 - exp(-p2 u)), u in [0, 20].
inline ModelSpec builtin_bod() {
  ModelSpec::Definition d;
  d.name = "bod";
  d.n_p = 2;
  d.n_u = 1;
  d.n_y = 1;
  d.parameter_names = {"p1", "p2"};
  d.input_lower = Vector::Constant(1, 0.0);
  d.input_upper = Vector::Constant(1, 20.0);
  d.eval = [](std::span<const double> p, std::span<const double> u, std::span<double> y) {
    y[0] = p[0] * (1.0 - std::exp(-p[1] * u[0]));
  };
  d.jacobian = [](std::span<const double> p, std::span<const double> u, std::span<double> jac) {
    const double e = std::exp(-p[1] * u[0]);
    jac[0] = 1.0 - e;
    jac[1] = p[0] * u[0] * e;
  };
  return ModelSpec(std::move(d));
}

/// Step response of b0 (s - p1) / (s + p2)^2, u in [0, 10].
inline ModelSpec builtin_second_order(double b0 = -4.0) {
  if (!std::isfinite(b0))
    throw DomainError("second-order model: b0 must be finite");
  ModelSpec::Definition d;
  d.name = "second-order";
  d.n_p = 2;
  d.n_u = 1;
  d.n_y = 1;
  d.parameter_names = {"p1", "p2"};
  d.known_constants = {{"b0", b0}};
  d.input_lower = Vector::Constant(1, 0.0);
  d.input_upper = Vector::Constant(1, 10.0);
  d.eval = [b0](std::span<const double> p, std::span<const double> u, std::span<double> y) {
    const double p1 = p[0], p2 = p[1], t = u[0];
    if (p1 == 0.0)
      throw DomainError("second-order model is singular at p1 = 0");
    const double e = std::exp(-p2 * t);
    y[0] = b0 * (p1 / (p2 * p2)) * ((p2 * ((p1 + p2) / p1) * t + 1.0) * e - 1.0);
  };
  // Expanded form: y = b0 [ (p1 + p2) t e / p2 + p1 (e - 1) / p2^2 ].
  d.jacobian = [b0](std::span<const double> p, std::span<const double> u, std::span<double> jac) {
    const double p1 = p[0], p2 = p[1], t = u[0];
    if (p1 == 0.0)
      throw DomainError("second-order model is singular at p1 = 0");
    const double e = std::exp(-p2 * t);
    const double p2sq = p2 * p2;
    jac[0] = b0 * (t * e / p2 + (e - 1.0) / p2sq);
    const double d_first = t * e / p2 - (p1 + p2) * t * t * e / p2 - (p1 + p2) * t * e / p2sq;
    const double d_second = -p1 * t * e / p2sq - 2.0 * p1 * (e - 1.0) / (p2sq * p2);
    jac[1] = b0 * (d_first + d_second);
  };
  return ModelSpec(std::move(d));
}

/// Linear-in-parameters model y = Q(u) p with a user-supplied regressor row map (n_y = 1).
inline ModelSpec make_linear_model(std::string name, int n_p, int n_u,
                                   std::function<void(std::span<const double> u, std::span<double> q)> regressor,
                                   Vector input_lower, Vector input_upper) {
  ModelSpec::Definition d;
  d.name = std::move(name);
  d.n_p = n_p;
  d.n_u = n_u;
  d.n_y = 1;
  d.input_lower = std::move(input_lower);
  d.input_upper = std::move(input_upper);
  d.eval = [regressor, n_p](std::span<const double> p, std::span<const double> u, std::span<double> y) {
    double q[16];
    regressor(u, {q, static_cast<std::size_t>(n_p)});
    double s = 0.0;
    for (int j = 0; j < n_p; ++j)
      s += q[j] * p[j];
    y[0] = s;
  };
  d.jacobian = [regressor, n_p](std::span<const double>, std::span<const double> u, std::span<double> jac) {
    regressor(u, jac.first(static_cast<std::size_t>(n_p)));
  };
  if (n_p > 16)
    throw DimensionError("linear model helper supports at most 16 parameters");
  return ModelSpec(std::move(d));
}

/// Look up a built-in model by id ("bod", "second-order").
inline ModelSpec builtin_model(const std::string &id, const std::map<std::string, double> &constants = {}) {
  if (id == "bod")
    return builtin_bod();
  if (id == "second-order") {
    auto it = constants.find("b0");
    return builtin_second_order(it == constants.end() ? -4.0 : it->second);
  }
  throw ConfigError("unknown model id '" + id + "' (expected 'bod' or 'second-order')");
}

} // namespace oed
