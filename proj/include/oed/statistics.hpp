#pragma once

// Chi-squared and F quantiles, and seed-reproducible Gaussian noise.
//
// Noise algorithm identifiers (stable across runs and platforms):
//   substream seed = splitmix64(splitmix64(seed) ^ (index + 1) * 0x9E3779B97F4A7C15)
//   engine         = std::mt19937_64 (sequence fixed by the C++ standard)
//   uniforms       = top 53 bits of an engine word, mapped to (0, 1)
//   normals        = Box-Muller, both variates used (cos branch first)

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "oed/errors.hpp"
#include "oed/model.hpp"

namespace oed {

/// Confidence level plus degrees of freedom for a quantile lookup.
struct QuantileRequest {
  double alpha = 0.9545;
  int dof1 = 1;
  int dof2 = 1; // unused for chi-squared

  void validate() const {
    if (!(alpha >= 0.0 && alpha < 1.0))
      throw DomainError("confidence level must satisfy 0 <= alpha < 1");
    if (dof1 < 1 || dof2 < 1)
      throw DomainError("degrees of freedom must be >= 1");
  }
};

inline double chi2_cdf(double x, int dof) {
  if (x <= 0.0)
    return 0.0;
  return boost::math::gamma_p(0.5 * dof, 0.5 * x);
}

inline double chi2_pdf(double x, int dof) {
  if (x <= 0.0)
    return 0.0;
  return 0.5 * boost::math::gamma_p_derivative(0.5 * dof, 0.5 * x);
}

inline double f_cdf(double x, int dof1, int dof2) {
  if (x <= 0.0)
    return 0.0;
  const double d1 = dof1, d2 = dof2;
  return boost::math::ibeta(0.5 * d1, 0.5 * d2, d1 * x / (d1 * x + d2));
}

inline double f_pdf(double x, int dof1, int dof2) {
  if (x <= 0.0)
    return 0.0;
  const double d1 = dof1, d2 = dof2;
  const double den = d1 * x + d2;
  return boost::math::ibeta_derivative(0.5 * d1, 0.5 * d2, d1 * x / den) * d1 * d2 / (den * den);
}

namespace detail {

/// Solves cdf(x) = alpha for x >= 0: geometric bracketing, then Newton steps kept inside the bracket.
template <class Cdf, class Pdf>
double invert_cdf(Cdf cdf, Pdf pdf, double alpha, double tol = 1e-10) {
  if (alpha == 0.0)
    return 0.0;
  double lo = 0.0, hi = 1.0;
  while (cdf(hi) < alpha) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e300)
      throw DomainError("quantile bracket exceeded double range");
  }
  double x = 0.5 * (lo + hi);
  for (int it = 0; it < 500; ++it) {
    const double f = cdf(x) - alpha;
    if (f == 0.0)
      return x;
    if (f < 0.0)
      lo = x;
    else
      hi = x;
    const double d = pdf(x);
    double next = (d > 0.0 && std::isfinite(d)) ? x - f / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi))
      next = 0.5 * (lo + hi);
    const double step = std::abs(next - x);
    x = next;
    if (step <= tol || hi - lo <= tol)
      return x;
  }
  return x;
}

} // namespace detail

/// x with P(chi2_dof <= x) = alpha.
inline double chi2_quantile(double alpha, int dof) {
  QuantileRequest{alpha, dof, 1}.validate();
  return detail::invert_cdf([dof](double x) { return chi2_cdf(x, dof); },
                            [dof](double x) { return chi2_pdf(x, dof); }, alpha);
}

/// x with P(F_{dof1,dof2} <= x) = alpha.
inline double f_quantile(double alpha, int dof1, int dof2) {
  QuantileRequest{alpha, dof1, dof2}.validate();
  return detail::invert_cdf([=](double x) { return f_cdf(x, dof1, dof2); },
                            [=](double x) { return f_pdf(x, dof1, dof2); }, alpha);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Seed plus per-output standard deviations. Substreams give independent per-trial sequences.
struct NoiseStream {
  std::uint64_t seed = 0;
  Vector sigma = Vector::Zero(1);
  std::uint64_t substream_index = 0;

  NoiseStream substream(std::uint64_t index) const {
    NoiseStream s = *this;
    s.substream_index = index;
    return s;
  }

  std::uint64_t engine_seed() const {
    return splitmix64(splitmix64(seed) ^ ((substream_index + 1) * 0x9E3779B97F4A7C15ull));
  }
};

/// Stateful standard-normal generator following the algorithm documented at the top of this file.
class GaussianGenerator {
public:
  explicit GaussianGenerator(std::uint64_t engine_seed) : engine_(engine_seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

private:
  double uniform_open() {
    // (k + 0.5) / 2^53 lies strictly inside (0, 1)
    const std::uint64_t k = engine_() >> 11;
    return (static_cast<double>(k) + 0.5) * 0x1.0p-53;
  }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// count draws; draw k is scaled by sigma[k mod n_y], so consecutive groups of n_y form one output vector.
inline std::vector<double> gaussian_draws(const NoiseStream &stream, std::size_t count) {
  const auto ny = static_cast<std::size_t>(stream.sigma.size());
  if (ny == 0)
    throw DimensionError("noise stream needs at least one standard deviation");
  for (Eigen::Index i = 0; i < stream.sigma.size(); ++i)
    if (!(stream.sigma[i] >= 0.0) || !std::isfinite(stream.sigma[i]))
      throw DomainError("noise standard deviations must be finite and non-negative");
  GaussianGenerator gen(stream.engine_seed());
  std::vector<double> out(count);
  for (std::size_t k = 0; k < count; ++k)
    out[k] = stream.sigma[static_cast<Eigen::Index>(k % ny)] * gen.next();
  return out;
}

} // namespace oed
