#pragma once

#include <stdexcept>
#include <string>

namespace oed {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Vector or matrix sizes disagree with the owning model or dataset.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// Input outside the mathematical domain of an operation (p1 = 0, alpha >= 1, N <= n_p, ...).
class DomainError : public Error {
public:
  using Error::Error;
};

/// A model or objective produced NaN/inf.
class NonFiniteError : public Error {
public:
  using Error::Error;
};

/// Malformed or inconsistent run configuration.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// An optimizer failed to produce an acceptable point.
class SolverError : public Error {
public:
  using Error::Error;
};

/// A post-hoc optimality or feasibility check rejected a solution.
class VerificationError : public Error {
public:
  using Error::Error;
};

/// A lower-level optimum touched the parameter search box, so the box is too small.
class BoxContactError : public Error {
public:
  using Error::Error;
};

} // namespace oed
