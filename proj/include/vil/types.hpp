#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vil {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed caller input (dimension mismatch, out-of-domain value).
struct InputError : Error {
  using Error::Error;
};

/// A user-supplied callable produced a non-finite or ill-shaped value.
struct EvaluationError : Error {
  using Error::Error;
};

/// A feasibility probe found the set empty.
struct InfeasibleError : Error {
  using Error::Error;
};

/// A boundedness probe found a recession direction.
struct UnboundedError : Error {
  using Error::Error;
};

/// An iterative routine hit its budget; carries the best iterate found.
struct ConvergenceError : Error {
  ConvergenceError(const std::string& what, Vector best, double residual)
      : Error(what), best_iterate(std::move(best)), residual(residual) {}
  Vector best_iterate;
  double residual = 0.0;
};

/// A KKT system could not be solved because of a degenerate active set.
struct DegeneracyError : Error {
  DegeneracyError(const std::string& what, std::vector<std::uint8_t> mask)
      : Error(what), active_mask(std::move(mask)) {}
  std::vector<std::uint8_t> active_mask;
};

/// Regularization escalation failed to produce a solvable system.
struct SingularityError : Error {
  using Error::Error;
};

/// Feasible-point sampling failed within its attempt budget.
struct SamplingError : Error {
  using Error::Error;
};

/// A linear-program or equilibrium subsolver failed.
struct SolverError : Error {
  using Error::Error;
};

/// Network description violates structural requirements.
struct StructureError : Error {
  using Error::Error;
};

/// An origin-destination pair is not connected.
struct ConnectivityError : Error {
  using Error::Error;
};

/// Experiment configuration failed validation.
struct ConfigError : Error {
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

}  // namespace vil
