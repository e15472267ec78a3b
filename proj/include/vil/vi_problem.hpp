#pragma once

#include "vil/polyhedron.hpp"
#include "vil/types.hpp"

#include <functional>
#include <memory>

namespace vil {

/// Derivatives of the feasible-set description with respect to one parameter
/// coordinate. Empty fields mean zero.
struct SetDerivatives {
  Matrix dA;
  Vector db;
  Matrix dM;
  Vector dq;
  bool is_zero() const {
    return dA.size() == 0 && db.size() == 0 && dM.size() == 0 &&
           dq.size() == 0;
  }
};

/// A parametric variational inequality: find z in Omega(lambda) with
/// <F(z, lambda), v - z> >= 0 for all v in Omega(lambda).
///
/// All fields are set at construction and never mutated afterwards; the
/// callables must be pure. Debug builds spot-check purity by evaluating F
/// twice and comparing.
struct VIProblem {
  Index dim = 0;

  std::function<Vector(const Vector& z, const Vector& lambda)> F;

  /// Analytic Jacobians; when absent, central finite differences are used.
  std::function<Matrix(const Vector& z, const Vector& lambda)> dF_dz;
  std::function<Matrix(const Vector& z, const Vector& lambda)> dF_dlambda;

  /// Feasible-set builder. Implementations typically cache the constructed
  /// set when it does not depend on lambda.
  std::function<std::shared_ptr<const PolyhedralSet>(const Vector& lambda)>
      omega;

  /// d{A,b,M,q}/d(lambda_j); absent means the set does not move with lambda.
  std::function<SetDerivatives(const Vector& lambda, Index j)>
      omega_sensitivity;

  /// Per-coordinate parameter bounds.
  Vector lambda_lower;
  Vector lambda_upper;

  Index lambda_dim() const { return lambda_lower.size(); }
  bool lambda_in_box(const Vector& lambda, double tol = 1e-9) const;
};

struct MonotonicityReport {
  enum class Verdict { strongly_monotone_evidence, monotone_evidence, indefinite };
  double min_sym_eig = 0.0;          // over all probe points
  double cocoercivity_estimate = 0.0;
  int n_probes = 0;
  Verdict verdict = Verdict::monotone_evidence;
};

/// Evaluates F with input validation; names the offending coordinate when the
/// map produces a non-finite value.
Vector evaluate_F(const VIProblem& problem, const Vector& z,
                  const Vector& lambda);

enum class Wrt { z, lambda };

/// Analytic Jacobian when supplied, otherwise central differences with a
/// per-coordinate relative step.
Matrix jacobian_F(const VIProblem& problem, const Vector& z,
                  const Vector& lambda, Wrt wrt);

/// Samples feasible points (Gaussian perturbations of a feasible point,
/// projected back onto the set) and reports eigenvalue evidence for the
/// monotonicity class of F. Deterministic given the seed. Verdicts are
/// advisory evidence, not certificates.
MonotonicityReport probe_monotonicity(const VIProblem& problem,
                                      const Vector& lambda, int n_probes,
                                      std::uint64_t seed);

}  // namespace vil
