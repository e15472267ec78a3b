#pragma once

#include "vil/solvers.hpp"

#include <optional>

namespace vil {

enum class GradMode { unrolled, implicit, finite_difference };

struct GradientRequest {
  GradMode mode = GradMode::implicit;
  /// When set, the result is the row d<cotangent, z*>/dlambda instead of the
  /// full Jacobian.
  std::optional<Vector> cotangent;
  double fd_step = 1e-5;  // relative
  /// Unrolled mode: number of trailing projection layers to differentiate
  /// through. <= 0 means the full stored trajectory (projection solves) or a
  /// default stack of fixed-point refinement layers (after Newton solves).
  int unroll_tail = -1;
  /// Finite differences: one-sided +5% perturbation instead of central.
  bool fd_one_sided_5pct = false;
};

struct EquilibriumGradient {
  /// n x m Jacobian, or 1 x m row in cotangent mode.
  Matrix dz_dlambda;
  GradMode mode_used = GradMode::implicit;
  double condition_estimate = 0.0;   // implicit mode: cond of I - dh/dz
  double recursion_residual = 0.0;   // unrolled mode: last-layer increment
  bool degenerate = false;
};

/// Implicit differentiation of the fixed point z* = P(z* - r F(z*)): solves
/// the linearized fixed-point system for dz*/dlambda. `res` must be the
/// projection result at z* - r F(z*) for the given r (any r > 0 is valid).
/// Singular or ill-conditioned systems (estimate above 1e12) raise
/// DegeneracyError; unrolled mode is the recommended fallback.
EquilibriumGradient grad_implicit(const VIProblem& problem,
                                  const Vector& lambda, const Vector& z_star,
                                  const ProjectionResult& res, double r,
                                  const GradientRequest& req);

/// Backward propagation through the stored projection iterations, starting
/// the recursion from a zero Jacobian. After a Newton solve the trajectory is
/// replaced by unroll_tail fixed-point refinement layers evaluated at the
/// solution. Cotangent mode runs the same recursion in reverse on the
/// transposed maps.
EquilibriumGradient grad_explicit(const VIProblem& problem,
                                  const Vector& lambda,
                                  const SolveTrace& trace,
                                  const GradientRequest& req);

/// Fixed-point refinement replay: runs the Jacobian recursion over n_layers
/// identical projection layers evaluated at the solution. This is the
/// unrolled-mode entry point when a forward trace in the same space is not
/// available (e.g. after a Newton solve, or when the gradient is taken on a
/// different formulation than the forward solve used).
EquilibriumGradient grad_unrolled_at_solution(const VIProblem& problem,
                                              const Vector& lambda,
                                              const Vector& z_star,
                                              const ProjectionResult& res,
                                              double r, int n_layers,
                                              const GradientRequest& req);

/// Convenience wrapper: picks a contraction-safe r from the Jacobian row
/// sums, projects the fixed point at that r, and replays n_layers
/// refinement layers.
EquilibriumGradient grad_unrolled_tail(const VIProblem& problem,
                                       const Vector& lambda,
                                       const Vector& z_star, int n_layers,
                                       const GradientRequest& req);

/// Central finite differences of the full forward solve per lambda
/// coordinate (or the one-sided +5% variant). The forward solver is
/// tightened so solver noise stays well below the step effects.
EquilibriumGradient grad_fd(const VIProblem& problem, const Vector& lambda,
                            const SolverOptions& opts,
                            const GradientRequest& req);

}  // namespace vil
