#pragma once

#include "vil/projection.hpp"
#include "vil/vi_problem.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vil {

struct SolverOptions {
  double r0 = 0.5;            // initial step size
  double eps_proj = 1e3;      // projection-phase gap target
  double eps_newton = 1e-3;   // final gap target
  double delta_proj = 1e-3;   // phase-1 decrease-ratio threshold
  double delta_newton = 0.2;  // phase-2 decrease-ratio threshold
  double alpha_down = 0.8;    // step shrink factor
  double alpha_up = 2.0;      // step growth factor
  int max_iter = 150;
  double eta_seed = 1e-8;     // base of the singularity correction ladder
  double projection_tol = 1e-9;
};

enum class SolvePhase { projection, newton };

/// One solver iteration, with enough of the forward computation stored to
/// replay its differentiation later.
struct TraceStep {
  int iter = 0;
  SolvePhase phase = SolvePhase::projection;
  double gap = 0.0;       // merit value after this iterate
  double r = 0.0;         // step size used by this iterate
  double step_norm = 0.0;
  double eta = 0.0;       // regularization applied (newton phase)
  Vector z_in;            // iterate the step started from
  Vector y;               // z_in - r F(z_in)
  ProjectionResult res;   // projection at y
};

enum class SolveStatus { converged, iteration_limit, fell_back };

struct SolveTrace {
  std::vector<TraceStep> steps;
  Vector z_star;
  ProjectionResult final_res;  // projection at z_star - r_final F(z_star)
  double r_final = 0.0;
  double final_gap = 0.0;
  SolveStatus status = SolveStatus::converged;
  std::string note;

  /// Columns: iter,phase,gap,r,step_norm,eta
  std::string csv() const;
};

/// Merit value <F(z), z - v> with v the cost-minimizing feasible point;
/// nonnegative up to LP tolerance and zero exactly at solutions.
double gap(const VIProblem& problem, const Vector& lambda, const Vector& z);

/// One fixed-point step: project z - r F(z) back onto the set.
std::pair<Vector, ProjectionResult> project_step(const VIProblem& problem,
                                                 const Vector& lambda,
                                                 const Vector& z, double r);

/// Adaptive-step projection method: iterates the fixed-point map, shrinking
/// r whenever the gap ratio shows insufficient decrease; stops at
/// opts.eps_newton or the iteration budget.
SolveTrace solve_projection(const VIProblem& problem, const Vector& lambda,
                            const SolverOptions& opts,
                            std::optional<Vector> z0 = {});

/// Root-finding direction for e(z) = z - P(z - r F(z)): solves the linearized
/// system, escalating a diagonal correction eta by factors of 10 until the
/// matrix is solvable. Returns the direction and the eta used.
std::pair<Vector, double> newton_direction(const VIProblem& problem,
                                           const Vector& lambda,
                                           const Vector& z, double r,
                                           double eta_seed);

/// Two-phase method: the projection phase runs to opts.eps_proj, then Newton
/// steps z <- z - d run to opts.eps_newton, growing r when the gap ratio
/// stalls. Diverging Newton phases fall back to the projection phase.
SolveTrace solve_pn(const VIProblem& problem, const Vector& lambda,
                    const SolverOptions& opts, std::optional<Vector> z0 = {});

}  // namespace vil
