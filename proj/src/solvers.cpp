#include "vil/solvers.hpp"

#include "vil/lp.hpp"

#include <Eigen/LU>

#include <cmath>
#include <limits>
#include <sstream>

namespace vil {
namespace {

Vector min_cost_point(const PolyhedralSet& set, const Vector& cost) {
  if (set.is_simplex_product()) {
    Vector v = Vector::Zero(set.dim());
    const auto& blocks = set.simplex_blocks();
    for (Index r = 0; r < set.n_eq(); ++r) {
      const auto& cols = blocks[static_cast<std::size_t>(r)];
      int best = cols.front();
      for (int j : cols) {
        if (cost[j] < cost[best]) best = j;  // ties keep the lowest index
      }
      v[best] = set.q[r];
    }
    return v;
  }
  const lp::Result r = lp::solve(cost, set.A, set.b, set.M, set.q);
  if (r.status != lp::Status::optimal) {
    throw SolverError("gap: merit LP did not solve");
  }
  return r.x;
}

double gap_unchecked(const VIProblem& problem, const PolyhedralSet& set,
                     const Vector& lambda, const Vector& z) {
  const Vector Fz = evaluate_F(problem, z, lambda);
  const Vector v = min_cost_point(set, Fz);
  return Fz.dot(z - v);
}

struct PhaseState {
  Vector z;
  double m = 0.0;  // current gap
  double r = 0.0;
  int k = 0;       // global iteration counter
  Vector z_best;
  double m_best = std::numeric_limits<double>::infinity();
};

void note_best(PhaseState& st) {
  if (st.m < st.m_best) {
    st.m_best = st.m;
    st.z_best = st.z;
  }
}

// Shared projection phase: iterate to `target` within the remaining budget.
void run_projection_phase(const VIProblem& problem, const PolyhedralSet& set,
                          const Vector& lambda, const SolverOptions& opts,
                          double target, PhaseState& st, SolveTrace& trace) {
  const ProjectionResult* warm = nullptr;
  while (st.m > target && st.k < opts.max_iter) {
    const Vector Fz = evaluate_F(problem, st.z, lambda);
    const Vector y = st.z - st.r * Fz;
    ProjectOptions popts;
    popts.tol = opts.projection_tol * (1.0 + y.cwiseAbs().maxCoeff());
    popts.warm = warm;
    ProjectionResult res = project(set, y, popts);
    const Vector z_next = res.z_star;
    const double m_next = gap_unchecked(problem, set, lambda, z_next);

    TraceStep step;
    step.iter = st.k;
    step.phase = SolvePhase::projection;
    step.gap = m_next;
    step.r = st.r;
    step.step_norm = (z_next - st.z).norm();
    step.z_in = st.z;
    step.y = y;
    step.res = std::move(res);
    trace.steps.push_back(std::move(step));
    warm = &trace.steps.back().res;

    if (st.m > 0.0 && m_next / st.m >= 1.0 - opts.delta_proj) {
      st.r *= opts.alpha_down;
    }
    st.z = z_next;
    st.m = m_next;
    note_best(st);
    ++st.k;
  }
}

void finish_trace(const VIProblem& problem, const PolyhedralSet& set,
                  const Vector& lambda, const SolverOptions& opts,
                  PhaseState& st, SolveTrace& trace, double final_target) {
  const bool z_feasible =
      set.contains(st.z, 1e-7 * (1.0 + st.z.cwiseAbs().maxCoeff()));
  if (st.m_best < st.m || !z_feasible) {
    st.z = st.z_best;
    st.m = st.m_best;
  }
  trace.z_star = st.z;
  trace.final_gap = st.m;
  trace.r_final = st.r;
  trace.status = st.m <= final_target ? SolveStatus::converged
                                      : SolveStatus::iteration_limit;
  const Vector y =
      st.z - st.r * evaluate_F(problem, st.z, lambda);
  ProjectOptions popts;
  popts.tol = opts.projection_tol * (1.0 + y.cwiseAbs().maxCoeff());
  trace.final_res = project(set, y, popts);
}

}  // namespace

std::string SolveTrace::csv() const {
  std::ostringstream out;
  out << "iter,phase,gap,r,step_norm,eta\n";
  out.precision(12);
  for (const TraceStep& s : steps) {
    out << s.iter << ','
        << (s.phase == SolvePhase::projection ? "projection" : "newton") << ','
        << s.gap << ',' << s.r << ',' << s.step_norm << ',' << s.eta << '\n';
  }
  return out.str();
}

double gap(const VIProblem& problem, const Vector& lambda, const Vector& z) {
  const auto set = problem.omega(lambda);
  require(set->contains(z, 1e-6), "gap: point is not feasible");
  return gap_unchecked(problem, *set, lambda, z);
}

std::pair<Vector, ProjectionResult> project_step(const VIProblem& problem,
                                                 const Vector& lambda,
                                                 const Vector& z, double r) {
  require(r > 0.0, "project_step: r must be positive");
  const auto set = problem.omega(lambda);
  const Vector y = z - r * evaluate_F(problem, z, lambda);
  ProjectionResult res = project(*set, y);
  Vector z_next = res.z_star;
  return {std::move(z_next), std::move(res)};
}

SolveTrace solve_projection(const VIProblem& problem, const Vector& lambda,
                            const SolverOptions& opts,
                            std::optional<Vector> z0) {
  const auto set = problem.omega(lambda);
  SolveTrace trace;
  PhaseState st;
  st.z = z0 ? *z0 : project(*set, Vector::Zero(set->dim())).z_star;
  require(set->contains(st.z, 1e-6), "solve_projection: z0 is not feasible");
  st.m = gap_unchecked(problem, *set, lambda, st.z);
  st.r = opts.r0;
  note_best(st);
  run_projection_phase(problem, *set, lambda, opts, opts.eps_newton, st,
                       trace);
  finish_trace(problem, *set, lambda, opts, st, trace, opts.eps_newton);
  return trace;
}

std::pair<Vector, double> newton_direction(const VIProblem& problem,
                                           const Vector& lambda,
                                           const Vector& z, double r,
                                           double eta_seed) {
  require(r > 0.0, "newton_direction: r must be positive");
  const auto set = problem.omega(lambda);
  const Vector Fz = evaluate_F(problem, z, lambda);
  const Vector y = z - r * Fz;
  const ProjectionResult res = project(*set, y);
  const Vector e = z - res.z_star;
  if (e.cwiseAbs().maxCoeff() == 0.0) {
    return {Vector::Zero(set->dim()), 0.0};
  }

  DiffOptions dopts;
  dopts.on_degenerate = DegeneratePolicy::drop_weak;
  const Matrix dgdy = ProjectionDifferential(*set, res, dopts).jacobian_y();
  const Matrix J = jacobian_F(problem, z, lambda, Wrt::z);
  const Index n = set->dim();
  const Matrix H =
      Matrix::Identity(n, n) - dgdy * (Matrix::Identity(n, n) - r * J);

  const double scale = 1.0 + e.cwiseAbs().maxCoeff();
  // A direction far beyond the iterate scale cannot be a usable step on a
  // bounded set; count it as unsolvable and keep escalating.
  const double step_cap = 1e3 * (1.0 + z.cwiseAbs().maxCoeff());
  double eta = 0.0;
  while (true) {
    Matrix Hreg = H;
    Hreg.diagonal().array() += eta;
    const Vector d = Eigen::PartialPivLU<Matrix>(Hreg).solve(e);
    if (d.allFinite() &&
        (Hreg * d - e).cwiseAbs().maxCoeff() <= 1e-8 * scale &&
        d.cwiseAbs().maxCoeff() <= step_cap) {
      return {d, eta};
    }
    eta = eta == 0.0 ? eta_seed : eta * 10.0;
    if (eta > 1e-2) {
      throw SingularityError(
          "newton_direction: eta escalation exceeded 1e-2");
    }
  }
}

SolveTrace solve_pn(const VIProblem& problem, const Vector& lambda,
                    const SolverOptions& opts, std::optional<Vector> z0) {
  const auto set = problem.omega(lambda);
  SolveTrace trace;
  PhaseState st;
  st.z = z0 ? *z0 : project(*set, Vector::Zero(set->dim())).z_star;
  require(set->contains(st.z, 1e-6), "solve_pn: z0 is not feasible");
  st.m = gap_unchecked(problem, *set, lambda, st.z);
  st.r = opts.r0;
  note_best(st);

  run_projection_phase(problem, *set, lambda, opts, opts.eps_proj, st, trace);
  const double phase1_exit = std::max(st.m, opts.eps_newton);

  // Raw Newton iterates can leave the set, where the merit value is
  // meaningless (it vanishes at any root of F). Iteration continues from
  // the raw point, but progress is measured and candidates are recorded at
  // the feasible representative (the projection, which is the identity once
  // converged). Newton attempts are gated: a diverging trial step is
  // discarded in favor of a projection step, and the next attempt waits
  // until the gap has halved, so the trajectory stays on the projection
  // method until the local convergence basin is reached.
  bool gated = false;
  double newton_gate = std::numeric_limits<double>::infinity();
  while (st.m > opts.eps_newton && st.k < opts.max_iter) {
    bool newton_step = st.m <= newton_gate;
    Vector z_next, z_meas;
    double m_next = 0.0, eta = 0.0, step_norm = 0.0;
    if (newton_step) {
      Vector d;
      try {
        std::tie(d, eta) =
            newton_direction(problem, lambda, st.z, st.r, opts.eta_seed);
      } catch (const SingularityError&) {
        newton_step = false;
      }
      if (newton_step) {
        z_next = st.z - d;
        z_meas = z_next;
        if (!set->contains(z_next,
                           1e-9 * (1.0 + z_next.cwiseAbs().maxCoeff()))) {
          ProjectOptions popts;
          popts.tol =
              opts.projection_tol * (1.0 + z_next.cwiseAbs().maxCoeff());
          z_meas = project(*set, z_next, popts).z_star;
        }
        m_next = gap_unchecked(problem, *set, lambda, z_meas);
        if (!std::isfinite(m_next) ||
            m_next > std::max({1.5 * st.m, 10.0 * opts.eps_newton,
                               10.0 * phase1_exit})) {
          newton_step = false;
        }
        step_norm = d.norm();
      }
      if (!newton_step) {
        newton_gate = 0.5 * st.m;
        gated = true;
      }
    }
    TraceStep step;
    step.z_in = st.z;
    step.y = st.z - st.r * evaluate_F(problem, st.z, lambda);
    if (!newton_step) {
      // Projection step under the phase-1 ratio rule.
      ProjectOptions popts;
      popts.tol = opts.projection_tol * (1.0 + step.y.cwiseAbs().maxCoeff());
      step.res = project(*set, step.y, popts);
      z_next = step.res.z_star;
      z_meas = z_next;
      m_next = gap_unchecked(problem, *set, lambda, z_next);
      step_norm = (z_next - st.z).norm();
      eta = 0.0;
    }
    step.iter = st.k;
    step.phase = newton_step ? SolvePhase::newton : SolvePhase::projection;
    step.gap = m_next;
    step.r = st.r;
    step.step_norm = step_norm;
    step.eta = eta;
    trace.steps.push_back(std::move(step));
    ++st.k;

    if (st.m > 0.0) {
      const double ratio = m_next / st.m;
      if (newton_step) {
        // Grow r on slow-but-real decrease; an outright increase means the
        // step size is hurting, so back off instead.
        if (ratio >= 1.0) {
          st.r *= opts.alpha_down;
        } else if (ratio >= 1.0 - opts.delta_newton) {
          st.r *= opts.alpha_up;
        }
      } else if (ratio >= 1.0 - opts.delta_proj) {
        st.r *= opts.alpha_down;
      }
    }
    st.z = z_next;
    st.m = m_next;
    // Candidate solutions are the feasible representatives.
    if (st.m < st.m_best) {
      st.m_best = st.m;
      st.z_best = z_meas;
    }
  }

  finish_trace(problem, *set, lambda, opts, st, trace, opts.eps_newton);
  if (gated) {
    trace.note = "diverging newton trials discarded; projection steps taken";
    if (trace.status == SolveStatus::converged) {
      trace.status = SolveStatus::fell_back;
    }
  }
  return trace;
}

}  // namespace vil
