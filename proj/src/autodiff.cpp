#include "vil/autodiff.hpp"

#include <Eigen/LU>

#include <cmath>

namespace vil {
namespace {

// Differential seeds for the set description, one per lambda coordinate;
// empty when the set does not move with lambda.
std::vector<DiffSeed> set_seeds(const VIProblem& problem,
                                const Vector& lambda) {
  std::vector<DiffSeed> seeds;
  if (!problem.omega_sensitivity) return seeds;
  bool any = false;
  seeds.resize(static_cast<std::size_t>(problem.lambda_dim()));
  for (Index j = 0; j < problem.lambda_dim(); ++j) {
    const SetDerivatives sd = problem.omega_sensitivity(lambda, j);
    if (!sd.is_zero()) {
      any = true;
      DiffSeed& s = seeds[static_cast<std::size_t>(j)];
      s.dA = sd.dA;
      s.db = sd.db;
      s.dM = sd.dM;
      s.dq = sd.dq;
    }
  }
  if (!any) seeds.clear();
  return seeds;
}

// d h / d lambda at one layer: dg/dlambda - r * dg/dy * dF/dlambda.
Matrix layer_dh_dlambda(const ProjectionDifferential& diff, const Matrix& G,
                        double r, const Matrix& dF_dl,
                        const std::vector<DiffSeed>& seeds) {
  Matrix out = -r * (G * dF_dl);
  for (std::size_t j = 0; j < seeds.size(); ++j) {
    out.col(static_cast<Index>(j)) += diff.solve_seed(seeds[j]);
  }
  return out;
}

struct Layer {
  const Vector* z_in;
  const ProjectionResult* res;
  double r;
};

// Runs the Jacobian recursion over the given projection layers, starting
// from a zero Jacobian, in forward (full-Jacobian) or reverse (cotangent)
// order. `uniform` marks layer lists that share one evaluation point, which
// lets the factorization and Jacobians be computed once.
EquilibriumGradient run_unroll(const VIProblem& problem, const Vector& lambda,
                               const std::vector<Layer>& layers, bool uniform,
                               const GradientRequest& req) {
  const Index n = problem.dim;
  const Index m = problem.lambda_dim();
  const std::vector<DiffSeed> seeds = set_seeds(problem, lambda);
  const auto set = problem.omega(lambda);
  DiffOptions dopts;
  dopts.on_degenerate = DegeneratePolicy::drop_weak;  // flagged, not fatal

  EquilibriumGradient out;
  out.mode_used = GradMode::unrolled;

  std::shared_ptr<ProjectionDifferential> shared_diff;
  Matrix shared_J, shared_dF_dl;
  if (uniform) {
    shared_diff =
        std::make_shared<ProjectionDifferential>(*set, *layers[0].res, dopts);
    out.degenerate = shared_diff->degenerate();
    shared_J = jacobian_F(problem, *layers[0].z_in, lambda, Wrt::z);
    shared_dF_dl = jacobian_F(problem, *layers[0].z_in, lambda, Wrt::lambda);
  }

  if (req.cotangent) {
    require(req.cotangent->size() == n, "grad_explicit: cotangent size");
    Vector w = *req.cotangent;
    Vector acc = Vector::Zero(m);
    Vector last_increment = Vector::Zero(m);
    for (std::size_t k = layers.size(); k-- > 0;) {
      const Layer& L = layers[k];
      std::shared_ptr<ProjectionDifferential> local;
      const ProjectionDifferential* diff = shared_diff.get();
      const Matrix* J = &shared_J;
      const Matrix* dF_dl = &shared_dF_dl;
      Matrix Jl, dFl;
      if (!uniform) {
        local = std::make_shared<ProjectionDifferential>(*set, *L.res, dopts);
        out.degenerate = out.degenerate || local->degenerate();
        diff = local.get();
        Jl = jacobian_F(problem, *L.z_in, lambda, Wrt::z);
        dFl = jacobian_F(problem, *L.z_in, lambda, Wrt::lambda);
        J = &Jl;
        dF_dl = &dFl;
      }
      const Vector wG = diff->vjp_y(w);  // (dg/dy)' w
      Vector increment = -L.r * (dF_dl->transpose() * wG);
      if (!seeds.empty()) {
        increment += diff->vjp_seeds(w, seeds);
      }
      acc += increment;
      last_increment = increment;
      w = wG - L.r * (J->transpose() * wG);
    }
    out.dz_dlambda = acc.transpose();
    out.recursion_residual = last_increment.cwiseAbs().maxCoeff();
  } else {
    Matrix Jac = Matrix::Zero(n, m);
    Matrix prev = Jac;
    Matrix G, dh_dz, dh_dl;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const Layer& L = layers[k];
      std::shared_ptr<ProjectionDifferential> local;
      const ProjectionDifferential* diff = shared_diff.get();
      const Matrix* J = &shared_J;
      const Matrix* dF_dl = &shared_dF_dl;
      Matrix Jl, dFl;
      if (!uniform) {
        local = std::make_shared<ProjectionDifferential>(*set, *L.res, dopts);
        out.degenerate = out.degenerate || local->degenerate();
        diff = local.get();
        Jl = jacobian_F(problem, *L.z_in, lambda, Wrt::z);
        dFl = jacobian_F(problem, *L.z_in, lambda, Wrt::lambda);
        J = &Jl;
        dF_dl = &dFl;
      }
      if (!uniform || k == 0) {
        G = diff->jacobian_y();
        dh_dz = G * (Matrix::Identity(n, n) - L.r * (*J));
        dh_dl = layer_dh_dlambda(*diff, G, L.r, *dF_dl, seeds);
      }
      prev = Jac;
      Jac = dh_dz * Jac + dh_dl;
    }
    out.dz_dlambda = Jac;
    out.recursion_residual = (Jac - prev).cwiseAbs().maxCoeff();
  }
  require(out.dz_dlambda.allFinite(), "grad_explicit: non-finite gradient");
  return out;
}

}  // namespace

EquilibriumGradient grad_implicit(const VIProblem& problem,
                                  const Vector& lambda, const Vector& z_star,
                                  const ProjectionResult& res, double r,
                                  const GradientRequest& req) {
  require(r > 0.0, "grad_implicit: r must be positive");
  const Index n = problem.dim;
  require(z_star.size() == n, "grad_implicit: z_star size");
  const double fp_residual = (z_star - res.z_star).cwiseAbs().maxCoeff();
  require(fp_residual <= 1e-2 * (1.0 + z_star.cwiseAbs().maxCoeff()),
          "grad_implicit: res is not a fixed-point projection of z_star");

  const auto set = problem.omega(lambda);
  const ProjectionDifferential diff(*set, res, DiffOptions{});
  const Matrix G = diff.jacobian_y();
  const Matrix J = jacobian_F(problem, z_star, lambda, Wrt::z);
  const Matrix dh_dz = G * (Matrix::Identity(n, n) - r * J);
  const Matrix B = Matrix::Identity(n, n) - dh_dz;

  Eigen::PartialPivLU<Matrix> lu(B);
  const double rcond = lu.rcond();
  EquilibriumGradient out;
  out.mode_used = GradMode::implicit;
  out.condition_estimate =
      rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
  if (!std::isfinite(out.condition_estimate) ||
      out.condition_estimate > 1e12) {
    throw DegeneracyError(
        "grad_implicit: I - dh/dz is singular or ill-conditioned "
        "(estimate " +
            std::to_string(out.condition_estimate) +
            "); use the unrolled mode",
        res.active_mask);
  }

  const Matrix dF_dl = jacobian_F(problem, z_star, lambda, Wrt::lambda);
  const std::vector<DiffSeed> seeds = set_seeds(problem, lambda);
  const Matrix dh_dl = layer_dh_dlambda(diff, G, r, dF_dl, seeds);

  if (req.cotangent) {
    require(req.cotangent->size() == n, "grad_implicit: cotangent size");
    const Vector s =
        Eigen::PartialPivLU<Matrix>(B.transpose()).solve(*req.cotangent);
    out.dz_dlambda = (s.transpose() * dh_dl).eval();
  } else {
    out.dz_dlambda = lu.solve(dh_dl);
  }
  require(out.dz_dlambda.allFinite(), "grad_implicit: non-finite gradient");
  return out;
}

EquilibriumGradient grad_explicit(const VIProblem& problem,
                                  const Vector& lambda,
                                  const SolveTrace& trace,
                                  const GradientRequest& req) {
  bool has_newton = false;
  for (const TraceStep& s : trace.steps) {
    if (s.phase == SolvePhase::newton) has_newton = true;
  }
  if (has_newton) {
    const int tail = req.unroll_tail > 0 ? req.unroll_tail : 256;
    return grad_unrolled_tail(problem, lambda, trace.z_star, tail, req);
  }
  std::vector<Layer> layers;
  for (const TraceStep& s : trace.steps) {
    if (s.phase == SolvePhase::projection) {
      layers.push_back(Layer{&s.z_in, &s.res, s.r});
    }
  }
  if (layers.empty()) {
    // The start was already the solution; realize the limit with
    // fixed-point refinement layers instead.
    const int tail = req.unroll_tail > 0 ? req.unroll_tail : 256;
    return grad_unrolled_tail(problem, lambda, trace.z_star, tail, req);
  }
  if (req.unroll_tail > 0 &&
      req.unroll_tail < static_cast<int>(layers.size())) {
    layers.erase(layers.begin(), layers.end() - req.unroll_tail);
  }
  return run_unroll(problem, lambda, layers, /*uniform=*/false, req);
}

EquilibriumGradient grad_unrolled_tail(const VIProblem& problem,
                                       const Vector& lambda,
                                       const Vector& z_star, int n_layers,
                                       const GradientRequest& req) {
  // Any positive r fixes the solution; contraction of the replay needs r
  // below 2 / lambda_max(dF/dz), bounded here via the max absolute row sum.
  const Matrix J = jacobian_F(problem, z_star, lambda, Wrt::z);
  const double L = J.cwiseAbs().rowwise().sum().maxCoeff();
  const double r = 0.9 / std::max(L, 1e-12);
  const auto set = problem.omega(lambda);
  const Vector y = z_star - r * evaluate_F(problem, z_star, lambda);
  ProjectOptions popts;
  popts.tol = 1e-10 * (1.0 + y.cwiseAbs().maxCoeff());
  ProjectionResult seed;
  seed.active_mask.assign(static_cast<std::size_t>(set->n_ineq()), 0);
  const Vector slack0 = set->A * z_star - set->b;
  for (Index i = 0; i < set->n_ineq(); ++i) {
    seed.active_mask[static_cast<std::size_t>(i)] =
        slack0[i] > -popts.tol_active;
  }
  popts.warm = &seed;
  const ProjectionResult res = project(*set, y, popts);
  return grad_unrolled_at_solution(problem, lambda, z_star, res, r, n_layers,
                                   req);
}

EquilibriumGradient grad_unrolled_at_solution(const VIProblem& problem,
                                              const Vector& lambda,
                                              const Vector& z_star,
                                              const ProjectionResult& res,
                                              double r, int n_layers,
                                              const GradientRequest& req) {
  require(n_layers >= 1, "grad_unrolled_at_solution: need >= 1 layer");
  require(r > 0.0, "grad_unrolled_at_solution: r must be positive");
  std::vector<Layer> layers(static_cast<std::size_t>(n_layers),
                            Layer{&z_star, &res, r});
  return run_unroll(problem, lambda, layers, /*uniform=*/true, req);
}

EquilibriumGradient grad_fd(const VIProblem& problem, const Vector& lambda,
                            const SolverOptions& opts,
                            const GradientRequest& req) {
  require(req.fd_step > 0.0, "grad_fd: fd_step must be positive");
  const Index m = problem.lambda_dim();

  // The merit value bounds the solution error only quadratically near
  // interior solutions, so the forward target must shrink with the step.
  SolverOptions tight = opts;
  tight.eps_newton =
      std::min({opts.eps_newton, 1e-8, 1e-7 * req.fd_step});
  tight.max_iter = std::max(opts.max_iter, 400);

  auto forward = [&](const Vector& l, Index coord) -> Vector {
    const SolveTrace t = solve_pn(problem, l, tight);
    if (t.status == SolveStatus::iteration_limit) {
      throw SolverError("grad_fd: forward solve failed at perturbed lambda "
                        "coordinate " +
                        std::to_string(coord));
    }
    return t.z_star;
  };

  Matrix Jac(problem.dim, m);
  Vector base;
  if (req.fd_one_sided_5pct) base = forward(lambda, -1);
  for (Index j = 0; j < m; ++j) {
    Vector lp = lambda;
    if (req.fd_one_sided_5pct) {
      const double h =
          lambda[j] != 0.0 ? 0.05 * std::abs(lambda[j]) : req.fd_step;
      lp[j] = lambda[j] + h;
      Jac.col(j) = (forward(lp, j) - base) / h;
    } else {
      const double h = req.fd_step * (1.0 + std::abs(lambda[j]));
      Vector lm = lambda;
      lp[j] = lambda[j] + h;
      lm[j] = lambda[j] - h;
      Jac.col(j) = (forward(lp, j) - forward(lm, j)) / (2.0 * h);
    }
  }

  EquilibriumGradient out;
  out.mode_used = GradMode::finite_difference;
  if (req.cotangent) {
    require(req.cotangent->size() == problem.dim, "grad_fd: cotangent size");
    out.dz_dlambda = (req.cotangent->transpose() * Jac).eval();
  } else {
    out.dz_dlambda = Jac;
  }
  return out;
}

}  // namespace vil
