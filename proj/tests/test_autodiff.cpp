#include "vil/autodiff.hpp"

#include "oracles.hpp"
#include "vil/rng.hpp"

#include <doctest.h>

using namespace vil;
using vil::testing::make_affine_problem;
using vil::testing::random_affine_map;

namespace {

// Scalar clamp problem: F(z; lambda) = z - lambda on [0, 1].
VIProblem clamp_problem() {
  const auto seg = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Zero(1), Vector::Ones(1)));
  VIProblem p;
  p.dim = 1;
  p.lambda_lower = Vector::Constant(1, -5.0);
  p.lambda_upper = Vector::Constant(1, 5.0);
  p.F = [](const Vector& z, const Vector& l) { return Vector(z - l); };
  p.dF_dz = [](const Vector&, const Vector&) {
    return Matrix::Identity(1, 1);
  };
  p.dF_dlambda = [](const Vector&, const Vector&) {
    return Matrix(-Matrix::Identity(1, 1));
  };
  p.omega = [seg](const Vector&) { return seg; };
  return p;
}

struct SolvedPoint {
  Vector z_star;
  ProjectionResult res;
  double r = 0.5;
};

SolvedPoint solve_and_project(const VIProblem& p, const Vector& lambda,
                              double eps = 1e-11) {
  SolverOptions opts;
  opts.eps_proj = 1e-2;
  opts.eps_newton = eps;
  opts.max_iter = 600;
  const SolveTrace t = solve_pn(p, lambda, opts);
  REQUIRE(t.status == SolveStatus::converged);
  SolvedPoint out;
  out.z_star = t.z_star;
  out.r = 0.5;
  const auto set = p.omega(lambda);
  out.res = project(*set, out.z_star - out.r * evaluate_F(p, out.z_star,
                                                          lambda));
  return out;
}

}  // namespace

TEST_CASE("implicit gradient of the interior clamp is one") {
  const VIProblem p = clamp_problem();
  const Vector lambda = Vector::Constant(1, 0.5);
  const SolvedPoint s = solve_and_project(p, lambda);
  GradientRequest req;
  const EquilibriumGradient g =
      grad_implicit(p, lambda, s.z_star, s.res, s.r, req);
  CHECK(g.dz_dlambda(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("implicit gradient vanishes when the bound pins the solution") {
  const VIProblem p = clamp_problem();
  const Vector lambda = Vector::Constant(1, 2.0);
  const SolvedPoint s = solve_and_project(p, lambda);
  CHECK(s.z_star[0] == doctest::Approx(1.0));
  GradientRequest req;
  const EquilibriumGradient g =
      grad_implicit(p, lambda, s.z_star, s.res, s.r, req);
  CHECK(std::abs(g.dz_dlambda(0, 0)) < 1e-10);
}

TEST_CASE("unrolled one-step gradient equals the projection differential") {
  // F(z; a) = z - a converges in one projection step with r = 1; the layer
  // recursion then reproduces dg/dy at y = a.
  const auto box = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Constant(2, -2.0), Vector::Constant(2, 2.0)));
  VIProblem p;
  p.dim = 2;
  p.lambda_lower = Vector::Constant(2, -1.0);
  p.lambda_upper = Vector::Constant(2, 1.0);
  p.F = [](const Vector& z, const Vector& l) { return Vector(z - l); };
  p.dF_dz = [](const Vector&, const Vector&) {
    return Matrix::Identity(2, 2);
  };
  p.dF_dlambda = [](const Vector&, const Vector&) {
    return Matrix(-Matrix::Identity(2, 2));
  };
  p.omega = [box](const Vector&) { return box; };

  Vector a(2);
  a << 0.3, -0.4;  // interior
  SolverOptions opts;
  opts.r0 = 1.0;
  opts.eps_newton = 1e-13;
  const SolveTrace t = solve_projection(p, a, opts, Vector::Zero(2));
  GradientRequest req;
  req.mode = GradMode::unrolled;
  const EquilibriumGradient g = grad_explicit(p, a, t, req);
  // Interior projection: dg/dy = I, so dz*/da = I.
  CHECK((g.dz_dlambda - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() <
        1e-10);
}

TEST_CASE("all three modes agree on strongly monotone instances") {
  Rng rng(307);
  int checked = 0;
  for (int trial = 0; trial < 18 && checked < 6; ++trial) {
    const Index n = 3 + trial % 3;
    const auto set = std::make_shared<const PolyhedralSet>(
        vil::testing::random_polytope(rng, n, 2, trial % 2 == 0));
    const auto map = random_affine_map(rng, n, 2, 0.6, 0.0);
    const VIProblem p = make_affine_problem(
        map, set, Vector::Constant(2, -2.0), Vector::Constant(2, 2.0));
    const Vector lambda = 0.3 * rng.normal_vector(2);

    const SolvedPoint s = solve_and_project(p, lambda);
    // The solution map is differentiable only where the active set is
    // locally stable; skip instances that land on a face boundary.
    bool kink = false;
    const Vector slack = set->A * s.res.z_star - set->b;
    for (Index i = 0; i < set->n_ineq(); ++i) {
      if (slack[i] > -1e-5 && s.res.mu[i] < 1e-5) kink = true;
    }
    if (kink) continue;
    ++checked;
    GradientRequest req;
    const EquilibriumGradient gi =
        grad_implicit(p, lambda, s.z_star, s.res, s.r, req);

    SolverOptions fopts;
    fopts.eps_proj = 1e-2;
    fopts.eps_newton = 1e-10;
    fopts.delta_proj = 1e-7;
    fopts.max_iter = 20000;
    const SolveTrace t = solve_projection(p, lambda, fopts);
    REQUIRE(t.status == SolveStatus::converged);
    const EquilibriumGradient gu = grad_explicit(p, lambda, t, req);

    const EquilibriumGradient gf = grad_fd(p, lambda, fopts, req);

    const double scale = 1.0 + gi.dz_dlambda.cwiseAbs().maxCoeff();
    CHECK((gu.dz_dlambda - gi.dz_dlambda).cwiseAbs().maxCoeff() <=
          1e-6 * scale);
    CHECK((gf.dz_dlambda - gi.dz_dlambda).cwiseAbs().maxCoeff() <=
          1e-3 * scale);
  }
  CHECK(checked >= 4);
}

TEST_CASE("cotangent mode equals cotangent times the full Jacobian") {
  Rng rng(311);
  const auto set = std::make_shared<const PolyhedralSet>(
      vil::testing::random_polytope(rng, 4, 2));
  const auto map = random_affine_map(rng, 4, 3, 0.7, 0.0);
  const VIProblem p = make_affine_problem(
      map, set, Vector::Constant(3, -2.0), Vector::Constant(3, 2.0));
  const Vector lambda = 0.2 * rng.normal_vector(3);
  const SolvedPoint s = solve_and_project(p, lambda);
  const Vector c = rng.normal_vector(4);

  GradientRequest full;
  GradientRequest cot;
  cot.cotangent = c;

  const Matrix Ji =
      grad_implicit(p, lambda, s.z_star, s.res, s.r, full).dz_dlambda;
  const Matrix ri =
      grad_implicit(p, lambda, s.z_star, s.res, s.r, cot).dz_dlambda;
  CHECK((ri - c.transpose() * Ji).cwiseAbs().maxCoeff() < 1e-10);

  SolverOptions fopts;
  fopts.eps_proj = 1e-2;
  fopts.eps_newton = 1e-10;
  fopts.delta_proj = 1e-7;
  fopts.max_iter = 20000;
  const SolveTrace t = solve_projection(p, lambda, fopts);
  const Matrix Ju = grad_explicit(p, lambda, t, full).dz_dlambda;
  const Matrix ru = grad_explicit(p, lambda, t, cot).dz_dlambda;
  CHECK((ru - c.transpose() * Ju).cwiseAbs().maxCoeff() < 1e-10);

  const Matrix Jf = grad_fd(p, lambda, fopts, full).dz_dlambda;
  const Matrix rf = grad_fd(p, lambda, fopts, cot).dz_dlambda;
  CHECK((rf - c.transpose() * Jf).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("truncated unrolling error decays with the tail length") {
  Rng rng(313);
  const auto set = std::make_shared<const PolyhedralSet>(
      vil::testing::random_polytope(rng, 4, 2));
  const auto map = random_affine_map(rng, 4, 2, 0.8);
  const VIProblem p = make_affine_problem(
      map, set, Vector::Constant(2, -2.0), Vector::Constant(2, 2.0));
  const Vector lambda = 0.2 * rng.normal_vector(2);

  const SolvedPoint s = solve_and_project(p, lambda);
  GradientRequest req;
  const Matrix exact =
      grad_implicit(p, lambda, s.z_star, s.res, s.r, req).dz_dlambda;

  double prev_err = std::numeric_limits<double>::infinity();
  int improvements = 0;
  for (int tail : {2, 6, 12, 24, 48}) {
    const Matrix approx =
        grad_unrolled_at_solution(p, lambda, s.z_star, s.res, s.r, tail, req)
            .dz_dlambda;
    const double err = (approx - exact).cwiseAbs().maxCoeff();
    if (err < prev_err || err < 1e-12) ++improvements;
    prev_err = err;
  }
  CHECK(improvements >= 4);
  CHECK(prev_err < 1e-8);
}

TEST_CASE("pinned coordinates have zero sensitivity rows") {
  // Two coordinates: one pinned at the upper bound with a strict multiplier,
  // one interior. Parameters enter only F.
  const auto box = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Zero(2), Vector::Ones(2)));
  VIProblem p;
  p.dim = 2;
  p.lambda_lower = Vector::Constant(2, -5.0);
  p.lambda_upper = Vector::Constant(2, 5.0);
  p.F = [](const Vector& z, const Vector& l) {
    Vector out(2);
    out[0] = z[0] - l[0];  // wants z0 = l0
    out[1] = z[1] - l[1];
    return out;
  };
  p.dF_dz = [](const Vector&, const Vector&) {
    return Matrix::Identity(2, 2);
  };
  p.dF_dlambda = [](const Vector&, const Vector&) {
    return Matrix(-Matrix::Identity(2, 2));
  };
  p.omega = [box](const Vector&) { return box; };

  Vector lambda(2);
  lambda << 3.0, 0.5;  // z0 pinned at 1, z1 interior
  const SolvedPoint s = solve_and_project(p, lambda);
  GradientRequest req;
  const Matrix J =
      grad_implicit(p, lambda, s.z_star, s.res, s.r, req).dz_dlambda;
  CHECK(J.row(0).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(J(1, 1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("finite differences recover a closed-form linear solution map") {
  // Interior solution: z*(lambda) = P^{-1} (C lambda + s0) has an analytic
  // derivative -P^{-1} C ... with F(z) = P z - C lambda - s0.
  Rng rng(317);
  const Index n = 3;
  const auto box = std::make_shared<const PolyhedralSet>(PolyhedralSet::box(
      Vector::Constant(n, -10.0), Vector::Constant(n, 10.0)));
  Matrix P = Matrix::Identity(n, n);
  P(0, 1) = 0.3;
  P(1, 0) = -0.3;
  P(2, 2) = 2.0;
  Matrix C = Matrix::NullaryExpr(n, 2, [&](Index, Index) {
    return rng.normal();
  });
  VIProblem p;
  p.dim = n;
  p.lambda_lower = Vector::Constant(2, -1.0);
  p.lambda_upper = Vector::Constant(2, 1.0);
  p.F = [P, C](const Vector& z, const Vector& l) {
    return Vector(P * z - C * l);
  };
  p.dF_dz = [P](const Vector&, const Vector&) { return P; };
  p.dF_dlambda = [C](const Vector&, const Vector&) { return Matrix(-C); };
  p.omega = [box](const Vector&) { return box; };

  const Vector lambda = 0.3 * rng.normal_vector(2);
  SolverOptions opts;
  opts.eps_proj = 1e-3;
  opts.eps_newton = 1e-11;
  GradientRequest req;
  req.fd_step = 1e-5;
  const Matrix J = grad_fd(p, lambda, opts, req).dz_dlambda;
  const Matrix exact = P.inverse() * C;
  CHECK((J - exact).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("one-sided +5% differences approximate the central result") {
  const VIProblem p = clamp_problem();
  const Vector lambda = Vector::Constant(1, 0.5);
  SolverOptions opts;
  GradientRequest central;
  GradientRequest plus5;
  plus5.fd_one_sided_5pct = true;
  const double gc = grad_fd(p, lambda, opts, central).dz_dlambda(0, 0);
  const double g5 = grad_fd(p, lambda, opts, plus5).dz_dlambda(0, 0);
  CHECK(gc == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(g5 == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("moving-set sensitivities flow through the differential seeds") {
  // Omega(lambda) = [0, lambda]; F(z) = z - 2 pushes to the upper bound, so
  // z*(lambda) = lambda and dz*/dlambda = 1 comes entirely from the set.
  VIProblem p;
  p.dim = 1;
  p.lambda_lower = Vector::Constant(1, 0.5);
  p.lambda_upper = Vector::Constant(1, 1.5);
  p.F = [](const Vector& z, const Vector&) {
    return Vector(z - Vector::Constant(1, 2.0));
  };
  p.dF_dz = [](const Vector&, const Vector&) {
    return Matrix::Identity(1, 1);
  };
  p.dF_dlambda = [](const Vector&, const Vector&) {
    return Matrix::Zero(1, 1);
  };
  p.omega = [](const Vector& l) {
    return std::make_shared<const PolyhedralSet>(
        PolyhedralSet::box(Vector::Zero(1), Vector::Constant(1, l[0])));
  };
  p.omega_sensitivity = [](const Vector&, Index) {
    SetDerivatives sd;
    sd.db = Vector(2);
    sd.db << 0.0, 1.0;  // rows: -z <= 0, z <= lambda
    return sd;
  };

  const Vector lambda = Vector::Constant(1, 1.0);
  const SolvedPoint s = [&] {
    SolverOptions opts;
    opts.eps_proj = 1e-2;
    opts.eps_newton = 1e-12;
    const SolveTrace t = solve_pn(p, lambda, opts);
    SolvedPoint out;
    out.z_star = t.z_star;
    out.r = 0.5;
    out.res = project(*p.omega(lambda),
                      out.z_star - out.r * evaluate_F(p, out.z_star, lambda));
    return out;
  }();
  CHECK(s.z_star[0] == doctest::Approx(1.0));
  GradientRequest req;
  const EquilibriumGradient g =
      grad_implicit(p, lambda, s.z_star, s.res, s.r, req);
  CHECK(g.dz_dlambda(0, 0) == doctest::Approx(1.0).epsilon(1e-8));
}
