#include "vil/vi_problem.hpp"

#include "oracles.hpp"
#include "vil/rng.hpp"

#include <doctest.h>

using namespace vil;
using vil::testing::make_affine_problem;
using vil::testing::random_polytope;

namespace {

VIProblem offset_problem(std::shared_ptr<const PolyhedralSet> set) {
  // F(z, lambda) = z - lambda
  VIProblem p;
  p.dim = set->dim();
  p.lambda_lower = Vector::Constant(set->dim(), -10.0);
  p.lambda_upper = Vector::Constant(set->dim(), 10.0);
  p.F = [](const Vector& z, const Vector& l) { return Vector(z - l); };
  p.omega = [set](const Vector&) { return set; };
  return p;
}

}  // namespace

TEST_CASE("evaluate_F identity offset") {
  const auto set = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Constant(2, -5.0), Vector::Constant(2, 5.0)));
  const VIProblem p = offset_problem(set);
  Vector z(2), l(2);
  z << 1, 2;
  l << 1, 2;
  CHECK(evaluate_F(p, z, l).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("evaluate_F validates inputs and output") {
  const auto set = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Constant(2, -5.0), Vector::Constant(2, 5.0)));
  VIProblem p = offset_problem(set);
  CHECK_THROWS_AS(evaluate_F(p, Vector::Zero(3), Vector::Zero(2)),
                  InputError);
  CHECK_THROWS_AS(evaluate_F(p, Vector::Zero(2), Vector::Constant(2, 99.0)),
                  InputError);
  p.F = [](const Vector& z, const Vector&) {
    Vector out = z;
    out[1] = std::numeric_limits<double>::quiet_NaN();
    return out;
  };
  try {
    evaluate_F(p, Vector::Zero(2), Vector::Zero(2));
    FAIL("expected EvaluationError");
  } catch (const EvaluationError& e) {
    CHECK(std::string(e.what()).find("coordinate 1") != std::string::npos);
  }
}

TEST_CASE("random affine F matches the direct matrix-vector oracle") {
  Rng rng(101);
  const auto set = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Constant(4, -3.0), Vector::Constant(4, 3.0)));
  const auto map = vil::testing::random_affine_map(rng, 4, 2);
  const VIProblem p = make_affine_problem(
      map, set, Vector::Constant(2, -5.0), Vector::Constant(2, 5.0));
  for (int trial = 0; trial < 10; ++trial) {
    const Vector z = rng.normal_vector(4);
    const Vector l = rng.normal_vector(2);
    const Vector expected = map.P * z + map.C * l + map.s;
    CHECK((evaluate_F(p, z, l) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("jacobian_F returns identity family for the offset problem") {
  const auto set = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Constant(2, -5.0), Vector::Constant(2, 5.0)));
  const VIProblem p = offset_problem(set);
  const Vector z = Vector::Zero(2), l = Vector::Zero(2);
  CHECK((jacobian_F(p, z, l, Wrt::z) - Matrix::Identity(2, 2))
            .cwiseAbs()
            .maxCoeff() < 1e-8);
  CHECK((jacobian_F(p, z, l, Wrt::lambda) + Matrix::Identity(2, 2))
            .cwiseAbs()
            .maxCoeff() < 1e-8);
}

TEST_CASE("analytic Jacobians match finite differences at random points") {
  Rng rng(103);
  const auto set = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Constant(5, -2.0), Vector::Constant(5, 2.0)));
  const auto map = vil::testing::random_affine_map(rng, 5, 3);
  VIProblem p = make_affine_problem(map, set, Vector::Constant(3, -5.0),
                                    Vector::Constant(3, 5.0));
  for (int trial = 0; trial < 20; ++trial) {
    const Vector z = project(*set, rng.normal_vector(5) * 3.0).z_star;
    const Vector l = rng.normal_vector(3);
    const Matrix analytic = jacobian_F(p, z, l, Wrt::z);
    VIProblem fd_only = p;
    fd_only.dF_dz = nullptr;
    const Matrix fd = jacobian_F(fd_only, z, l, Wrt::z);
    const double scale = 1.0 + analytic.cwiseAbs().maxCoeff();
    CHECK((analytic - fd).cwiseAbs().maxCoeff() <= 1e-4 * scale);
  }
}

TEST_CASE("monotonicity probe verdicts") {
  const auto set = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::box(Vector::Constant(2, -1.0), Vector::Constant(2, 1.0)));
  VIProblem p;
  p.dim = 2;
  p.lambda_lower = Vector(0);
  p.lambda_upper = Vector(0);
  p.omega = [set](const Vector&) { return set; };

  SUBCASE("identity map is strongly monotone") {
    p.F = [](const Vector& z, const Vector&) { return z; };
    const MonotonicityReport rep = probe_monotonicity(p, Vector(0), 8, 3);
    CHECK(rep.verdict ==
          MonotonicityReport::Verdict::strongly_monotone_evidence);
    CHECK(rep.min_sym_eig == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("rotation map is monotone but not strongly") {
    Matrix P(2, 2);
    P << 0, 1, -1, 0;
    p.F = [P](const Vector& z, const Vector&) { return Vector(P * z); };
    p.dF_dz = [P](const Vector&, const Vector&) { return P; };
    const MonotonicityReport rep = probe_monotonicity(p, Vector(0), 8, 3);
    CHECK(rep.verdict == MonotonicityReport::Verdict::monotone_evidence);
    CHECK(std::abs(rep.min_sym_eig) < 1e-9);
  }
  SUBCASE("negated identity is indefinite") {
    p.F = [](const Vector& z, const Vector&) { return Vector(-z); };
    const MonotonicityReport rep = probe_monotonicity(p, Vector(0), 8, 3);
    CHECK(rep.verdict == MonotonicityReport::Verdict::indefinite);
  }
}

TEST_CASE("monotonicity probe is reproducible for a fixed seed") {
  Rng rng(107);
  const auto set = std::make_shared<const PolyhedralSet>(
      vil::testing::random_polytope(rng, 3, 2));
  const auto map = vil::testing::random_affine_map(rng, 3, 1);
  const VIProblem p = make_affine_problem(map, set, Vector::Constant(1, -1.0),
                                          Vector::Constant(1, 1.0));
  const MonotonicityReport a = probe_monotonicity(p, Vector::Zero(1), 6, 99);
  const MonotonicityReport b = probe_monotonicity(p, Vector::Zero(1), 6, 99);
  CHECK(a.min_sym_eig == b.min_sym_eig);
  CHECK(a.cocoercivity_estimate == b.cocoercivity_estimate);
  CHECK(a.verdict == b.verdict);
}
