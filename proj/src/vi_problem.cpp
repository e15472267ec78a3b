#include "vil/vi_problem.hpp"

#include "vil/projection.hpp"
#include "vil/rng.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace vil {

bool VIProblem::lambda_in_box(const Vector& lambda, double tol) const {
  if (lambda.size() != lambda_dim()) return false;
  for (Index j = 0; j < lambda.size(); ++j) {
    if (lambda[j] < lambda_lower[j] - tol || lambda[j] > lambda_upper[j] + tol)
      return false;
  }
  return true;
}

Vector evaluate_F(const VIProblem& problem, const Vector& z,
                  const Vector& lambda) {
  require(static_cast<Index>(z.size()) == problem.dim,
          "evaluate_F: z has wrong length");
  require(problem.lambda_in_box(lambda),
          "evaluate_F: lambda outside its box");
  Vector out = problem.F(z, lambda);
  if (out.size() != problem.dim) {
    throw EvaluationError("evaluate_F: F returned wrong length");
  }
#ifndef NDEBUG
  // Purity spot check: the map contract forbids hidden state.
  const Vector again = problem.F(z, lambda);
  if ((again - out).cwiseAbs().maxCoeff() != 0.0) {
    throw EvaluationError("evaluate_F: F is not pure (double evaluation differs)");
  }
#endif
  for (Index i = 0; i < out.size(); ++i) {
    if (!std::isfinite(out[i])) {
      throw EvaluationError("evaluate_F: non-finite value at coordinate " +
                            std::to_string(i));
    }
  }
  return out;
}

namespace {

Matrix fd_jacobian(const VIProblem& problem, const Vector& z,
                   const Vector& lambda, Wrt wrt) {
  const Index cols = wrt == Wrt::z ? problem.dim : problem.lambda_dim();
  Matrix J(problem.dim, cols);
  Vector zp = z, zm = z, lp = lambda, lm = lambda;
  for (Index j = 0; j < cols; ++j) {
    if (wrt == Wrt::z) {
      const double h = 1e-6 * (1.0 + std::abs(z[j]));
      zp[j] = z[j] + h;
      zm[j] = z[j] - h;
      J.col(j) = (problem.F(zp, lambda) - problem.F(zm, lambda)) / (2.0 * h);
      zp[j] = z[j];
      zm[j] = z[j];
    } else {
      const double h = 1e-6 * (1.0 + std::abs(lambda[j]));
      lp[j] = lambda[j] + h;
      lm[j] = lambda[j] - h;
      J.col(j) = (problem.F(z, lp) - problem.F(z, lm)) / (2.0 * h);
      lp[j] = lambda[j];
      lm[j] = lambda[j];
    }
  }
  return J;
}

}  // namespace

Matrix jacobian_F(const VIProblem& problem, const Vector& z,
                  const Vector& lambda, Wrt wrt) {
  require(static_cast<Index>(z.size()) == problem.dim,
          "jacobian_F: z has wrong length");
  Matrix J;
  if (wrt == Wrt::z && problem.dF_dz) {
    J = problem.dF_dz(z, lambda);
  } else if (wrt == Wrt::lambda && problem.dF_dlambda) {
    J = problem.dF_dlambda(z, lambda);
  } else {
    J = fd_jacobian(problem, z, lambda, wrt);
  }
  if (!J.allFinite()) {
    throw EvaluationError("jacobian_F: non-finite entries");
  }
  return J;
}

MonotonicityReport probe_monotonicity(const VIProblem& problem,
                                      const Vector& lambda, int n_probes,
                                      std::uint64_t seed) {
  require(n_probes >= 1, "probe_monotonicity: n_probes must be >= 1");
  const auto set = problem.omega(lambda);
  Rng rng(seed);

  // Sampling scale: half widths of the bounding box when known, otherwise a
  // unit ball around the verified feasible point.
  const Vector center = set->feasible_point();
  Vector scale = Vector::Ones(set->dim());
  if (set->bounding_box()) {
    scale = 0.5 * (set->bounding_box()->second - set->bounding_box()->first)
                      .cwiseMax(1e-3);
  }

  MonotonicityReport rep;
  rep.n_probes = n_probes;
  rep.min_sym_eig = std::numeric_limits<double>::infinity();
  rep.cocoercivity_estimate = std::numeric_limits<double>::infinity();

  std::vector<Vector> points;
  int attempts = 0;
  const int max_attempts = 8 * n_probes + 16;
  while (static_cast<int>(points.size()) < n_probes) {
    if (++attempts > max_attempts) {
      throw SamplingError("probe_monotonicity: feasible sampling failed");
    }
    const Vector y = center + scale.cwiseProduct(rng.normal_vector(set->dim()));
    try {
      points.push_back(project(*set, y).z_star);
    } catch (const Error&) {
      // retry with a fresh draw
    }
  }

  double spectral_scale = 0.0;
  for (const Vector& z : points) {
    const Matrix J = jacobian_F(problem, z, lambda, Wrt::z);
    const Matrix S = 0.5 * (J + J.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
    rep.min_sym_eig = std::min(rep.min_sym_eig, eig.eigenvalues().minCoeff());
    spectral_scale =
        std::max(spectral_scale, eig.eigenvalues().cwiseAbs().maxCoeff());
  }
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    const Vector dz = points[i + 1] - points[i];
    const Vector dF = evaluate_F(problem, points[i + 1], lambda) -
                      evaluate_F(problem, points[i], lambda);
    const double denom = dF.squaredNorm();
    if (denom > 1e-14) {
      rep.cocoercivity_estimate =
          std::min(rep.cocoercivity_estimate, dF.dot(dz) / denom);
    }
  }
  if (!std::isfinite(rep.cocoercivity_estimate)) rep.cocoercivity_estimate = 0.0;

  const double tol = 1e-8 * (1.0 + spectral_scale);
  if (rep.min_sym_eig > tol) {
    rep.verdict = MonotonicityReport::Verdict::strongly_monotone_evidence;
  } else if (rep.min_sym_eig < -tol) {
    rep.verdict = MonotonicityReport::Verdict::indefinite;
  } else {
    rep.verdict = MonotonicityReport::Verdict::monotone_evidence;
  }
  return rep;
}

}  // namespace vil
