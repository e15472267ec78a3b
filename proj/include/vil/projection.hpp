#pragma once

#include "vil/polyhedron.hpp"
#include "vil/types.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <Eigen/SparseLU>

#include <memory>
#include <optional>
#include <vector>

namespace vil {

/// Output of the least-distance solve: the projection point, exact duals on
/// the inequality (mu >= 0) and equality (nu) constraints, the worst KKT
/// residual, and the near-active inequality mask.
struct ProjectionResult {
  Vector z_star;
  Vector mu;
  Vector nu;
  double kkt_residual = 0.0;
  std::vector<std::uint8_t> active_mask;
};

struct ProjectOptions {
  double tol = 1e-8;          // KKT tolerance
  double tol_active = 1e-7;   // mask threshold on A_i z - b_i
  int max_iter = 0;           // 0 -> automatic budget
  /// Warm start: the previous result for the same set (the active mask seeds
  /// the working set; duals are never reused).
  const ProjectionResult* warm = nullptr;
};

/// Euclidean projection of y onto the set. Strictly convex, so the minimizer
/// is unique; the result satisfies feasibility, stationarity and
/// complementary slackness within opts.tol.
ProjectionResult project(const PolyhedralSet& set, const Vector& y,
                         const ProjectOptions& opts = {});

/// One differential seed: a direction in the projection inputs. Empty fields
/// are zero. Exactly the seeds the caller wants differentiated should be set.
struct DiffSeed {
  Vector dy;
  Matrix dA;
  Vector db;
  Matrix dM;
  Vector dq;
};

/// What to do when the KKT system is singular (degenerate active set).
/// The default surfaces the degeneracy; callers opt in to a resolution,
/// since any resolution hides genuine non-differentiability.
///   drop_weak: use the generalized-Jacobian element that treats weakly
///              active rows (zero multiplier, zero slack) as inactive.
///   damp:      Tikhonov-damped least squares on the full system.
enum class DegeneratePolicy { fail, drop_weak, damp };

struct DiffOptions {
  DegeneratePolicy on_degenerate = DegeneratePolicy::fail;
  double damping = 1e-10;
  double weak_tol = 1e-6;
};

/// Factorized sensitivity system of a projection at (set, res). Solves the
/// linear KKT-differential equations for dz*; supports forward seeds and
/// cotangent (vector-Jacobian) queries against the transposed system.
class ProjectionDifferential {
 public:
  ProjectionDifferential(const PolyhedralSet& set, const ProjectionResult& res,
                         const DiffOptions& opts = {});

  Index dim() const { return n_; }
  bool degenerate() const { return degenerate_; }

  /// dz* for one seed direction.
  Vector solve_seed(const DiffSeed& seed) const;

  /// Full Jacobian dz*/dy (n x n).
  Matrix jacobian_y() const;

  /// Cotangent mode against dy: returns c' * (dz*/dy), length n.
  Vector vjp_y(const Vector& cotangent) const;

  /// Cotangent mode against arbitrary seeds: entry k is c' * dz*[seed_k].
  Vector vjp_seeds(const Vector& cotangent,
                   const std::vector<DiffSeed>& seeds) const;

 private:
  Vector solve_rhs(const Vector& rhs) const;
  Vector solve_rhs_transposed(const Vector& rhs) const;
  Vector seed_rhs(const DiffSeed& seed) const;

  const PolyhedralSet* set_;
  const ProjectionResult* res_;
  DiffOptions opts_;
  Index n_ = 0, p_ = 0, m_ = 0;
  bool degenerate_ = false;
  Eigen::SparseMatrix<double> kkt_;
  std::shared_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> lu_;
  mutable std::shared_ptr<Eigen::SparseLU<Eigen::SparseMatrix<double>>> lu_t_;
  // Damped least-squares fallback (degenerate systems, opt-in); normal
  // equations factored sparsely, forward and transposed forms cached.
  using SparseLdlt = Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>;
  std::shared_ptr<SparseLdlt> damped_;
  mutable std::shared_ptr<SparseLdlt> damped_t_;
};

/// Differentiates the projection through its KKT system. Seeds select the
/// inputs; returns one dz* column per seed. Degenerate systems raise
/// DegeneracyError carrying the active mask unless a degeneracy policy
/// is selected.
Matrix differentiate_projection(const PolyhedralSet& set,
                                const ProjectionResult& res,
                                const std::vector<DiffSeed>& seeds,
                                const DiffOptions& opts = {});

}  // namespace vil
