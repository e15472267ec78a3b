#pragma once

#include "vil/types.hpp"

#include <optional>

namespace vil {

/// Feasible region {z : A z <= b, M z = q}. Instances are immutable after
/// construction and safe to share across concurrent solver runs.
///
/// Construction verifies that the set is nonempty and bounded. Nonemptiness
/// comes from a caller-supplied feasible point when available, otherwise from
/// a phase-1 LP. Boundedness is established by a structural certificate
/// (explicit coordinate bounds, or nonnegativity plus covering rows with
/// one-signed coefficients) and falls back to per-coordinate LPs when the
/// certificate is inconclusive.
class PolyhedralSet {
 public:
  Matrix A;  // n_ineq x n
  Vector b;  // n_ineq
  Matrix M;  // n_eq x n
  Vector q;  // n_eq

  static PolyhedralSet make(Matrix A, Vector b, Matrix M, Vector q,
                            std::optional<Vector> feasible_hint = {});

  /// Convenience: box {lo <= z <= hi} as inequality rows.
  static PolyhedralSet box(const Vector& lo, const Vector& hi);

  Index dim() const { return A.cols() > 0 ? A.cols() : M.cols(); }
  Index n_ineq() const { return A.rows(); }
  Index n_eq() const { return M.rows(); }

  bool contains(const Vector& z, double tol = 1e-8) const;

  /// A point verified feasible at construction.
  const Vector& feasible_point() const { return feasible_point_; }

  /// Per-row pattern when an inequality row is a signed unit vector
  /// (coordinate bound); coord = -1 otherwise.
  struct RowPattern {
    int coord = -1;
    double sign = 0.0;
  };
  const std::vector<RowPattern>& row_patterns() const { return patterns_; }

  /// True when A == -I and the equality rows are a 0/1 partition of the
  /// coordinates (a product of scaled simplices, e.g. path-flow sets).
  bool is_simplex_product() const { return simplex_product_; }
  const std::vector<std::vector<int>>& simplex_blocks() const {
    return blocks_;
  }

  /// Coordinate bounding box when the probe computed one.
  const std::optional<std::pair<Vector, Vector>>& bounding_box() const {
    return bbox_;
  }

 private:
  PolyhedralSet() = default;
  void detect_structure();
  void verify_nonempty(const std::optional<Vector>& hint);
  void verify_bounded();

  Vector feasible_point_;
  std::vector<RowPattern> patterns_;
  bool simplex_product_ = false;
  std::vector<std::vector<int>> blocks_;
  std::optional<std::pair<Vector, Vector>> bbox_;
};

}  // namespace vil
