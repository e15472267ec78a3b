#include "vil/polyhedron.hpp"

#include "vil/lp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vil {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kFeasTol = 1e-7;

}  // namespace

PolyhedralSet PolyhedralSet::make(Matrix A, Vector b, Matrix M, Vector q,
                                  std::optional<Vector> feasible_hint) {
  PolyhedralSet s;
  s.A = std::move(A);
  s.b = std::move(b);
  s.M = std::move(M);
  s.q = std::move(q);

  const Index n = s.dim();
  require(n > 0, "polyhedral set: dimension must be positive");
  require(s.A.rows() == s.b.size(), "polyhedral set: A/b row mismatch");
  require(s.M.rows() == s.q.size(), "polyhedral set: M/q row mismatch");
  require(s.A.rows() == 0 || s.A.cols() == n,
          "polyhedral set: A column count mismatch");
  require(s.M.rows() == 0 || s.M.cols() == n,
          "polyhedral set: M column count mismatch");
  if (s.A.rows() == 0) s.A.resize(0, n);
  if (s.M.rows() == 0) s.M.resize(0, n);
  require(s.A.allFinite() && s.b.allFinite() && s.M.allFinite() &&
              s.q.allFinite(),
          "polyhedral set: non-finite entries");

  s.detect_structure();
  s.verify_nonempty(feasible_hint);
  s.verify_bounded();
  return s;
}

PolyhedralSet PolyhedralSet::box(const Vector& lo, const Vector& hi) {
  const Index n = lo.size();
  require(hi.size() == n, "box: bound size mismatch");
  require(((hi - lo).array() >= 0).all(), "box: hi < lo");
  Matrix A(2 * n, n);
  Vector b(2 * n);
  A.topRows(n) = -Matrix::Identity(n, n);
  A.bottomRows(n) = Matrix::Identity(n, n);
  b.head(n) = -lo;
  b.tail(n) = hi;
  return make(std::move(A), std::move(b), Matrix(0, n), Vector(0),
              Vector(0.5 * (lo + hi)));
}

bool PolyhedralSet::contains(const Vector& z, double tol) const {
  if (z.size() != dim()) return false;
  if (n_ineq() > 0 && ((A * z - b).array() > tol).any()) return false;
  if (n_eq() > 0 && ((M * z - q).array().abs() > tol).any()) return false;
  return true;
}

void PolyhedralSet::detect_structure() {
  const Index n = dim();
  patterns_.assign(static_cast<std::size_t>(n_ineq()), RowPattern{});
  for (Index i = 0; i < n_ineq(); ++i) {
    int coord = -1;
    bool clean = true;
    for (Index j = 0; j < n; ++j) {
      const double a = A(i, j);
      if (a == 0.0) continue;
      if (coord >= 0 || (a != 1.0 && a != -1.0)) {
        clean = false;
        break;
      }
      coord = static_cast<int>(j);
    }
    if (clean && coord >= 0) {
      patterns_[static_cast<std::size_t>(i)] = {coord, A(i, coord)};
    }
  }

  // Simplex product: A == -I in canonical order, equality rows a disjoint
  // 0/1 cover of the coordinates with nonnegative targets.
  simplex_product_ = false;
  if (n_ineq() == n && n_eq() > 0 && (q.array() >= 0).all() &&
      b.cwiseAbs().maxCoeff() == 0.0) {
    bool canonical = true;
    for (Index i = 0; i < n && canonical; ++i) {
      canonical = patterns_[static_cast<std::size_t>(i)].coord == i &&
                  patterns_[static_cast<std::size_t>(i)].sign == -1.0;
    }
    if (canonical) {
      std::vector<int> owner(static_cast<std::size_t>(n), -1);
      bool ok = true;
      blocks_.assign(static_cast<std::size_t>(n_eq()), {});
      for (Index r = 0; r < n_eq() && ok; ++r) {
        for (Index j = 0; j < n && ok; ++j) {
          const double m = M(r, j);
          if (m == 0.0) continue;
          if (m != 1.0 || owner[static_cast<std::size_t>(j)] >= 0) {
            ok = false;
          } else {
            owner[static_cast<std::size_t>(j)] = static_cast<int>(r);
            blocks_[static_cast<std::size_t>(r)].push_back(
                static_cast<int>(j));
          }
        }
        if (blocks_[static_cast<std::size_t>(r)].empty()) ok = false;
      }
      ok = ok && std::all_of(owner.begin(), owner.end(),
                             [](int o) { return o >= 0; });
      simplex_product_ = ok;
      if (!ok) blocks_.clear();
    }
  }
}

void PolyhedralSet::verify_nonempty(const std::optional<Vector>& hint) {
  if (hint && contains(*hint, kFeasTol)) {
    feasible_point_ = *hint;
    return;
  }
  const lp::Result r =
      lp::solve(Vector::Zero(dim()), A, b, M, q);
  if (r.status == lp::Status::infeasible) {
    throw InfeasibleError("polyhedral set: feasibility probe found no point");
  }
  if (r.status != lp::Status::optimal || !contains(r.x, 1e-6)) {
    throw SolverError("polyhedral set: feasibility probe failed");
  }
  feasible_point_ = r.x;
}

void PolyhedralSet::verify_bounded() {
  const Index n = dim();

  // Structural certificate: propagate coordinate bounds through rows whose
  // coefficients have one sign (equalities count in both directions).
  Vector lo = Vector::Constant(n, -kInf);
  Vector hi = Vector::Constant(n, kInf);
  for (Index i = 0; i < n_ineq(); ++i) {
    const RowPattern& p = patterns_[static_cast<std::size_t>(i)];
    if (p.coord < 0) continue;
    if (p.sign > 0) {
      hi[p.coord] = std::min(hi[p.coord], b[i]);
    } else {
      lo[p.coord] = std::max(lo[p.coord], -b[i]);
    }
  }
  auto sweep_row = [&](const Eigen::RowVectorXd& row, double rhs,
                       bool both_directions) {
    // row * z <= rhs (and >= rhs when both_directions).
    bool all_nonneg = true, all_nonpos = true;
    for (Index j = 0; j < n; ++j) {
      if (row[j] > 0) all_nonpos = false;
      if (row[j] < 0) all_nonneg = false;
    }
    if (all_nonneg) {
      // upper bounds if every participating coordinate has a lower bound
      double base = rhs;
      bool usable = true;
      for (Index j = 0; j < n; ++j) {
        if (row[j] > 0 && !std::isfinite(lo[j])) usable = false;
      }
      if (usable) {
        for (Index j = 0; j < n; ++j) {
          if (row[j] > 0) {
            double others = 0;
            for (Index k = 0; k < n; ++k) {
              if (k != j && row[k] > 0) others += row[k] * lo[k];
            }
            hi[j] = std::min(hi[j], (base - others) / row[j]);
          }
        }
      }
    }
    if (both_directions && all_nonneg) {
      // row * z >= rhs with nonneg coefficients: lower bounds when others
      // have upper bounds
      bool usable = true;
      for (Index j = 0; j < n; ++j) {
        if (row[j] > 0 && !std::isfinite(hi[j])) usable = false;
      }
      if (usable) {
        for (Index j = 0; j < n; ++j) {
          if (row[j] > 0) {
            double others = 0;
            for (Index k = 0; k < n; ++k) {
              if (k != j && row[k] > 0) others += row[k] * hi[k];
            }
            lo[j] = std::max(lo[j], (rhs - others) / row[j]);
          }
        }
      }
    }
    (void)all_nonpos;
  };
  for (int pass = 0; pass < 3; ++pass) {
    for (Index i = 0; i < n_ineq(); ++i) {
      if (patterns_[static_cast<std::size_t>(i)].coord >= 0) continue;
      sweep_row(A.row(i), b[i], false);
    }
    for (Index i = 0; i < n_eq(); ++i) sweep_row(M.row(i), q[i], true);
  }
  const bool certified = std::isfinite(lo.minCoeff()) &&
                         [&] {
                           for (Index j = 0; j < n; ++j) {
                             if (!std::isfinite(hi[j]) ||
                                 !std::isfinite(lo[j]))
                               return false;
                           }
                           return true;
                         }();
  if (certified) {
    bbox_ = std::make_pair(lo, hi);
    return;
  }

  // LP probe: min/max each coordinate; an unbounded LP is a recession
  // direction. Also yields a bounding box for samplers.
  Vector plo(n), phi(n);
  for (Index j = 0; j < n; ++j) {
    Vector c = Vector::Zero(n);
    c[j] = 1.0;
    lp::Result r = lp::solve(c, A, b, M, q);
    if (r.status == lp::Status::unbounded) {
      throw UnboundedError("polyhedral set: coordinate " + std::to_string(j) +
                           " is unbounded below");
    }
    if (r.status != lp::Status::optimal) {
      throw SolverError("polyhedral set: boundedness probe failed");
    }
    plo[j] = r.objective;
    r = lp::solve(-c, A, b, M, q);
    if (r.status == lp::Status::unbounded) {
      throw UnboundedError("polyhedral set: coordinate " + std::to_string(j) +
                           " is unbounded above");
    }
    if (r.status != lp::Status::optimal) {
      throw SolverError("polyhedral set: boundedness probe failed");
    }
    phi[j] = -r.objective;
  }
  bbox_ = std::make_pair(plo, phi);
}

}  // namespace vil
