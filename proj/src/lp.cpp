#include "vil/lp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vil::lp {
namespace {

struct Tableau {
  Matrix t;                 // (m+1) x (ncols+1); last row objective, last col rhs
  std::vector<int> basis;   // basic variable per row
  int m = 0;
  int ncols = 0;
  double tol = 1e-9;

  double& rhs(int i) { return t(i, ncols); }
  double& obj(int j) { return t(m, j); }

  void pivot(int row, int col) {
    t.row(row) /= t(row, col);
    for (int i = 0; i <= m; ++i) {
      if (i == row) continue;
      const double f = t(i, col);
      if (f != 0.0) t.row(i) -= f * t.row(row);
    }
    basis[static_cast<std::size_t>(row)] = col;
  }

  // Returns optimal/unbounded/iteration_limit for the current objective row.
  // `allowed` masks columns permitted to enter the basis.
  Status run(const std::vector<std::uint8_t>& allowed, int max_iter) {
    int stall = 0;
    for (int it = 0; it < max_iter; ++it) {
      // Entering column: Dantzig rule, Bland's rule once degeneracy stalls.
      int enter = -1;
      if (stall < 2 * (m + ncols)) {
        double best = -tol;
        for (int j = 0; j < ncols; ++j) {
          if (allowed[static_cast<std::size_t>(j)] && obj(j) < best) {
            best = obj(j);
            enter = j;
          }
        }
      } else {
        for (int j = 0; j < ncols; ++j) {
          if (allowed[static_cast<std::size_t>(j)] && obj(j) < -tol) {
            enter = j;
            break;
          }
        }
      }
      if (enter < 0) return Status::optimal;

      int leave = -1;
      double best_ratio = std::numeric_limits<double>::infinity();
      for (int i = 0; i < m; ++i) {
        const double a = t(i, enter);
        if (a > tol) {
          const double ratio = rhs(i) / a;
          if (ratio < best_ratio - tol ||
              (ratio < best_ratio + tol &&
               (leave < 0 || basis[static_cast<std::size_t>(i)] <
                                 basis[static_cast<std::size_t>(leave)]))) {
            best_ratio = ratio;
            leave = i;
          }
        }
      }
      if (leave < 0) return Status::unbounded;

      stall = best_ratio < tol ? stall + 1 : 0;
      pivot(leave, enter);
    }
    return Status::iteration_limit;
  }
};

}  // namespace

Result solve(const Vector& c, const Matrix& A_ub, const Vector& b_ub,
             const Matrix& A_eq, const Vector& b_eq, const Options& opts) {
  const int n = static_cast<int>(c.size());
  const int p = static_cast<int>(A_ub.rows());
  const int meq = static_cast<int>(A_eq.rows());
  require(A_ub.cols() == n || p == 0, "lp: A_ub column mismatch");
  require(A_eq.cols() == n || meq == 0, "lp: A_eq column mismatch");
  require(b_ub.size() == p, "lp: b_ub size mismatch");
  require(b_eq.size() == meq, "lp: b_eq size mismatch");

  const int m = p + meq;
  // Columns: x+ (n), x- (n), slacks (p), artificials (<= m).
  const int nsplit = 2 * n;
  const int nslack = p;

  // First pass: decide which rows need an artificial.
  std::vector<int> art_of_row(static_cast<std::size_t>(m), -1);
  int nart = 0;
  for (int i = 0; i < p; ++i) {
    if (b_ub[i] < 0.0) art_of_row[static_cast<std::size_t>(i)] = nart++;
  }
  for (int i = 0; i < meq; ++i) {
    art_of_row[static_cast<std::size_t>(p + i)] = nart++;
  }

  Tableau tab;
  tab.m = m;
  tab.ncols = nsplit + nslack + nart;
  tab.tol = opts.tol;
  tab.t = Matrix::Zero(m + 1, tab.ncols + 1);
  tab.basis.assign(static_cast<std::size_t>(m), -1);

  for (int i = 0; i < p; ++i) {
    const double sgn = b_ub[i] < 0.0 ? -1.0 : 1.0;
    for (int j = 0; j < n; ++j) {
      tab.t(i, j) = sgn * A_ub(i, j);
      tab.t(i, n + j) = -sgn * A_ub(i, j);
    }
    tab.t(i, nsplit + i) = sgn;  // slack
    tab.rhs(i) = sgn * b_ub[i];
    if (art_of_row[static_cast<std::size_t>(i)] >= 0) {
      tab.t(i, nsplit + nslack + art_of_row[static_cast<std::size_t>(i)]) = 1.0;
      tab.basis[static_cast<std::size_t>(i)] =
          nsplit + nslack + art_of_row[static_cast<std::size_t>(i)];
    } else {
      tab.basis[static_cast<std::size_t>(i)] = nsplit + i;
    }
  }
  for (int i = 0; i < meq; ++i) {
    const int row = p + i;
    const double sgn = b_eq[i] < 0.0 ? -1.0 : 1.0;
    for (int j = 0; j < n; ++j) {
      tab.t(row, j) = sgn * A_eq(i, j);
      tab.t(row, n + j) = -sgn * A_eq(i, j);
    }
    tab.rhs(row) = sgn * b_eq[i];
    const int a = art_of_row[static_cast<std::size_t>(row)];
    tab.t(row, nsplit + nslack + a) = 1.0;
    tab.basis[static_cast<std::size_t>(row)] = nsplit + nslack + a;
  }

  const int budget =
      opts.max_iter > 0 ? opts.max_iter : 200 * (m + tab.ncols) + 2000;
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(tab.ncols), 1);

  Result out;
  // Phase 1: minimize the sum of artificials.
  if (nart > 0) {
    for (int j = nsplit + nslack; j < tab.ncols; ++j) tab.obj(j) = 1.0;
    for (int i = 0; i < m; ++i) {
      if (tab.basis[static_cast<std::size_t>(i)] >= nsplit + nslack) {
        tab.t.row(m) -= tab.t.row(i);
      }
    }
    const Status s1 = tab.run(allowed, budget);
    if (s1 == Status::iteration_limit) {
      out.status = s1;
      return out;
    }
    if (-tab.t(m, tab.ncols) > 1e-7) {
      out.status = Status::infeasible;
      return out;
    }
    // Pivot any artificial still in the basis out on a nonzero column.
    for (int i = 0; i < m; ++i) {
      if (tab.basis[static_cast<std::size_t>(i)] >= nsplit + nslack) {
        for (int j = 0; j < nsplit + nslack; ++j) {
          if (std::abs(tab.t(i, j)) > opts.tol) {
            tab.pivot(i, j);
            break;
          }
        }
      }
    }
    for (int j = nsplit + nslack; j < tab.ncols; ++j)
      allowed[static_cast<std::size_t>(j)] = 0;
  }

  // Phase 2: original objective, priced out over the current basis.
  tab.t.row(m).setZero();
  for (int j = 0; j < n; ++j) {
    tab.obj(j) = c[j];
    tab.obj(n + j) = -c[j];
  }
  for (int i = 0; i < m; ++i) {
    const int bj = tab.basis[static_cast<std::size_t>(i)];
    const double cb = bj < n ? c[bj] : (bj < nsplit ? -c[bj - n] : 0.0);
    if (cb != 0.0) tab.t.row(m) -= cb * tab.t.row(i);
  }
  const Status s2 = tab.run(allowed, budget);
  out.status = s2;
  if (s2 == Status::unbounded || s2 == Status::iteration_limit) return out;

  out.x = Vector::Zero(n);
  for (int i = 0; i < m; ++i) {
    const int bj = tab.basis[static_cast<std::size_t>(i)];
    if (bj < n) {
      out.x[bj] += tab.rhs(i);
    } else if (bj < nsplit) {
      out.x[bj - n] -= tab.rhs(i);
    }
  }
  out.objective = c.size() > 0 ? c.dot(out.x) : 0.0;
  return out;
}

}  // namespace vil::lp
