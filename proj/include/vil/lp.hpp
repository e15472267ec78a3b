#pragma once

#include "vil/types.hpp"

namespace vil::lp {

enum class Status { optimal, infeasible, unbounded, iteration_limit };

struct Result {
  Status status = Status::optimal;
  Vector x;           // primal solution (free-variable space)
  double objective = 0.0;
};

struct Options {
  double tol = 1e-9;
  int max_iter = 0;   // 0 -> automatic budget from problem size
};

/// Minimize c'x subject to A_ub x <= b_ub and A_eq x = b_eq, x free.
/// Dense two-phase primal simplex; variables are split internally, so this
/// is intended for the small/medium probe and merit-function problems that
/// arise here, not for large-scale LP work.
Result solve(const Vector& c, const Matrix& A_ub, const Vector& b_ub,
             const Matrix& A_eq, const Vector& b_eq, const Options& opts = {});

}  // namespace vil::lp
