#include "vil/projection.hpp"

#include <Eigen/Cholesky>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vil {
namespace {

struct Engine {
  const PolyhedralSet& set;
  const Vector& y;
  const ProjectOptions& opts;
};

ProjectionResult finalize(const PolyhedralSet& set, const Vector& y,
                          Vector z, Vector mu, Vector nu,
                          const ProjectOptions& opts) {
  ProjectionResult res;
  const Index p = set.n_ineq();
  res.z_star = std::move(z);
  res.mu = std::move(mu);
  res.nu = std::move(nu);
  res.active_mask.assign(static_cast<std::size_t>(p), 0);

  double worst = 0.0;
  Vector stat = res.z_star - y;
  if (p > 0) stat += set.A.transpose() * res.mu;
  if (set.n_eq() > 0) stat += set.M.transpose() * res.nu;
  worst = stat.cwiseAbs().maxCoeff();
  if (p > 0) {
    const Vector slack = set.A * res.z_star - set.b;
    for (Index i = 0; i < p; ++i) {
      res.active_mask[static_cast<std::size_t>(i)] =
          slack[i] > -opts.tol_active;
      worst = std::max(worst, slack[i]);                      // feasibility
      worst = std::max(worst, std::abs(res.mu[i] * slack[i]));  // compl.
      worst = std::max(worst, -res.mu[i]);                    // dual sign
    }
  }
  if (set.n_eq() > 0) {
    worst = std::max(worst, (set.M * res.z_star - set.q).cwiseAbs().maxCoeff());
  }
  res.kkt_residual = worst;

  const double tol_eff = opts.tol * (1.0 + y.cwiseAbs().maxCoeff());
  if (!(worst <= tol_eff)) {
    throw ConvergenceError("project: KKT residual " + std::to_string(worst) +
                               " above tolerance",
                           res.z_star, worst);
  }
  return res;
}

// Product of scaled simplices: per-block waterfill with exact duals.
ProjectionResult project_simplex_product(const PolyhedralSet& set,
                                         const Vector& y,
                                         const ProjectOptions& opts) {
  const Index n = set.dim();
  Vector z = Vector::Zero(n);
  Vector mu = Vector::Zero(n);
  Vector nu(set.n_eq());

  const auto& blocks = set.simplex_blocks();
  for (Index r = 0; r < set.n_eq(); ++r) {
    const auto& cols = blocks[static_cast<std::size_t>(r)];
    const double target = set.q[r];
    std::vector<double> vals;
    vals.reserve(cols.size());
    for (int j : cols) vals.push_back(y[j]);
    std::sort(vals.begin(), vals.end(), std::greater<>());

    double level;
    if (target <= 0.0) {
      level = vals.front();
    } else {
      double prefix = 0.0;
      level = vals.front() - target;  // k = 1 candidate
      for (std::size_t k = 1; k <= vals.size(); ++k) {
        prefix += vals[k - 1];
        const double cand = (prefix - target) / static_cast<double>(k);
        if (vals[k - 1] > cand) {
          level = cand;
        } else {
          break;
        }
      }
    }
    nu[r] = level;
    for (int j : cols) {
      const double f = y[j] - level;
      if (f > 0.0 && target > 0.0) {
        z[j] = f;
      } else {
        z[j] = 0.0;
        mu[j] = std::max(level - y[j], 0.0);
      }
    }
    // Remove the waterfill rounding drift so M z = q holds exactly.
    double sum = 0.0;
    int npos = 0;
    for (int j : cols) {
      if (z[j] > 0.0) {
        sum += z[j];
        ++npos;
      }
    }
    if (npos > 0) {
      const double corr = (target - sum) / npos;
      for (int j : cols) {
        if (z[j] > 0.0) z[j] += corr;
      }
    }
  }
  return finalize(set, y, std::move(z), std::move(mu), std::move(nu), opts);
}

struct Subspace {
  Vector zeta;
  Vector mu_w;  // duals for working rows, in working order
  Vector nu;
};

// Solves a symmetric system G a = t, validating the residual and falling
// back to a complete orthogonal decomposition (minimum-norm solution) when
// G is rank deficient, e.g. redundant equality rows.
Vector solve_spd_or_minnorm(const Matrix& G, const Vector& t) {
  if (G.rows() == 0) return Vector(0);
  Eigen::LDLT<Matrix> ldlt(G);
  if (ldlt.info() == Eigen::Success) {
    Vector a = ldlt.solve(t);
    if ((G * a - t).cwiseAbs().maxCoeff() <=
        1e-10 * (1.0 + t.cwiseAbs().maxCoeff())) {
      return a;
    }
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(G);
  return cod.solve(t);
}

// Equality-constrained least-distance over the working face.
Subspace solve_face(const PolyhedralSet& set, const Vector& y,
                    const std::vector<int>& working, bool box_fast) {
  const Index n = set.dim();
  const Index m = set.n_eq();
  const Index k = static_cast<Index>(working.size());
  Subspace out;

  if (box_fast) {
    // Working rows are coordinate bounds: eliminate the fixed coordinates.
    std::vector<double> fixed_value(static_cast<std::size_t>(n), 0.0);
    std::vector<std::uint8_t> is_fixed(static_cast<std::size_t>(n), 0);
    for (int i : working) {
      const auto& pat = set.row_patterns()[static_cast<std::size_t>(i)];
      fixed_value[static_cast<std::size_t>(pat.coord)] =
          pat.sign > 0 ? set.b[i] : -set.b[i];
      is_fixed[static_cast<std::size_t>(pat.coord)] = 1;
    }
    std::vector<int> free_idx;
    free_idx.reserve(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) {
      if (!is_fixed[static_cast<std::size_t>(j)])
        free_idx.push_back(static_cast<int>(j));
    }
    const Index nf = static_cast<Index>(free_idx.size());
    Vector rhs_eq = set.q;
    for (Index j = 0; j < n; ++j) {
      if (is_fixed[static_cast<std::size_t>(j)]) {
        rhs_eq -= set.M.col(j) * fixed_value[static_cast<std::size_t>(j)];
      }
    }
    Matrix Mf(m, nf);
    Vector yf(nf);
    for (Index c = 0; c < nf; ++c) {
      Mf.col(c) = set.M.col(free_idx[static_cast<std::size_t>(c)]);
      yf[c] = y[free_idx[static_cast<std::size_t>(c)]];
    }
    out.nu = solve_spd_or_minnorm(Mf * Mf.transpose(), Mf * yf - rhs_eq);
    out.zeta = Vector(n);
    const Vector zf = yf - Mf.transpose() * out.nu;
    for (Index c = 0; c < nf; ++c)
      out.zeta[free_idx[static_cast<std::size_t>(c)]] = zf[c];
    for (Index j = 0; j < n; ++j) {
      if (is_fixed[static_cast<std::size_t>(j)])
        out.zeta[j] = fixed_value[static_cast<std::size_t>(j)];
    }
    const Vector g = m > 0 ? Vector(set.M.transpose() * out.nu)
                           : Vector(Vector::Zero(n));
    out.mu_w = Vector(k);
    for (Index w = 0; w < k; ++w) {
      const auto& pat =
          set.row_patterns()[static_cast<std::size_t>(
              working[static_cast<std::size_t>(w)])];
      out.mu_w[w] =
          -pat.sign * (out.zeta[pat.coord] - y[pat.coord] + g[pat.coord]);
    }
    return out;
  }

  Matrix C(k + m, n);
  Vector d(k + m);
  for (Index w = 0; w < k; ++w) {
    C.row(w) = set.A.row(working[static_cast<std::size_t>(w)]);
    d[w] = set.b[working[static_cast<std::size_t>(w)]];
  }
  C.bottomRows(m) = set.M;
  d.tail(m) = set.q;
  const Vector alpha = solve_spd_or_minnorm(C * C.transpose(), C * y - d);
  out.zeta = y - C.transpose() * alpha;
  out.mu_w = alpha.head(k);
  out.nu = alpha.tail(m);
  return out;
}

ProjectionResult project_active_set(const PolyhedralSet& set, const Vector& y,
                                    const ProjectOptions& opts) {
  const Index n = set.dim();
  const Index p = set.n_ineq();
  const double scale = 1.0 + y.cwiseAbs().maxCoeff();
  const double step_tol = 1e-11 * scale;
  const double dual_tol = 1e-10 * scale;
  const int budget =
      opts.max_iter > 0 ? opts.max_iter : 6 * static_cast<int>(n + p) + 60;

  Vector z = set.feasible_point();
  std::vector<std::uint8_t> in_w(static_cast<std::size_t>(p), 0);
  if (opts.warm != nullptr &&
      opts.warm->active_mask.size() == static_cast<std::size_t>(p)) {
    in_w = opts.warm->active_mask;
  } else {
    // Seed the working set with the rows active at the start point; this is
    // consistent by construction and usually close to the optimal set.
    const Vector slack0 = set.A * z - set.b;
    for (Index i = 0; i < p; ++i) {
      in_w[static_cast<std::size_t>(i)] = slack0[i] > -opts.tol_active;
    }
  }

  int last_dropped = -1;  // barred from re-entering until real progress
  std::vector<int> working;
  for (int it = 0; it < budget; ++it) {
    working.clear();
    bool box_fast = true;
    for (Index i = 0; i < p; ++i) {
      if (in_w[static_cast<std::size_t>(i)]) {
        working.push_back(static_cast<int>(i));
        box_fast = box_fast &&
                   set.row_patterns()[static_cast<std::size_t>(i)].coord >= 0;
      }
    }
    const Subspace sub = solve_face(set, y, working, box_fast);

    // A warm-start mask can carry an inconsistent face system; prune it to
    // the rows actually active at the current point and retry.
    double face_defect = 0.0;
    for (Index w = 0; w < static_cast<Index>(working.size()); ++w) {
      const Index i = working[static_cast<std::size_t>(w)];
      face_defect = std::max(
          face_defect, std::abs(set.A.row(i).dot(sub.zeta) - set.b[i]));
    }
    if (set.n_eq() > 0) {
      face_defect = std::max(
          face_defect, (set.M * sub.zeta - set.q).cwiseAbs().maxCoeff());
    }
    if (face_defect > 1e-7 * scale) {
      bool changed = false;
      for (int i : working) {
        if (std::abs(set.A.row(i).dot(z) - set.b[i]) > opts.tol_active) {
          in_w[static_cast<std::size_t>(i)] = 0;
          changed = true;
        }
      }
      if (!changed) in_w.assign(static_cast<std::size_t>(p), 0);
      continue;
    }

    const Vector dir = sub.zeta - z;
    const double move = dir.cwiseAbs().maxCoeff();

    if (move <= step_tol) {
      // At the face minimizer: check dual signs.
      int drop = -1;
      double worst = -dual_tol;
      for (Index w = 0; w < static_cast<Index>(working.size()); ++w) {
        if (sub.mu_w[w] < worst) {
          worst = sub.mu_w[w];
          drop = working[static_cast<std::size_t>(w)];
        }
      }
      if (drop < 0) {
        Vector mu = Vector::Zero(p);
        for (Index w = 0; w < static_cast<Index>(working.size()); ++w) {
          mu[working[static_cast<std::size_t>(w)]] =
              std::max(sub.mu_w[w], 0.0);
        }
        return finalize(set, y, sub.zeta, std::move(mu), sub.nu, opts);
      }
      in_w[static_cast<std::size_t>(drop)] = 0;
      last_dropped = drop;
      continue;
    }

    // Step toward the face minimizer, stopping at the first blocking row.
    double t = 1.0;
    int blocking = -1;
    for (Index i = 0; i < p; ++i) {
      if (in_w[static_cast<std::size_t>(i)] || i == last_dropped) continue;
      const double a = set.A.row(i).dot(dir);
      if (a > 1e-13 * scale) {
        const double room = set.b[i] - set.A.row(i).dot(z);
        const double tmax = std::max(room, 0.0) / a;
        if (tmax < t) {
          t = tmax;
          blocking = static_cast<int>(i);
        }
      }
    }
    if (t * move > step_tol) last_dropped = -1;
    z += t * dir;
    if (blocking >= 0) {
      in_w[static_cast<std::size_t>(blocking)] = 1;
    } else {
      z = sub.zeta;
    }
  }
  throw ConvergenceError("project: active-set iteration limit", z,
                         std::numeric_limits<double>::quiet_NaN());
}

}  // namespace

ProjectionResult project(const PolyhedralSet& set, const Vector& y,
                         const ProjectOptions& opts) {
  require(y.size() == set.dim(), "project: point dimension mismatch");
  require(y.allFinite(), "project: non-finite input point");
  require(opts.tol > 0, "project: tol must be positive");
  if (set.is_simplex_product()) {
    return project_simplex_product(set, y, opts);
  }
  return project_active_set(set, y, opts);
}

namespace {

// KKT-differential system. When `weak_as_inactive` is set, rows that are
// active with a zero multiplier are rewritten as inactive (unit negative
// slack), selecting one element of the generalized Jacobian.
Eigen::SparseMatrix<double> assemble_kkt(const PolyhedralSet& set,
                                         const ProjectionResult& res,
                                         bool weak_as_inactive,
                                         double weak_tol) {
  const Index n = set.dim();
  const Index p = set.n_ineq();
  const Index m = set.n_eq();
  const Index N = n + p + m;
  const Vector slack = p > 0 ? Vector(set.A * res.z_star - set.b) : Vector(0);
  const double scale = 1.0 + res.z_star.cwiseAbs().maxCoeff();

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<std::size_t>(N + 2 * set.A.size() + 2 *
                                        set.M.size()));
  for (Index j = 0; j < n; ++j) trip.emplace_back(j, j, 1.0);
  for (Index i = 0; i < p; ++i) {
    const bool weak = weak_as_inactive && slack[i] > -weak_tol * scale &&
                      res.mu[i] < weak_tol * scale;
    for (Index j = 0; j < n; ++j) {
      const double a = set.A(i, j);
      if (a == 0.0) continue;
      trip.emplace_back(j, n + i, a);
      if (!weak && res.mu[i] != 0.0) {
        trip.emplace_back(n + i, j, res.mu[i] * a);
      }
    }
    trip.emplace_back(n + i, n + i, weak ? -1.0 : slack[i]);
  }
  for (Index r = 0; r < m; ++r) {
    for (Index j = 0; j < n; ++j) {
      const double v = set.M(r, j);
      if (v == 0.0) continue;
      trip.emplace_back(j, n + p + r, v);
      trip.emplace_back(n + p + r, j, v);
    }
  }
  Eigen::SparseMatrix<double> kkt(N, N);
  kkt.setFromTriplets(trip.begin(), trip.end());
  kkt.makeCompressed();
  return kkt;
}

bool factor_ok(Eigen::SparseLU<Eigen::SparseMatrix<double>>& lu,
               const Eigen::SparseMatrix<double>& kkt) {
  lu.compute(kkt);
  if (lu.info() != Eigen::Success) return false;
  const Vector probe = Vector::Ones(kkt.rows());
  const Vector x = lu.solve(probe);
  return x.allFinite() && (kkt * x - probe).cwiseAbs().maxCoeff() <= 1e-6;
}

}  // namespace

ProjectionDifferential::ProjectionDifferential(const PolyhedralSet& set,
                                               const ProjectionResult& res,
                                               const DiffOptions& opts)
    : set_(&set), res_(&res), opts_(opts) {
  n_ = set.dim();
  p_ = set.n_ineq();
  m_ = set.n_eq();
  require(res.z_star.size() == n_ && res.mu.size() == p_ &&
              res.nu.size() == m_,
          "projection differential: result does not match the set");

  kkt_ = assemble_kkt(set, res, false, opts.weak_tol);
  lu_ = std::make_shared<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
  degenerate_ = !factor_ok(*lu_, kkt_);
  if (!degenerate_) return;

  if (opts_.on_degenerate == DegeneratePolicy::fail) {
    throw DegeneracyError(
        "projection differential: KKT system is singular "
        "(degenerate active set)",
        res.active_mask);
  }
  if (opts_.on_degenerate == DegeneratePolicy::drop_weak) {
    kkt_ = assemble_kkt(set, res, true, opts.weak_tol);
    lu_ = std::make_shared<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
    if (factor_ok(*lu_, kkt_)) return;  // degenerate_ stays set for callers
  }
  Eigen::SparseMatrix<double> G(kkt_.transpose() * kkt_);
  Eigen::SparseMatrix<double> reg(G.rows(), G.cols());
  reg.setIdentity();
  G += opts_.damping * reg;
  damped_ = std::make_shared<SparseLdlt>(G);
  if (damped_->info() != Eigen::Success) {
    throw DegeneracyError(
        "projection differential: damped system could not be factored",
        res.active_mask);
  }
}

Vector ProjectionDifferential::solve_rhs(const Vector& rhs) const {
  if (damped_) {
    return damped_->solve(kkt_.transpose() * rhs);
  }
  return lu_->solve(rhs);
}

Vector ProjectionDifferential::solve_rhs_transposed(const Vector& rhs) const {
  if (damped_) {
    if (!damped_t_) {
      Eigen::SparseMatrix<double> G(kkt_ * kkt_.transpose());
      Eigen::SparseMatrix<double> reg(G.rows(), G.cols());
      reg.setIdentity();
      G += opts_.damping * reg;
      damped_t_ = std::make_shared<SparseLdlt>(G);
      if (damped_t_->info() != Eigen::Success) {
        throw DegeneracyError(
            "projection differential: damped transposed system could not "
            "be factored",
            res_->active_mask);
      }
    }
    return damped_t_->solve(kkt_ * rhs);
  }
  if (!lu_t_) {
    lu_t_ = std::make_shared<Eigen::SparseLU<Eigen::SparseMatrix<double>>>();
    Eigen::SparseMatrix<double> kt = kkt_.transpose();
    kt.makeCompressed();
    lu_t_->compute(kt);
    if (lu_t_->info() != Eigen::Success) {
      throw DegeneracyError("projection differential: transposed KKT singular",
                            res_->active_mask);
    }
  }
  return lu_t_->solve(rhs);
}

Vector ProjectionDifferential::seed_rhs(const DiffSeed& seed) const {
  Vector rhs = Vector::Zero(n_ + p_ + m_);
  if (seed.dy.size() > 0) {
    require(seed.dy.size() == n_, "diff seed: dy size");
    rhs.head(n_) = seed.dy;
  }
  if (seed.dA.size() > 0) {
    require(seed.dA.rows() == p_ && seed.dA.cols() == n_, "diff seed: dA size");
    rhs.head(n_) -= seed.dA.transpose() * res_->mu;
    rhs.segment(n_, p_) -=
        res_->mu.cwiseProduct(seed.dA * res_->z_star);
  }
  if (seed.db.size() > 0) {
    require(seed.db.size() == p_, "diff seed: db size");
    rhs.segment(n_, p_) += res_->mu.cwiseProduct(seed.db);
  }
  if (seed.dM.size() > 0) {
    require(seed.dM.rows() == m_ && seed.dM.cols() == n_, "diff seed: dM size");
    rhs.head(n_) -= seed.dM.transpose() * res_->nu;
    rhs.tail(m_) -= seed.dM * res_->z_star;
  }
  if (seed.dq.size() > 0) {
    require(seed.dq.size() == m_, "diff seed: dq size");
    rhs.tail(m_) += seed.dq;
  }
  return rhs;
}

Vector ProjectionDifferential::solve_seed(const DiffSeed& seed) const {
  return solve_rhs(seed_rhs(seed)).head(n_);
}

Matrix ProjectionDifferential::jacobian_y() const {
  const Index N = n_ + p_ + m_;
  Matrix rhs = Matrix::Zero(N, n_);
  rhs.topRows(n_) = Matrix::Identity(n_, n_);
  if (damped_) {
    return Matrix(damped_->solve(kkt_.transpose() * rhs)).topRows(n_);
  }
  return Matrix(lu_->solve(rhs)).topRows(n_);
}

Vector ProjectionDifferential::vjp_y(const Vector& cotangent) const {
  require(cotangent.size() == n_, "vjp: cotangent size");
  Vector ext = Vector::Zero(n_ + p_ + m_);
  ext.head(n_) = cotangent;
  return solve_rhs_transposed(ext).head(n_);
}

Vector ProjectionDifferential::vjp_seeds(
    const Vector& cotangent, const std::vector<DiffSeed>& seeds) const {
  require(cotangent.size() == n_, "vjp: cotangent size");
  Vector ext = Vector::Zero(n_ + p_ + m_);
  ext.head(n_) = cotangent;
  const Vector s = solve_rhs_transposed(ext);
  Vector out(static_cast<Index>(seeds.size()));
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    out[static_cast<Index>(k)] = s.dot(seed_rhs(seeds[k]));
  }
  return out;
}

Matrix differentiate_projection(const PolyhedralSet& set,
                                const ProjectionResult& res,
                                const std::vector<DiffSeed>& seeds,
                                const DiffOptions& opts) {
  const ProjectionDifferential diff(set, res, opts);
  Matrix out(set.dim(), static_cast<Index>(seeds.size()));
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    out.col(static_cast<Index>(k)) = diff.solve_seed(seeds[k]);
  }
  return out;
}

}  // namespace vil
