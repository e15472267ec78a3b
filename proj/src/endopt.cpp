#include "vil/endopt.hpp"

#include "vil/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vil {
namespace {

Vector clip_to_box(const Vector& v, const Vector& lo, const Vector& hi) {
  return v.cwiseMax(lo).cwiseMin(hi);
}

std::vector<std::uint8_t> observed_mask(const Network& net,
                                        const std::vector<EdgeKind>& kinds) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(net.n_edges()), 0);
  for (Index e = 0; e < net.n_edges(); ++e) {
    const EdgeKind k = net.edges[static_cast<std::size_t>(e)].kind;
    mask[static_cast<std::size_t>(e)] =
        std::find(kinds.begin(), kinds.end(), k) != kinds.end();
  }
  return mask;
}

// Pulls an edge-space cotangent back through the equilibrium. The implicit
// mode runs on the edge formulation; when that system is degenerate (route
// or commodity splits are not locally unique), the fallback replays
// fixed-point refinement layers of the forward (path) formulation at its
// solution, reusing the solver's terminal projection.
Vector equilibrium_vjp(const CostModel& cm, const DemandMatrix& dm,
                       const EquilibriumState& eq,
                       const ParameterBinding& binding, const Vector& lambda,
                       const Vector& w_x, int unroll_tail, GradInfo* info) {
  const auto net = cm.net;
  const Index E = net->n_edges();
  const Index W = net->n_od();

  if (info == nullptr || !info->skip_implicit) {
    try {
      const VIProblem problem =
          assemble_vi(cm, dm, ViForm::edge, eq.paths, binding);
      const Vector z_star =
          commodity_flows_from_paths(*net, eq.paths, eq.path_flows);

      // Any positive r gives a valid fixed point.
      const double smax = cm.slopes(eq.edge_flows).maxCoeff();
      const double r =
          std::min(0.5, 0.9 / (static_cast<double>(W) * smax + 1e-12));

      const auto set = problem.omega(lambda);
      const Vector y = z_star - r * problem.F(z_star, lambda);
      ProjectOptions popts;
      popts.tol = 1e-8 * (1.0 + y.cwiseAbs().maxCoeff());
      // Warm the working set from the rows active at the equilibrium.
      ProjectionResult seed;
      seed.active_mask.assign(static_cast<std::size_t>(set->n_ineq()), 0);
      const Vector slack0 = set->A * z_star - set->b;
      for (Index i = 0; i < set->n_ineq(); ++i) {
        seed.active_mask[static_cast<std::size_t>(i)] =
            slack0[i] > -popts.tol_active;
      }
      popts.warm = &seed;
      const ProjectionResult res = project(*set, y, popts);

      Vector cot(E * W);
      for (Index w = 0; w < W; ++w) cot.segment(w * E, E) = w_x;
      GradientRequest req;
      req.cotangent = cot;
      const EquilibriumGradient g =
          grad_implicit(problem, lambda, z_star, res, r, req);
      if (info) {
        info->mode_used = GradMode::implicit;
        info->condition_estimate = g.condition_estimate;
        info->fell_back = false;
      }
      return g.dz_dlambda.row(0).transpose();
    } catch (const DegeneracyError&) {
      // fall through to the unrolled path-formulation replay
    }
  }

  const VIProblem prob_path =
      assemble_vi(cm, dm, ViForm::path, eq.paths, binding);
  const Matrix Delta = eq.paths.edge_incidence(E);
  GradientRequest req;
  req.cotangent = Vector(Delta.transpose() * w_x);
  const EquilibriumGradient g = grad_unrolled_tail(
      prob_path, lambda, eq.path_flows, unroll_tail, req);
  if (info) {
    info->mode_used = GradMode::unrolled;
    info->condition_estimate = 0.0;
    info->fell_back = true;
  }
  return g.dz_dlambda.row(0).transpose();
}

double learning_loss(const Vector& x, const Vector& obs,
                     const std::vector<std::uint8_t>& mask) {
  double loss = 0.0;
  for (Index e = 0; e < x.size(); ++e) {
    if (mask[static_cast<std::size_t>(e)]) {
      const double d = x[e] - obs[e];
      loss += d * d;
    }
  }
  return loss;
}

ParameterBinding toll_binding(const InterventionSpec& spec) {
  ParameterBinding b;
  for (int e : spec.toll_edges) {
    b.refs.push_back({ParamRef::Kind::toll, e});
  }
  b.lower = Vector::Zero(b.size());
  b.upper = Vector::Constant(b.size(), spec.toll_max);
  return b;
}

struct InterventionEval {
  double objective = 0.0;
  FlowMetrics met;
  EquilibriumState eq;
};

InterventionEval intervention_eval(const InterventionSpec& spec,
                                   const ParameterBinding& binding,
                                   const Vector& tolls, double bound,
                                   double rho,
                                   const EquilibriumState* warm) {
  InterventionEval out;
  const CostModel cm = binding.apply(spec.design_cost, tolls);
  ColumnGenOptions cg;
  cg.warm = warm;
  out.eq = solve_equilibrium(cm, spec.demands, spec.forward, cg);
  out.met = metrics_for_flows(out.eq.edge_flows, cm);
  const double viol = std::max(0.0, out.met.total_crowding_cost - bound);
  out.objective = out.met.total_travel_time + rho * viol * viol;
  return out;
}

}  // namespace

std::pair<double, Vector> loss_and_grad(const LearningSpec& spec,
                                        const Vector& lambda, int period,
                                        EquilibriumState* warm,
                                        GradInfo* info) {
  require(!spec.observations.empty(),
          "loss_and_grad: observations not generated");
  require(period >= 0 &&
              period < static_cast<int>(spec.demands.size()),
          "loss_and_grad: period out of range");
  const CostModel cm = spec.binding.apply(spec.true_cost, lambda);
  ColumnGenOptions cg;
  if (warm != nullptr && warm->paths.n_paths() > 0) cg.warm = warm;
  EquilibriumState eq =
      solve_equilibrium(cm, spec.demands[static_cast<std::size_t>(period)],
                        spec.forward, cg);

  const auto mask = observed_mask(*cm.net, spec.observed_kinds);
  const Vector& obs = spec.observations[static_cast<std::size_t>(period)];
  const double loss = learning_loss(eq.edge_flows, obs, mask);

  Vector w_x = Vector::Zero(cm.net->n_edges());
  for (Index e = 0; e < w_x.size(); ++e) {
    if (mask[static_cast<std::size_t>(e)]) {
      w_x[e] = 2.0 * (eq.edge_flows[e] - obs[e]);
    }
  }
  const Vector grad = equilibrium_vjp(
      cm, spec.demands[static_cast<std::size_t>(period)], eq, spec.binding,
      lambda, w_x, spec.unroll_tail, info);
  if (warm != nullptr) *warm = std::move(eq);
  return {loss, grad};
}

std::pair<double, Vector> loss_and_grad(const InterventionSpec& spec,
                                        const Vector& tolls,
                                        double crowding_bound, double rho,
                                        EquilibriumState* warm,
                                        GradInfo* info) {
  const ParameterBinding binding = toll_binding(spec);
  require(tolls.size() == binding.size(), "loss_and_grad: toll vector size");
  const CostModel cm = binding.apply(spec.design_cost, tolls);
  ColumnGenOptions cg;
  if (warm != nullptr && warm->paths.n_paths() > 0) cg.warm = warm;
  EquilibriumState eq = solve_equilibrium(cm, spec.demands, spec.forward, cg);
  const FlowMetrics met = metrics_for_flows(eq.edge_flows, cm);
  const double viol = std::max(0.0, met.total_crowding_cost - crowding_bound);
  const double objective = met.total_travel_time + rho * viol * viol;

  // d objective / d x: marginal travel time plus the penalty's marginal
  // crowding cost. Tolls do not enter either term directly.
  Vector w_x = Vector::Zero(cm.net->n_edges());
  for (Index e = 0; e < w_x.size(); ++e) {
    const double x = eq.edge_flows[e];
    w_x[e] = cm.time_of(static_cast<int>(e), x) +
             cm.time_slope(static_cast<int>(e), x) * x;
    if (viol > 0.0) {
      w_x[e] += 2.0 * rho * viol *
                (cm.crowding_of(static_cast<int>(e), x) +
                 cm.crowding_slope(static_cast<int>(e), x) * x);
    }
  }
  const Vector grad = equilibrium_vjp(cm, spec.demands, eq, binding, tolls,
                                      w_x, spec.unroll_tail, info);
  if (warm != nullptr) *warm = std::move(eq);
  return {objective, grad};
}

std::vector<Vector> generate_observations(const LearningSpec& spec) {
  SolverOptions tight = spec.forward;
  tight.eps_newton = std::min(spec.forward.eps_newton, 1e-6);
  tight.max_iter = std::max(spec.forward.max_iter, 300);
  const auto mask = observed_mask(*spec.true_cost.net, spec.observed_kinds);

  std::vector<Vector> obs;
  for (const DemandMatrix& dm : spec.demands) {
    const EquilibriumState eq = solve_equilibrium(spec.true_cost, dm, tight);
    Vector x = eq.edge_flows;
    if (spec.obs_rounding > 0.0) {
      for (Index e = 0; e < x.size(); ++e) {
        if (mask[static_cast<std::size_t>(e)]) {
          x[e] = std::round(x[e] / spec.obs_rounding) * spec.obs_rounding;
        }
      }
    }
    obs.push_back(std::move(x));
  }
  return obs;
}

TrainTrace learn(const LearningSpec& spec_in) {
  LearningSpec spec = spec_in;
  require(spec.initial.size() == spec.binding.size(),
          "learn: initial parameter size mismatch");
  require(spec.learning_rates.size() == spec.binding.size(),
          "learn: learning-rate size mismatch");
  require((spec.learning_rates.array() >= 0).all(),
          "learn: learning rates must be nonnegative");
  require(spec.n_train >= 1 &&
              spec.n_train <= static_cast<int>(spec.demands.size()),
          "learn: train/test split out of range");
  if (spec.observations.empty()) {
    spec.observations = generate_observations(spec);
  }

  const Index n_periods = static_cast<Index>(spec.demands.size());
  std::vector<EquilibriumState> warm(static_cast<std::size_t>(n_periods));
  Rng rng(spec.seed);
  Vector lambda =
      clip_to_box(spec.initial, spec.binding.lower, spec.binding.upper);

  const auto mask = observed_mask(*spec.true_cost.net, spec.observed_kinds);
  auto loss_only = [&](int period) {
    const CostModel cm = spec.binding.apply(spec.true_cost, lambda);
    ColumnGenOptions cg;
    auto& w = warm[static_cast<std::size_t>(period)];
    if (w.paths.n_paths() > 0) cg.warm = &w;
    EquilibriumState eq = solve_equilibrium(
        cm, spec.demands[static_cast<std::size_t>(period)], spec.forward, cg);
    const double loss = learning_loss(
        eq.edge_flows, spec.observations[static_cast<std::size_t>(period)],
        mask);
    w = std::move(eq);
    return loss;
  };

  TrainTrace trace;
  bool sticky_unrolled = false;
  double initial_loss = -1.0;
  std::vector<int> order(static_cast<std::size_t>(spec.n_train));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    rng.shuffle(order);
    double running = 0.0;
    for (int period : order) {
      GradInfo info;
      info.skip_implicit = sticky_unrolled;
      auto [loss, grad] = loss_and_grad(
          spec, lambda, period, &warm[static_cast<std::size_t>(period)],
          &info);
      if (info.fell_back || info.skip_implicit) {
        ++trace.n_unrolled;
        sticky_unrolled = true;
      } else {
        ++trace.n_implicit;
      }
      running += loss;
      if (initial_loss < 0.0) initial_loss = std::max(loss, 1e-12);
      if (loss > 1e6 * initial_loss) {
        trace.diverged = true;
        trace.final_params = lambda;
        return trace;
      }
      lambda = clip_to_box(
          lambda - spec.learning_rates.cwiseProduct(grad),
          spec.binding.lower, spec.binding.upper);
    }
    TrainTrace::EpochRow row;
    row.epoch = epoch;
    row.train_loss = running / spec.n_train;
    double test = 0.0;
    const int n_test = static_cast<int>(n_periods) - spec.n_train;
    for (int p = spec.n_train; p < static_cast<int>(n_periods); ++p) {
      test += loss_only(p);
    }
    row.test_loss = n_test > 0 ? test / n_test : 0.0;
    row.params = lambda;
    trace.epochs.push_back(std::move(row));
  }
  trace.final_params = lambda;
  return trace;
}

DesignResult design_tolls(const InterventionSpec& spec) {
  const ParameterBinding binding = toll_binding(spec);
  DesignResult out;

  Vector tolls = Vector::Zero(binding.size());
  EquilibriumState warm;
  const InterventionEval base =
      intervention_eval(spec, binding, tolls, 0.0, 0.0, nullptr);
  out.before = base.met;
  warm = base.eq;
  const double bound =
      (1.0 + spec.budget_fraction) * base.met.total_crowding_cost;

  double rho = spec.rho0;
  GradInfo info;
  auto [phi, grad] = loss_and_grad(spec, tolls, bound, rho, &warm, &info);
  FlowMetrics met = base.met;
  out.status = "budget";
  for (int outer = 0; outer < spec.max_outer; ++outer) {
    // Projected steepest descent with Armijo backtracking.
    double t = spec.step0;
    bool accepted = false;
    Vector tolls_next;
    InterventionEval trial;
    for (int bt = 0; bt <= spec.max_backtracks; ++bt) {
      tolls_next =
          clip_to_box(tolls - t * grad, binding.lower, binding.upper);
      trial = intervention_eval(spec, binding, tolls_next, bound, rho, &warm);
      const double decrease = spec.armijo_c1 * grad.dot(tolls - tolls_next);
      if (trial.objective <= phi - decrease) {
        accepted = true;
        break;
      }
      t *= spec.backtrack_factor;
    }
    if (!accepted) {
      out.status = "stalled";
      break;
    }
    const double move = (tolls_next - tolls).cwiseAbs().maxCoeff();
    tolls = tolls_next;
    met = trial.met;
    warm = trial.eq;

    DesignStep step;
    step.iter = outer;
    step.objective = trial.objective;
    step.tt = met.total_travel_time;
    step.crowding = met.total_crowding_cost;
    step.step = t;
    step.rho = rho;
    out.trace.push_back(step);

    const bool violated =
        met.total_crowding_cost > bound * (1.0 + 1e-9) + 1e-12;
    if (violated) rho *= 10.0;
    std::tie(phi, grad) = loss_and_grad(spec, tolls, bound, rho, &warm, &info);
    if (!violated && move <= 1e-5 * (1.0 + tolls.cwiseAbs().maxCoeff())) {
      out.status = "converged";
      break;
    }
  }

  out.tolls = tolls;
  out.after = met;
  out.tt_reduction_pct = 100.0 *
                         (out.before.total_travel_time -
                          out.after.total_travel_time) /
                         out.before.total_travel_time;
  out.crowding_increase_pct = 100.0 *
                              (out.after.total_crowding_cost -
                               out.before.total_crowding_cost) /
                              out.before.total_crowding_cost;

  if (spec.true_cost) {
    // Truth-side evaluation uses the true behavior end to end; nothing from
    // the design-side equilibria crosses over.
    CostModel truth_base = *spec.true_cost;
    const EquilibriumState eq0 =
        solve_equilibrium(truth_base, spec.demands, spec.forward);
    out.before_true = metrics_for_flows(eq0.edge_flows, truth_base);
    ParameterBinding tb = binding;
    const CostModel truth_tolled = tb.apply(truth_base, tolls);
    const EquilibriumState eq1 =
        solve_equilibrium(truth_tolled, spec.demands, spec.forward);
    out.after_true = metrics_for_flows(eq1.edge_flows, truth_tolled);
  }
  return out;
}

}  // namespace vil
