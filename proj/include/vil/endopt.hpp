#pragma once

#include "vil/autodiff.hpp"
#include "vil/routing.hpp"

#include <optional>

namespace vil {

/// Learning mode: recover hidden cost parameters from observed flows.
struct LearningSpec {
  std::shared_ptr<const Network> net;
  std::vector<DemandMatrix> demands;  // all periods
  int n_train = 6;                    // leading periods train, rest test

  /// Data-generating cost model; used to synthesize observations when none
  /// are supplied.
  CostModel true_cost;

  ParameterBinding binding;  // learnable parameters with physical boxes
  Vector initial;            // initial lambda
  Vector learning_rates;     // per lambda coordinate

  std::vector<EdgeKind> observed_kinds = {EdgeKind::driving,
                                          EdgeKind::riding};
  double obs_rounding = 0.1;  // 0 disables rounding
  /// Per-period observed full-edge flow vectors; empty means generate from
  /// the true cost model.
  std::vector<Vector> observations;

  int epochs = 60;
  std::uint64_t seed = 0;
  SolverOptions forward;     // restricted-VI solver settings
  int unroll_tail = 2000;    // fallback replay depth
};

struct TrainTrace {
  struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0;
    double test_loss = 0.0;
    Vector params;
  };
  std::vector<EpochRow> epochs;
  Vector final_params;
  int n_implicit = 0;   // gradient evaluations served by the implicit mode
  int n_unrolled = 0;   // ... and by the unrolled fallback
  bool diverged = false;
};

/// Intervention mode: choose tolls to cut total travel time subject to a
/// crowding budget.
struct InterventionSpec {
  std::shared_ptr<const Network> net;
  DemandMatrix demands;
  CostModel design_cost;                // behavior used while designing
  std::optional<CostModel> true_cost;   // evaluation behavior, when distinct

  std::vector<int> toll_edges;
  double toll_max = 5.0;
  double budget_fraction = 0.15;  // crowding may grow by this much

  double armijo_c1 = 1e-4;
  double backtrack_factor = 0.5;
  int max_backtracks = 30;
  int max_outer = 40;
  double step0 = 0.5;
  double rho0 = 10.0;  // initial quadratic-penalty weight

  SolverOptions forward;
  int unroll_tail = 2000;
};

struct GradInfo {
  GradMode mode_used = GradMode::implicit;
  double condition_estimate = 0.0;
  bool fell_back = false;
  /// Input: skip the implicit attempt (e.g. once a run has established the
  /// problem is degenerate); the unrolled fallback is used directly.
  bool skip_implicit = false;
};

/// Learning-mode loss and gradient for one period: squared error on observed
/// edge flows, differentiated through the equilibrium with the implicit mode
/// and an automatic unrolled fallback on degeneracy. `warm` carries the
/// period's previous equilibrium across calls.
std::pair<double, Vector> loss_and_grad(const LearningSpec& spec,
                                        const Vector& lambda, int period,
                                        EquilibriumState* warm = nullptr,
                                        GradInfo* info = nullptr);

/// Intervention-mode objective and gradient at penalty weight rho:
/// TT + rho * max(0, crowding - bound)^2.
std::pair<double, Vector> loss_and_grad(const InterventionSpec& spec,
                                        const Vector& tolls,
                                        double crowding_bound, double rho,
                                        EquilibriumState* warm = nullptr,
                                        GradInfo* info = nullptr);

/// Synthesizes rounded observations from the true cost model.
std::vector<Vector> generate_observations(const LearningSpec& spec);

/// Seeded stochastic gradient descent over the training periods, projecting
/// parameters onto their physical boxes after every step. Train loss is the
/// running mean of per-step losses; test loss is evaluated each epoch.
TrainTrace learn(const LearningSpec& spec);

struct DesignStep {
  int iter = 0;
  double objective = 0.0;
  double tt = 0.0;
  double crowding = 0.0;
  double step = 0.0;
  double rho = 0.0;
};

struct DesignResult {
  Vector tolls;
  FlowMetrics before;         // design costs, zero tolls
  FlowMetrics after;          // design costs, final tolls
  std::optional<FlowMetrics> before_true;  // true costs, zero tolls
  std::optional<FlowMetrics> after_true;   // true costs, final tolls
  double tt_reduction_pct = 0.0;
  double crowding_increase_pct = 0.0;
  std::vector<DesignStep> trace;
  std::string status;  // converged / stalled / budget
};

/// Projected steepest descent with Armijo backtracking on the penalized
/// objective; the penalty weight escalates tenfold whenever the crowding
/// bound is violated at an outer iterate. When a distinct true cost model is
/// supplied, the final design is re-evaluated under it.
DesignResult design_tolls(const InterventionSpec& spec);

}  // namespace vil
