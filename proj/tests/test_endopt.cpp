#include "vil/endopt.hpp"

#include "vil/experiment.hpp"
#include "vil/rng.hpp"

#include <doctest.h>

using namespace vil;

namespace {

const std::string kConfigDir = VIL_CONFIG_DIR;

struct CityFixture {
  std::shared_ptr<const Network> net;
  std::vector<DemandMatrix> demands;
  SolverOptions forward;

  CityFixture() {
    const Network base =
        load_network(kConfigDir + "/networks/linear_city.json");
    net = std::make_shared<const Network>(expand_network(base));
    DemandSpec spec;
    spec.generated = true;
    spec.periods = 4;
    spec.low = 5.0;
    spec.high = 10.0;
    spec.seed = 11;
    demands = spec.realize(net->n_od());
    forward.eps_proj = 1.0;
    forward.eps_newton = 1e-5;
    forward.max_iter = 200;
  }

  std::vector<int> driving() const {
    std::vector<int> out;
    for (Index e = 0; e < net->n_edges(); ++e) {
      if (net->edges[static_cast<std::size_t>(e)].kind == EdgeKind::driving) {
        out.push_back(static_cast<int>(e));
      }
    }
    return out;
  }
};

}  // namespace

TEST_CASE("perfect-fit stationarity: loss and gradient vanish at the truth") {
  const CityFixture fx;
  LearningSpec spec =
      city_learning_preset(fx.net, fx.demands, 'a', 5, 3, fx.forward);
  spec.n_train = 3;
  spec.obs_rounding = 0.0;  // noiseless observations
  spec.forward.eps_newton = 1e-8;
  spec.observations = generate_observations(spec);
  const Vector truth = spec.binding.pack(spec.true_cost);
  const auto [loss, grad] = loss_and_grad(spec, truth, 0);
  CHECK(loss <= 1e-6);
  CHECK(grad.cwiseAbs().maxCoeff() <= 1e-3);
}

TEST_CASE("learning gradient matches full-pipeline finite differences") {
  const CityFixture fx;
  LearningSpec spec =
      city_learning_preset(fx.net, fx.demands, 'a', 5, 3, fx.forward);
  spec.n_train = 2;
  spec.forward.eps_newton = 1e-7;
  spec.observations = generate_observations(spec);

  Vector lam(spec.binding.size());
  lam << 0.7, 1.1, 15, 21, 16, 20, 14, 19, 15, 20;
  const auto [loss, grad] = loss_and_grad(spec, lam, 1);
  (void)loss;
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    const Index k = rng.uniform_int(0, static_cast<int>(lam.size()) - 1);
    const double h = 1e-5 * (1.0 + std::abs(lam[k]));
    Vector lp = lam, lm = lam;
    lp[k] += h;
    lm[k] -= h;
    const double fd = (loss_and_grad(spec, lp, 1).first -
                       loss_and_grad(spec, lm, 1).first) /
                      (2 * h);
    CHECK(std::abs(grad[k] - fd) <= 1e-3 * (1.0 + std::abs(fd)));
  }
}

TEST_CASE("zero learning rates leave parameters and loss unchanged") {
  const CityFixture fx;
  LearningSpec spec =
      city_learning_preset(fx.net, fx.demands, 'a', 3, 5, fx.forward);
  spec.n_train = 2;
  spec.learning_rates.setZero();
  const TrainTrace trace = learn(spec);
  REQUIRE(trace.epochs.size() == 3);
  CHECK((trace.final_params - spec.initial.cwiseMax(spec.binding.lower))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK(trace.epochs.front().train_loss ==
        doctest::Approx(trace.epochs.back().train_loss));
}

TEST_CASE("initializing at the truth with unrounded data is a fixed point") {
  const CityFixture fx;
  LearningSpec spec =
      city_learning_preset(fx.net, fx.demands, 'a', 3, 5, fx.forward);
  spec.n_train = 2;
  spec.obs_rounding = 0.0;
  spec.forward.eps_newton = 1e-8;
  spec.initial = spec.binding.pack(spec.true_cost);
  const TrainTrace trace = learn(spec);
  for (const auto& row : trace.epochs) {
    CHECK(row.train_loss <= 1e-8);
  }
}

TEST_CASE("parameters stay inside their physical boxes during training") {
  const CityFixture fx;
  LearningSpec spec =
      city_learning_preset(fx.net, fx.demands, 'a', 4, 7, fx.forward);
  spec.n_train = 2;
  // Aggressive rates to provoke box excursions.
  spec.learning_rates = Vector::Constant(spec.binding.size(), 5e-2);
  const TrainTrace trace = learn(spec);
  for (const auto& row : trace.epochs) {
    CHECK((row.params.array() >= spec.binding.lower.array() - 1e-12).all());
    CHECK((row.params.array() <= spec.binding.upper.array() + 1e-12).all());
  }
}

TEST_CASE("degenerate toll box keeps the design and travel time unchanged") {
  const CityFixture fx;
  InterventionSpec spec;
  spec.net = fx.net;
  spec.demands = fx.demands[0];
  spec.design_cost.net = fx.net;
  spec.toll_edges = fx.driving();
  spec.toll_max = 0.0;  // degenerate box
  spec.max_outer = 5;
  spec.forward = fx.forward;
  const DesignResult res = design_tolls(spec);
  CHECK(res.tolls.cwiseAbs().maxCoeff() == 0.0);
  CHECK(res.after.total_travel_time ==
        doctest::Approx(res.before.total_travel_time));
}

TEST_CASE("design objectives decrease at constant penalty weight") {
  const CityFixture fx;
  InterventionSpec spec;
  spec.net = fx.net;
  spec.demands = fx.demands[0];
  spec.design_cost.net = fx.net;
  spec.toll_edges = fx.driving();
  spec.toll_max = 3.0;
  spec.max_outer = 6;
  spec.forward = fx.forward;
  const DesignResult res = design_tolls(spec);
  for (std::size_t k = 1; k < res.trace.size(); ++k) {
    if (res.trace[k].rho == res.trace[k - 1].rho) {
      CHECK(res.trace[k].objective <= res.trace[k - 1].objective + 1e-9);
    }
  }
  CHECK((res.tolls.array() >= -1e-12).all());
  CHECK((res.tolls.array() <= spec.toll_max + 1e-12).all());
}

TEST_CASE("intervention gradient matches directional finite differences") {
  const CityFixture fx;
  InterventionSpec spec;
  spec.net = fx.net;
  spec.demands = fx.demands[0];
  spec.design_cost.net = fx.net;
  spec.toll_edges = fx.driving();
  spec.toll_max = 3.0;
  spec.forward = fx.forward;
  // The merit target must sit well below the FD step effects.
  spec.forward.eps_newton = 1e-9;
  spec.forward.max_iter = 400;

  Rng rng(19);
  const double bound = 1e9;  // penalty inactive: pure travel time
  Vector tolls =
      Vector::Constant(static_cast<Index>(spec.toll_edges.size()), 0.3);
  const auto [phi, grad] = loss_and_grad(spec, tolls, bound, 0.0);
  (void)phi;
  for (int trial = 0; trial < 3; ++trial) {
    Vector dir = rng.normal_vector(tolls.size());
    dir /= dir.norm();
    const double h = 1e-4;
    const double fp =
        loss_and_grad(spec, Vector(tolls + h * dir), bound, 0.0).first;
    const double fm =
        loss_and_grad(spec, Vector(tolls - h * dir), bound, 0.0).first;
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(grad.dot(dir) - fd) <= 1e-3 * (1.0 + std::abs(fd)));
  }
}

TEST_CASE("truth evaluation never uses the design-side cost model") {
  const CityFixture fx;
  InterventionSpec spec;
  spec.net = fx.net;
  spec.demands = fx.demands[0];
  spec.design_cost.net = fx.net;
  spec.design_cost.behavior.gamma = 0.5;  // deliberately wrong
  CostModel truth;
  truth.net = fx.net;
  spec.true_cost = truth;  // gamma = 1
  spec.toll_edges = fx.driving();
  spec.toll_max = 2.0;
  spec.max_outer = 4;
  spec.forward = fx.forward;
  const DesignResult res = design_tolls(spec);
  REQUIRE(res.before_true.has_value());
  REQUIRE(res.after_true.has_value());
  // The truth-side baseline must match a fresh truth-model solve.
  const EquilibriumState eq =
      solve_equilibrium(truth, spec.demands, fx.forward);
  const FlowMetrics met = metrics(eq, truth);
  CHECK(res.before_true->total_travel_time ==
        doctest::Approx(met.total_travel_time).epsilon(1e-9));
  CHECK(res.before_true->total_travel_time !=
        doctest::Approx(res.before.total_travel_time).epsilon(1e-6));
}
