#include "vil/routing.hpp"

#include "vil/rng.hpp"

#include <doctest.h>

using namespace vil;

namespace {

const std::string kConfigDir = VIL_CONFIG_DIR;

Network two_node_corridor() {
  Network base;
  base.node_names = {"1", "2"};
  Edge drive;
  drive.kind = EdgeKind::driving;
  drive.cost.T = 1.0;
  drive.cost.s = 10.0;
  Edge ride;
  ride.kind = EdgeKind::riding;
  ride.cost.T = 1.1;
  ride.cost.q_cap = 18.0;
  ride.cost.w = 1.0;
  for (auto [t, h] : {std::pair{0, 1}, std::pair{1, 0}}) {
    Edge d = drive;
    d.tail = t;
    d.head = h;
    base.edges.push_back(d);
    Edge r = ride;
    r.tail = t;
    r.head = h;
    base.edges.push_back(r);
  }
  base.od_pairs = {{0, 1}, {1, 0}};
  return base;
}

Network parallel_pair(double c1_T, double c2_T) {
  Network net;
  net.node_names = {"A", "B"};
  for (double T : {c1_T, c2_T}) {
    Edge e;
    e.tail = 0;
    e.head = 1;
    e.kind = EdgeKind::driving;
    e.cost.T = T;
    e.cost.s = 1.0;
    e.cost.bpr_coeff = 1.0;
    e.cost.bpr_power = 1;
    net.edges.push_back(e);
  }
  net.od_pairs = {{0, 1}};
  return net;
}

CostModel plain_cost(const Network& net) {
  CostModel cm;
  cm.net = std::make_shared<const Network>(net);
  return cm;
}

}  // namespace

TEST_CASE("expanding a two-node bidirectional corridor") {
  const Network expanded = expand_network(two_node_corridor());
  CHECK(expanded.n_nodes() == 8);  // s, e, v, p per base node
  int starting = 0;
  for (const Edge& e : expanded.edges) {
    if (e.kind == EdgeKind::starting) {
      ++starting;
      CHECK(e.cost.w == 1.0);
    }
  }
  CHECK(starting == 2);
  // driving 2 + riding 2 + (s-v, v-e, s-p, p-e) per node
  CHECK(expanded.n_edges() == 2 + 2 + 4 * 2);
  CHECK(expanded.od_pairs.size() == 2);
}

TEST_CASE("driving-only networks expand without riding sub-nodes") {
  Network base = parallel_pair(1.0, 2.0);
  const Network expanded = expand_network(base);
  CHECK(expanded.n_nodes() == 6);  // s, e, v only
  int driving = 0;
  for (const Edge& e : expanded.edges) {
    CHECK(e.kind != EdgeKind::riding);
    CHECK(e.kind != EdgeKind::starting);
    if (e.kind == EdgeKind::driving) ++driving;
  }
  CHECK(driving == 2);
}

TEST_CASE("the shipped linear city expands to the hand enumeration") {
  const Network base =
      load_network(kConfigDir + "/networks/linear_city.json");
  int riding = 0;
  for (const Edge& e : base.edges) {
    if (e.kind == EdgeKind::riding) ++riding;
  }
  CHECK(riding == 8);
  const Network city = expand_network(base);
  CHECK(city.n_nodes() == 20);
  // 8 driving + 8 riding + per node (s-v, v-e, s-p, p-e)
  CHECK(city.n_edges() == 8 + 8 + 5 * 4);
  CHECK(city.od_pairs.size() == 20);
}

TEST_CASE("edge costs reproduce the configured arithmetic") {
  BehaviorParams b;  // gamma = tau = 1, offset form
  Edge ride;
  ride.kind = EdgeKind::riding;
  ride.cost.T = 1.1;
  ride.cost.m = 0.05;
  ride.cost.q_cap = 18.0;
  CHECK(edge_cost(ride, b, 0.0) == doctest::Approx(2.15));

  Edge start;
  start.kind = EdgeKind::starting;
  start.cost.w = 1.0;
  CHECK(edge_cost(start, b, 0.0) == doctest::Approx(1.0));
  CHECK(edge_cost(start, b, 57.0) == doctest::Approx(1.0));

  Edge drive;
  drive.kind = EdgeKind::driving;
  drive.cost.T = 2.0;
  drive.cost.s = 5.0;
  drive.cost.bpr_coeff = 0.15;
  drive.cost.bpr_power = 4;
  CHECK(edge_cost(drive, b, 5.0) == doctest::Approx(2.0 * 1.15));

  CHECK_THROWS_AS(edge_cost(drive, b, -1.0), InputError);
}

TEST_CASE("cost slope matches finite differences and is nonnegative") {
  BehaviorParams b;
  b.gamma = 0.8;
  b.tau = 1.3;
  Edge ride;
  ride.kind = EdgeKind::riding;
  ride.cost.T = 1.5;
  ride.cost.s = 4.0;  // finite capacity riding edge
  ride.cost.m = 0.1;
  ride.cost.q_cap = 9.0;
  ride.cost.bpr_coeff = 1.0;
  ride.cost.bpr_power = 2;
  for (double x : {0.0, 1.0, 4.0, 9.0, 15.0}) {
    const double h = 1e-6 * (1 + x);
    const double lo = std::max(x - h, 0.0);
    const double fd =
        (edge_cost(ride, b, x + h) - edge_cost(ride, b, lo)) / (x + h - lo);
    CHECK(edge_cost_slope(ride, b, x) == doctest::Approx(fd).epsilon(1e-4));
    CHECK(edge_cost_slope(ride, b, x) >= 0.0);
  }
  // At x = s the configured slope is 2T/s + 2 tau s / q^2.
  const double expected = 2 * 1.5 / 4.0 + 2 * 1.3 * 4.0 / (9.0 * 9.0);
  CHECK(edge_cost_slope(ride, b, 4.0) == doctest::Approx(expected));
}

TEST_CASE("all-or-nothing assignment loads the single cheapest path") {
  const Network net = parallel_pair(1.0, 2.0);
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 5.0);
  Vector costs(2);
  costs << 1.0, 2.0;
  const auto [flow, paths] = shortest_paths_aon(net, costs, dm);
  CHECK(flow[0] == doctest::Approx(5.0));
  CHECK(flow[1] == doctest::Approx(0.0));
  CHECK(paths.n_paths() == 1);
}

TEST_CASE("aon ties break toward the lexicographically smaller sequence") {
  // Diamond: A->B->D and A->C->D with identical costs; B precedes C.
  Network net;
  net.node_names = {"A", "B", "C", "D"};
  auto add = [&](int t, int h) {
    Edge e;
    e.tail = t;
    e.head = h;
    e.kind = EdgeKind::driving;
    e.cost.T = 1.0;
    net.edges.push_back(e);
  };
  add(0, 1);
  add(1, 3);
  add(0, 2);
  add(2, 3);
  net.od_pairs = {{0, 3}};
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 1.0);
  const Vector costs = Vector::Ones(4);
  const auto [flow, paths] = shortest_paths_aon(net, costs, dm);
  (void)flow;
  REQUIRE(paths.n_paths() == 1);
  CHECK(paths.paths[0] == std::vector<int>{0, 1});  // through B
  const auto [flow2, paths2] = shortest_paths_aon(net, costs, dm);
  (void)flow2;
  CHECK(paths2.paths[0] == paths.paths[0]);
}

TEST_CASE("braess outer routes tie at zero flow") {
  const Network net = load_network(kConfigDir + "/networks/braess.json");
  const CostModel cm = plain_cost(net);
  const Vector c0 = cm.free_flow_costs();
  // outer routes: top-in + top-out vs bottom-in + bottom-out
  CHECK(c0[0] + c0[2] == doctest::Approx(c0[1] + c0[3]));
  // the shortcut route is strictly cheaper at zero flow
  CHECK(c0[0] + c0[4] + c0[3] < c0[0] + c0[2]);
}

TEST_CASE("aon rejects unreachable sinks") {
  Network net;
  net.node_names = {"A", "B", "C"};
  Edge e;
  e.tail = 0;
  e.head = 1;
  e.kind = EdgeKind::driving;
  e.cost.T = 1.0;
  net.edges.push_back(e);
  net.od_pairs = {{0, 2}};
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 1.0);
  CHECK_THROWS_AS(shortest_paths_aon(net, Vector::Ones(1), dm),
                  ConnectivityError);
}

TEST_CASE("path-form VI over two parallel edges is a scaled simplex") {
  const Network net = parallel_pair(1.0, 1.0);
  const CostModel cm = plain_cost(net);
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 2.0);
  PathSet paths;
  paths.paths = {{0}, {1}};
  paths.od_of_path = {0, 0};
  const VIProblem p = assemble_vi(cm, dm, ViForm::path, paths);
  const auto set = p.omega(Vector(0));
  CHECK(set->is_simplex_product());
  CHECK(set->dim() == 2);
  CHECK(set->q[0] == doctest::Approx(2.0));
}

TEST_CASE("path-form F equals per-path cost summation") {
  const Network base =
      load_network(kConfigDir + "/networks/linear_city.json");
  const auto net = std::make_shared<const Network>(expand_network(base));
  CostModel cm;
  cm.net = net;
  DemandMatrix dm;
  dm.q = Vector::Constant(net->n_od(), 6.0);
  const auto [flow0, paths] =
      shortest_paths_aon(*net, cm.free_flow_costs(), dm);
  (void)flow0;
  const VIProblem p = assemble_vi(cm, dm, ViForm::path, paths);

  Rng rng(5);
  Vector f(paths.n_paths());
  for (Index k = 0; k < f.size(); ++k) f[k] = rng.uniform(0.0, 5.0);
  const Vector Ff = p.F(f, Vector(0));

  // Oracle: aggregate flows by walking the paths, then sum edge costs along
  // each path.
  Vector x = Vector::Zero(net->n_edges());
  for (Index k = 0; k < paths.n_paths(); ++k) {
    for (int e : paths.paths[static_cast<std::size_t>(k)]) x[e] += f[k];
  }
  for (Index k = 0; k < paths.n_paths(); ++k) {
    double cost = 0.0;
    for (int e : paths.paths[static_cast<std::size_t>(k)]) {
      cost += edge_cost(net->edges[static_cast<std::size_t>(e)], cm.behavior,
                        x[e]);
    }
    CHECK(Ff[k] == doctest::Approx(cost).epsilon(1e-12));
  }
}

TEST_CASE("edge-form VI on the braess network has dimension five") {
  const Network net = load_network(kConfigDir + "/networks/braess.json");
  const CostModel cm = plain_cost(net);
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 3.0);
  PathSet paths;  // structure of the set does not depend on the paths
  paths.paths = {{0, 2}};
  paths.od_of_path = {0};
  const VIProblem p = assemble_vi(cm, dm, ViForm::edge, paths);
  CHECK(p.dim == 5);
  const auto set = p.omega(Vector(0));
  CHECK(set->dim() == 5);
  CHECK(set->n_eq() == 3);    // conservation, sink row dropped
  CHECK(set->n_ineq() == 5);  // nonnegativity only: the graph is acyclic
}

TEST_CASE("path form requires a nonempty path set") {
  const Network net = parallel_pair(1.0, 1.0);
  const CostModel cm = plain_cost(net);
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 2.0);
  PathSet empty;
  CHECK_THROWS_AS(assemble_vi(cm, dm, ViForm::path, empty), InputError);
}

TEST_CASE("two identical parallel edges split demand evenly") {
  const Network net = parallel_pair(1.0, 1.0);
  const CostModel cm = plain_cost(net);
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 2.0);
  SolverOptions opts;
  opts.eps_proj = 1e-1;
  opts.eps_newton = 1e-9;
  const EquilibriumState eq = solve_equilibrium(cm, dm, opts);
  CHECK(eq.status == SolveStatus::converged);
  CHECK(eq.edge_flows[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(eq.edge_flows[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("wardrop conditions hold at the braess equilibrium") {
  const Network net = load_network(kConfigDir + "/networks/braess.json");
  const CostModel cm = plain_cost(net);
  DemandMatrix dm;
  dm.q = Vector::Constant(1, 9.0);  // mixed-route regime
  SolverOptions opts;
  opts.eps_proj = 1e-1;
  opts.eps_newton = 1e-8;
  opts.max_iter = 300;
  const EquilibriumState eq = solve_equilibrium(cm, dm, opts);
  REQUIRE(eq.status == SolveStatus::converged);

  const Vector c = cm.costs(eq.edge_flows);
  // Used paths must price within tolerance of the od's minimum.
  double min_cost = std::numeric_limits<double>::infinity();
  std::vector<double> path_costs;
  for (Index k = 0; k < eq.paths.n_paths(); ++k) {
    double cost = 0.0;
    for (int e : eq.paths.paths[static_cast<std::size_t>(k)]) cost += c[e];
    path_costs.push_back(cost);
    min_cost = std::min(min_cost, cost);
  }
  for (Index k = 0; k < eq.paths.n_paths(); ++k) {
    if (eq.path_flows[k] > 1e-4) {
      CHECK(path_costs[static_cast<std::size_t>(k)] <=
            min_cost + 1e-3 * (1.0 + min_cost));
    }
  }
  // Flow conservation and aggregation consistency.
  const Matrix Mpd = eq.paths.demand_incidence(net.n_od());
  CHECK((Mpd * eq.path_flows - dm.q).cwiseAbs().maxCoeff() < 1e-8);
  const Matrix Delta = eq.paths.edge_incidence(net.n_edges());
  CHECK((Delta * eq.path_flows - eq.edge_flows).cwiseAbs().maxCoeff() <
        1e-12);
  // Column-generation soundness: one more sweep adds no improving path.
  const auto [x_aon, aon_paths] = shortest_paths_aon(net, c, dm);
  (void)aon_paths;
  CHECK(c.dot(eq.edge_flows - x_aon) <= opts.eps_newton * 1.01);
}

TEST_CASE("equilibrium solves are deterministic run to run") {
  const Network base =
      load_network(kConfigDir + "/networks/linear_city.json");
  const auto net = std::make_shared<const Network>(expand_network(base));
  CostModel cm;
  cm.net = net;
  DemandSpec spec;
  spec.generated = true;
  spec.periods = 1;
  spec.low = 5.0;
  spec.high = 10.0;
  spec.seed = 42;
  const DemandMatrix dm = spec.realize(net->n_od()).front();
  SolverOptions opts;
  opts.eps_proj = 1.0;
  opts.eps_newton = 1e-4;
  const EquilibriumState a = solve_equilibrium(cm, dm, opts);
  const EquilibriumState b = solve_equilibrium(cm, dm, opts);
  REQUIRE(a.edge_flows.size() == b.edge_flows.size());
  CHECK((a.edge_flows - b.edge_flows).cwiseAbs().maxCoeff() == 0.0);
  const FlowMetrics ma = metrics(a, cm);
  const FlowMetrics mb = metrics(b, cm);
  CHECK(ma.total_travel_time == mb.total_travel_time);
}

TEST_CASE("metrics arithmetic") {
  const Network net = parallel_pair(1.0, 1.0);
  const CostModel cm = plain_cost(net);
  SUBCASE("zero flow means zero totals") {
    const FlowMetrics m = metrics_for_flows(Vector::Zero(2), cm);
    CHECK(m.total_travel_time == 0.0);
    CHECK(m.total_crowding_cost == 0.0);
  }
  SUBCASE("single loaded edge with t = 1 + x") {
    Vector x(2);
    x << 2.0, 0.0;
    const FlowMetrics m = metrics_for_flows(x, cm);
    CHECK(m.total_travel_time == doctest::Approx(6.0));
  }
}

TEST_CASE("demand realization is seeded and deterministic") {
  DemandSpec spec;
  spec.generated = true;
  spec.periods = 3;
  spec.low = 5.0;
  spec.high = 10.0;
  spec.seed = 9;
  const auto a = spec.realize(4);
  const auto b = spec.realize(4);
  REQUIRE(a.size() == 3);
  for (std::size_t p = 0; p < 3; ++p) {
    CHECK((a[p].q - b[p].q).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a[p].q.minCoeff() >= 5.0);
    CHECK(a[p].q.maxCoeff() <= 10.0);
  }
}

TEST_CASE("network json validation reports located diagnostics") {
  nlohmann::json j = {
      {"schema", "vil.network.v1"},
      {"nodes", {"A", "B"}},
      {"edges",
       {{{"tail", "A"},
         {"head", "B"},
         {"kind", "driving"},
         {"T", 1.0},
         {"s", -2.0}}}},
      {"od_pairs", {{"A", "B"}}}};
  try {
    network_from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("/edges/0/s") != std::string::npos);
  }
}
