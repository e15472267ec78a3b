#pragma once

#include "vil/solvers.hpp"
#include "vil/vi_problem.hpp"

#include <json.hpp>

#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace vil {

enum class EdgeKind { driving, riding, starting, connector };

std::string to_string(EdgeKind kind);
EdgeKind edge_kind_from_string(const std::string& s);

struct EdgeCostParams {
  double T = 0.0;  // free-flow time
  double s = std::numeric_limits<double>::infinity();      // capacity
  double m = 0.0;  // monetary cost
  double w = 0.0;  // waiting time (starting/connector edges)
  double q_cap = std::numeric_limits<double>::infinity();  // crowding capacity
  double bpr_coeff = 1.0;
  int bpr_power = 2;
};

struct Edge {
  int tail = 0;
  int head = 0;
  EdgeKind kind = EdgeKind::driving;
  EdgeCostParams cost;
  std::string name;
};

struct Network {
  std::vector<std::string> node_names;
  std::vector<Edge> edges;
  std::vector<std::pair<int, int>> od_pairs;

  Index n_nodes() const { return static_cast<Index>(node_names.size()); }
  Index n_edges() const { return static_cast<Index>(edges.size()); }
  Index n_od() const { return static_cast<Index>(od_pairs.size()); }
  int node_id(const std::string& name) const;
  bool has_riding() const;
  bool has_directed_cycle() const;
  void validate() const;
};

/// Riding discomfort term: the experiment-table form tau*(1 + (x/q)^2), or
/// the pure-quadratic tau*(x/q)^2.
enum class RidingCostForm { offset_quadratic, pure_quadratic };

struct BehaviorParams {
  double gamma = 1.0;  // time value of money
  double tau = 1.0;    // crowding weight
  RidingCostForm riding_form = RidingCostForm::offset_quadratic;
  /// Per-edge crowding-capacity overrides (NaN = keep the edge's own value);
  /// empty means no overrides.
  std::vector<double> q_cap_override;

  double effective_q_cap(int edge, const EdgeCostParams& p) const;
};

struct DemandMatrix {
  Vector q;        // one entry per od pair, >= 0
  int period = 0;
};

struct PathSet {
  std::vector<std::vector<int>> paths;  // edge index sequences
  std::vector<int> od_of_path;

  Index n_paths() const { return static_cast<Index>(paths.size()); }
  /// M: od x paths incidence, M f = q.
  Matrix demand_incidence(Index n_od) const;
  /// Delta: edges x paths incidence, x = Delta f.
  Matrix edge_incidence(Index n_edges) const;
  bool contains(const std::vector<int>& edge_seq, int od) const;
  /// Appends paths not already present; returns how many were added.
  int merge(const PathSet& other);
};

/// Splits every node into starting/ending/driving/riding sub-nodes, turning
/// mode choice into route choice. Driving edges connect v sub-nodes, riding
/// edges connect p sub-nodes; s->v connectors cost zero, s->p starting edges
/// carry the configured waiting time, and v->e / p->e sinks cost zero.
/// OD pairs are remapped to (s, e).
Network expand_network(const Network& base);

/// Generalized cost of one edge at flow x, with an optional toll added to
/// the monetary term. Strictly increasing in x for congestible edges.
double edge_cost(const Edge& e, const BehaviorParams& b, double x,
                 double toll = 0.0);
/// d(edge_cost)/dx.
double edge_cost_slope(const Edge& e, const BehaviorParams& b, double x);
/// Time component only (free-flow plus congestion delay; waiting excluded).
double edge_time(const Edge& e, const BehaviorParams& b, double x);
/// Crowding (hidden discomfort) component only.
double edge_crowding(const Edge& e, const BehaviorParams& b, double x);

/// A network with behavior parameters and tolls bound to it; the cost map
/// the VI formulations evaluate.
struct CostModel {
  std::shared_ptr<const Network> net;
  BehaviorParams behavior;
  Vector tolls;  // per edge; empty means zero
  /// Per-edge capacity overrides for design problems (NaN = edge value).
  std::vector<double> capacity_override;

  double toll(int e) const { return tolls.size() > 0 ? tolls[e] : 0.0; }
  double effective_capacity(int e) const;
  Vector costs(const Vector& x) const;
  Vector slopes(const Vector& x) const;
  Vector free_flow_costs() const;
  // Cost components and their flow derivatives, override-aware.
  double time_of(int e, double x) const;
  double time_slope(int e, double x) const;
  double crowding_of(int e, double x) const;
  double crowding_slope(int e, double x) const;
};

/// One learnable or designable scalar inside a CostModel.
struct ParamRef {
  enum class Kind { gamma, tau, q_cap, capacity, toll } kind;
  int edge = -1;  // for per-edge kinds
};

/// Maps a parameter vector onto CostModel fields, with box bounds.
struct ParameterBinding {
  std::vector<ParamRef> refs;
  Vector lower;
  Vector upper;

  Index size() const { return static_cast<Index>(refs.size()); }
  Vector pack(const CostModel& cost) const;
  CostModel apply(const CostModel& cost, const Vector& lambda) const;
  /// dc/dlambda columns at edge flows x (n_edges x size()).
  Matrix cost_jacobian(const CostModel& cost, const Vector& x) const;
};

/// All-or-nothing assignment: per od, the whole demand rides the single
/// minimum-cost path under the given frozen edge costs. Cost ties pick the
/// lexicographically smallest node sequence, so results are deterministic.
std::pair<Vector, PathSet> shortest_paths_aon(const Network& net,
                                              const Vector& edge_costs,
                                              const DemandMatrix& demands);

enum class ViForm { edge, path };

/// Builds the VI whose solutions are Wardrop equilibria. The path form works
/// on path flows over {f >= 0, M f = q}; the edge form works on per-commodity
/// edge flows with node conservation (plus a loose per-commodity total-flow
/// cap when the graph has directed cycles, which keeps the set bounded
/// without moving any solution). `binding` exposes cost parameters as lambda.
VIProblem assemble_vi(const CostModel& cost, const DemandMatrix& demands,
                      ViForm form, const PathSet& paths,
                      const ParameterBinding& binding = {});

/// Stacks path flows into per-commodity edge flows (edge-form variables).
Vector commodity_flows_from_paths(const Network& net, const PathSet& paths,
                                  const Vector& path_flows);

struct EquilibriumState {
  Vector edge_flows;
  Vector path_flows;
  PathSet paths;
  double wardrop_gap = 0.0;
  SolveStatus status = SolveStatus::converged;
  int outer_rounds = 0;
  SolveTrace last_trace;  // restricted solve at the terminal path set
};

struct ColumnGenOptions {
  int max_rounds = 40;
  /// Warm start from a previous solve at nearby parameters.
  const EquilibriumState* warm = nullptr;
};

/// Column-generation equilibrium: starts from the all-or-nothing path set,
/// alternates restricted path-VI solves with shortest-path augmentation, and
/// stops when no path improves and the Wardrop gap meets opts.eps_newton.
EquilibriumState solve_equilibrium(const CostModel& cost,
                                   const DemandMatrix& demands,
                                   const SolverOptions& opts,
                                   const ColumnGenOptions& cg = {});

struct PerEdgeMetrics {
  int edge = 0;
  double flow = 0.0;
  double cost = 0.0;
  double time = 0.0;
  double crowding = 0.0;
};

struct FlowMetrics {
  double total_travel_time = 0.0;
  double total_crowding_cost = 0.0;
  std::vector<PerEdgeMetrics> per_edge;
};

FlowMetrics metrics(const EquilibriumState& state, const CostModel& cost);
FlowMetrics metrics_for_flows(const Vector& edge_flows, const CostModel& cost);

/// Per-iteration benchmark driver: one projection or Newton step on the
/// restricted path VI, then shortest-path augmentation, per iteration. Gap
/// values are full-network Wardrop gaps, so methods are comparable.
enum class BenchMethod { projection, projection_newton };

struct BenchStep {
  int iter = 0;
  SolvePhase phase = SolvePhase::projection;
  double gap = 0.0;
  double r = 0.0;
  int n_paths = 0;
};

struct BenchTrace {
  std::vector<BenchStep> steps;
  int iters_to_target = -1;  // first iteration with gap <= eps_newton
  double final_gap = 0.0;
};

BenchTrace benchmark_interleaved(const CostModel& cost,
                                 const DemandMatrix& demands,
                                 const SolverOptions& opts,
                                 BenchMethod method);

// --- JSON file formats (schema-tagged) ---

Network network_from_json(const nlohmann::json& j);
Network load_network(const std::string& path);

struct DemandSpec {
  int periods = 1;
  bool generated = false;
  double low = 0.0, high = 0.0;
  std::uint64_t seed = 0;
  std::vector<Vector> values;  // explicit per-period demands when !generated

  std::vector<DemandMatrix> realize(Index n_od) const;
};

DemandSpec demand_spec_from_json(const nlohmann::json& j);
DemandSpec load_demand_spec(const std::string& path);

}  // namespace vil
