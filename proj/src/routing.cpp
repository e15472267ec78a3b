#include "vil/routing.hpp"

#include "vil/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>

namespace vil {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double powi(double x, int p) {
  double out = 1.0;
  for (int i = 0; i < p; ++i) out *= x;
  return out;
}

// Congestion delay factor coeff*(x/s)^p; zero when s is infinite.
double bpr_term(double x, double s, double coeff, int p) {
  if (!std::isfinite(s)) return 0.0;
  return coeff * powi(x / s, p);
}

double bpr_term_dx(double x, double s, double coeff, int p) {
  if (!std::isfinite(s) || p == 0) return 0.0;
  return coeff * p * powi(x / s, p - 1) / s;
}

double crowd_term(double x, double q, const BehaviorParams& b) {
  if (!std::isfinite(q)) return 0.0;
  const double ratio2 = (x / q) * (x / q);
  return b.riding_form == RidingCostForm::offset_quadratic
             ? b.tau * (1.0 + ratio2)
             : b.tau * ratio2;
}

double crowd_term_dx(double x, double q, const BehaviorParams& b) {
  if (!std::isfinite(q)) return 0.0;
  return b.tau * 2.0 * x / (q * q);
}

double cost_raw(const Edge& e, const BehaviorParams& b, double eff_s,
                double eff_q, double toll, double x) {
  switch (e.kind) {
    case EdgeKind::driving:
      return e.cost.T * (1.0 + bpr_term(x, eff_s, e.cost.bpr_coeff,
                                        e.cost.bpr_power)) +
             b.gamma * (e.cost.m + toll);
    case EdgeKind::riding:
      return e.cost.T * (1.0 + bpr_term(x, eff_s, e.cost.bpr_coeff,
                                        e.cost.bpr_power)) +
             b.gamma * (e.cost.m + toll) + crowd_term(x, eff_q, b);
    case EdgeKind::starting:
    case EdgeKind::connector:
      return e.cost.w;
  }
  return 0.0;
}

double slope_raw(const Edge& e, const BehaviorParams& b, double eff_s,
                 double eff_q, double x) {
  switch (e.kind) {
    case EdgeKind::driving:
      return e.cost.T *
             bpr_term_dx(x, eff_s, e.cost.bpr_coeff, e.cost.bpr_power);
    case EdgeKind::riding:
      return e.cost.T *
                 bpr_term_dx(x, eff_s, e.cost.bpr_coeff, e.cost.bpr_power) +
             crowd_term_dx(x, eff_q, b);
    case EdgeKind::starting:
    case EdgeKind::connector:
      return 0.0;
  }
  return 0.0;
}

}  // namespace

std::string to_string(EdgeKind kind) {
  switch (kind) {
    case EdgeKind::driving: return "driving";
    case EdgeKind::riding: return "riding";
    case EdgeKind::starting: return "starting";
    case EdgeKind::connector: return "connector";
  }
  return "?";
}

EdgeKind edge_kind_from_string(const std::string& s) {
  if (s == "driving") return EdgeKind::driving;
  if (s == "riding") return EdgeKind::riding;
  if (s == "starting") return EdgeKind::starting;
  if (s == "connector") return EdgeKind::connector;
  throw ConfigError("unknown edge kind '" + s + "'");
}

int Network::node_id(const std::string& name) const {
  for (std::size_t i = 0; i < node_names.size(); ++i) {
    if (node_names[i] == name) return static_cast<int>(i);
  }
  return -1;
}

bool Network::has_riding() const {
  return std::any_of(edges.begin(), edges.end(), [](const Edge& e) {
    return e.kind == EdgeKind::riding;
  });
}

bool Network::has_directed_cycle() const {
  const Index n = n_nodes();
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (const Edge& e : edges) {
    out[static_cast<std::size_t>(e.tail)].push_back(e.head);
  }
  std::vector<int> state(static_cast<std::size_t>(n), 0);  // 0 new 1 open 2 done
  std::vector<std::pair<int, std::size_t>> stack;
  for (Index s = 0; s < n; ++s) {
    if (state[static_cast<std::size_t>(s)] != 0) continue;
    stack.push_back({static_cast<int>(s), 0});
    state[static_cast<std::size_t>(s)] = 1;
    while (!stack.empty()) {
      auto& [u, next] = stack.back();
      if (next < out[static_cast<std::size_t>(u)].size()) {
        const int v = out[static_cast<std::size_t>(u)][next++];
        if (state[static_cast<std::size_t>(v)] == 1) return true;
        if (state[static_cast<std::size_t>(v)] == 0) {
          state[static_cast<std::size_t>(v)] = 1;
          stack.push_back({v, 0});
        }
      } else {
        state[static_cast<std::size_t>(u)] = 2;
        stack.pop_back();
      }
    }
  }
  return false;
}

void Network::validate() const {
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const Edge& e = edges[i];
    if (e.tail < 0 || e.tail >= n_nodes() || e.head < 0 ||
        e.head >= n_nodes()) {
      throw StructureError("edge " + std::to_string(i) +
                           ": endpoint does not exist");
    }
  }
  for (std::size_t i = 0; i < od_pairs.size(); ++i) {
    const auto& [s, t] = od_pairs[i];
    if (s < 0 || s >= n_nodes() || t < 0 || t >= n_nodes() || s == t) {
      throw StructureError("od pair " + std::to_string(i) + " is invalid");
    }
  }
}

double BehaviorParams::effective_q_cap(int edge,
                                       const EdgeCostParams& p) const {
  if (edge >= 0 && edge < static_cast<int>(q_cap_override.size()) &&
      std::isfinite(q_cap_override[static_cast<std::size_t>(edge)])) {
    return q_cap_override[static_cast<std::size_t>(edge)];
  }
  return p.q_cap;
}

Matrix PathSet::demand_incidence(Index n_od) const {
  Matrix M = Matrix::Zero(n_od, n_paths());
  for (Index p = 0; p < n_paths(); ++p) {
    M(od_of_path[static_cast<std::size_t>(p)], p) = 1.0;
  }
  return M;
}

Matrix PathSet::edge_incidence(Index n_edges) const {
  Matrix D = Matrix::Zero(n_edges, n_paths());
  for (Index p = 0; p < n_paths(); ++p) {
    for (int e : paths[static_cast<std::size_t>(p)]) D(e, p) += 1.0;
  }
  return D;
}

bool PathSet::contains(const std::vector<int>& edge_seq, int od) const {
  for (std::size_t p = 0; p < paths.size(); ++p) {
    if (od_of_path[p] == od && paths[p] == edge_seq) return true;
  }
  return false;
}

int PathSet::merge(const PathSet& other) {
  int added = 0;
  for (std::size_t p = 0; p < other.paths.size(); ++p) {
    if (!contains(other.paths[p], other.od_of_path[p])) {
      paths.push_back(other.paths[p]);
      od_of_path.push_back(other.od_of_path[p]);
      ++added;
    }
  }
  return added;
}

Network expand_network(const Network& base) {
  base.validate();
  const Index n = base.n_nodes();
  std::vector<std::uint8_t> drives(static_cast<std::size_t>(n), 0);
  std::vector<std::uint8_t> rides(static_cast<std::size_t>(n), 0);
  std::vector<double> wait(static_cast<std::size_t>(n), 0.0);
  for (const Edge& e : base.edges) {
    if (e.kind == EdgeKind::driving) {
      drives[static_cast<std::size_t>(e.tail)] = 1;
      drives[static_cast<std::size_t>(e.head)] = 1;
    } else if (e.kind == EdgeKind::riding) {
      rides[static_cast<std::size_t>(e.tail)] = 1;
      rides[static_cast<std::size_t>(e.head)] = 1;
      wait[static_cast<std::size_t>(e.tail)] =
          std::max(wait[static_cast<std::size_t>(e.tail)], e.cost.w);
      wait[static_cast<std::size_t>(e.head)] =
          std::max(wait[static_cast<std::size_t>(e.head)], e.cost.w);
    } else {
      throw StructureError("expand_network: base networks carry only "
                           "driving/riding edges");
    }
  }

  Network out;
  std::vector<int> s_id(static_cast<std::size_t>(n), -1);
  std::vector<int> e_id(static_cast<std::size_t>(n), -1);
  std::vector<int> v_id(static_cast<std::size_t>(n), -1);
  std::vector<int> p_id(static_cast<std::size_t>(n), -1);
  auto add_node = [&](const std::string& name) {
    out.node_names.push_back(name);
    return static_cast<int>(out.node_names.size() - 1);
  };
  for (Index i = 0; i < n; ++i) {
    const std::string& nm = base.node_names[static_cast<std::size_t>(i)];
    s_id[static_cast<std::size_t>(i)] = add_node(nm + "s");
    e_id[static_cast<std::size_t>(i)] = add_node(nm + "e");
    if (drives[static_cast<std::size_t>(i)])
      v_id[static_cast<std::size_t>(i)] = add_node(nm + "v");
    if (rides[static_cast<std::size_t>(i)])
      p_id[static_cast<std::size_t>(i)] = add_node(nm + "p");
  }

  for (const Edge& e : base.edges) {
    Edge ne = e;
    if (e.kind == EdgeKind::driving) {
      ne.tail = v_id[static_cast<std::size_t>(e.tail)];
      ne.head = v_id[static_cast<std::size_t>(e.head)];
    } else {
      ne.tail = p_id[static_cast<std::size_t>(e.tail)];
      ne.head = p_id[static_cast<std::size_t>(e.head)];
    }
    if (ne.name.empty()) {
      ne.name = (e.kind == EdgeKind::driving ? "v:" : "p:") +
                base.node_names[static_cast<std::size_t>(e.tail)] + "-" +
                base.node_names[static_cast<std::size_t>(e.head)];
    }
    out.edges.push_back(std::move(ne));
  }
  for (Index i = 0; i < n; ++i) {
    const std::string& nm = base.node_names[static_cast<std::size_t>(i)];
    if (drives[static_cast<std::size_t>(i)]) {
      Edge sv;
      sv.tail = s_id[static_cast<std::size_t>(i)];
      sv.head = v_id[static_cast<std::size_t>(i)];
      sv.kind = EdgeKind::connector;
      sv.cost.w = 0.0;
      sv.name = "s-v:" + nm;
      out.edges.push_back(sv);
      Edge ve;
      ve.tail = v_id[static_cast<std::size_t>(i)];
      ve.head = e_id[static_cast<std::size_t>(i)];
      ve.kind = EdgeKind::connector;
      ve.name = "v-e:" + nm;
      out.edges.push_back(ve);
    }
    if (rides[static_cast<std::size_t>(i)]) {
      Edge sp;
      sp.tail = s_id[static_cast<std::size_t>(i)];
      sp.head = p_id[static_cast<std::size_t>(i)];
      sp.kind = EdgeKind::starting;
      sp.cost.w = wait[static_cast<std::size_t>(i)];
      sp.name = "s-p:" + nm;
      out.edges.push_back(sp);
      Edge pe;
      pe.tail = p_id[static_cast<std::size_t>(i)];
      pe.head = e_id[static_cast<std::size_t>(i)];
      pe.kind = EdgeKind::connector;
      pe.name = "p-e:" + nm;
      out.edges.push_back(pe);
    }
  }
  for (const auto& [s, t] : base.od_pairs) {
    out.od_pairs.emplace_back(s_id[static_cast<std::size_t>(s)],
                              e_id[static_cast<std::size_t>(t)]);
  }
  out.validate();
  return out;
}

double edge_cost(const Edge& e, const BehaviorParams& b, double x,
                 double toll) {
  require(x >= 0.0, "edge_cost: negative flow");
  return cost_raw(e, b, e.cost.s, b.effective_q_cap(-1, e.cost), toll, x);
}

double edge_cost_slope(const Edge& e, const BehaviorParams& b, double x) {
  return slope_raw(e, b, e.cost.s, b.effective_q_cap(-1, e.cost), x);
}

double edge_time(const Edge& e, const BehaviorParams& b, double x) {
  (void)b;
  switch (e.kind) {
    case EdgeKind::driving:
    case EdgeKind::riding:
      return e.cost.T *
             (1.0 + bpr_term(x, e.cost.s, e.cost.bpr_coeff, e.cost.bpr_power));
    case EdgeKind::starting:
    case EdgeKind::connector:
      return 0.0;
  }
  return 0.0;
}

double edge_crowding(const Edge& e, const BehaviorParams& b, double x) {
  if (e.kind != EdgeKind::riding) return 0.0;
  return crowd_term(x, b.effective_q_cap(-1, e.cost), b);
}

double CostModel::effective_capacity(int e) const {
  if (e >= 0 && e < static_cast<int>(capacity_override.size()) &&
      std::isfinite(capacity_override[static_cast<std::size_t>(e)])) {
    return capacity_override[static_cast<std::size_t>(e)];
  }
  return net->edges[static_cast<std::size_t>(e)].cost.s;
}

Vector CostModel::costs(const Vector& x) const {
  const Index E = net->n_edges();
  require(x.size() == E, "cost model: flow vector size mismatch");
  Vector c(E);
  for (Index e = 0; e < E; ++e) {
    const Edge& edge = net->edges[static_cast<std::size_t>(e)];
    c[e] = cost_raw(edge, behavior, effective_capacity(static_cast<int>(e)),
                    behavior.effective_q_cap(static_cast<int>(e), edge.cost),
                    toll(static_cast<int>(e)), x[e]);
  }
  return c;
}

Vector CostModel::slopes(const Vector& x) const {
  const Index E = net->n_edges();
  require(x.size() == E, "cost model: flow vector size mismatch");
  Vector c(E);
  for (Index e = 0; e < E; ++e) {
    const Edge& edge = net->edges[static_cast<std::size_t>(e)];
    c[e] = slope_raw(edge, behavior, effective_capacity(static_cast<int>(e)),
                     behavior.effective_q_cap(static_cast<int>(e), edge.cost),
                     x[e]);
  }
  return c;
}

Vector CostModel::free_flow_costs() const {
  return costs(Vector::Zero(net->n_edges()));
}

double CostModel::time_of(int e, double x) const {
  const Edge& edge = net->edges[static_cast<std::size_t>(e)];
  if (edge.kind != EdgeKind::driving && edge.kind != EdgeKind::riding) {
    return 0.0;
  }
  return edge.cost.T * (1.0 + bpr_term(x, effective_capacity(e),
                                       edge.cost.bpr_coeff,
                                       edge.cost.bpr_power));
}

double CostModel::time_slope(int e, double x) const {
  const Edge& edge = net->edges[static_cast<std::size_t>(e)];
  if (edge.kind != EdgeKind::driving && edge.kind != EdgeKind::riding) {
    return 0.0;
  }
  return edge.cost.T * bpr_term_dx(x, effective_capacity(e),
                                   edge.cost.bpr_coeff, edge.cost.bpr_power);
}

double CostModel::crowding_of(int e, double x) const {
  const Edge& edge = net->edges[static_cast<std::size_t>(e)];
  if (edge.kind != EdgeKind::riding) return 0.0;
  return crowd_term(x, behavior.effective_q_cap(e, edge.cost), behavior);
}

double CostModel::crowding_slope(int e, double x) const {
  const Edge& edge = net->edges[static_cast<std::size_t>(e)];
  if (edge.kind != EdgeKind::riding) return 0.0;
  return crowd_term_dx(x, behavior.effective_q_cap(e, edge.cost), behavior);
}

Vector ParameterBinding::pack(const CostModel& cost) const {
  Vector out(size());
  for (Index k = 0; k < size(); ++k) {
    const ParamRef& ref = refs[static_cast<std::size_t>(k)];
    switch (ref.kind) {
      case ParamRef::Kind::gamma: out[k] = cost.behavior.gamma; break;
      case ParamRef::Kind::tau: out[k] = cost.behavior.tau; break;
      case ParamRef::Kind::q_cap:
        out[k] = cost.behavior.effective_q_cap(
            ref.edge, cost.net->edges[static_cast<std::size_t>(ref.edge)].cost);
        break;
      case ParamRef::Kind::capacity:
        out[k] = cost.effective_capacity(ref.edge);
        break;
      case ParamRef::Kind::toll: out[k] = cost.toll(ref.edge); break;
    }
  }
  return out;
}

CostModel ParameterBinding::apply(const CostModel& cost,
                                  const Vector& lambda) const {
  require(lambda.size() == size(), "binding: lambda size mismatch");
  CostModel out = cost;
  const std::size_t E = static_cast<std::size_t>(cost.net->n_edges());
  for (Index k = 0; k < size(); ++k) {
    const ParamRef& ref = refs[static_cast<std::size_t>(k)];
    switch (ref.kind) {
      case ParamRef::Kind::gamma: out.behavior.gamma = lambda[k]; break;
      case ParamRef::Kind::tau: out.behavior.tau = lambda[k]; break;
      case ParamRef::Kind::q_cap:
        if (out.behavior.q_cap_override.size() != E) {
          out.behavior.q_cap_override.assign(
              E, std::numeric_limits<double>::quiet_NaN());
        }
        out.behavior.q_cap_override[static_cast<std::size_t>(ref.edge)] =
            lambda[k];
        break;
      case ParamRef::Kind::capacity:
        if (out.capacity_override.size() != E) {
          out.capacity_override.assign(
              E, std::numeric_limits<double>::quiet_NaN());
        }
        out.capacity_override[static_cast<std::size_t>(ref.edge)] = lambda[k];
        break;
      case ParamRef::Kind::toll:
        if (out.tolls.size() != static_cast<Index>(E)) {
          out.tolls = Vector::Zero(static_cast<Index>(E));
        }
        out.tolls[ref.edge] = lambda[k];
        break;
    }
  }
  return out;
}

Matrix ParameterBinding::cost_jacobian(const CostModel& cost,
                                       const Vector& x) const {
  const Index E = cost.net->n_edges();
  Matrix J = Matrix::Zero(E, size());
  for (Index k = 0; k < size(); ++k) {
    const ParamRef& ref = refs[static_cast<std::size_t>(k)];
    switch (ref.kind) {
      case ParamRef::Kind::gamma:
        for (Index e = 0; e < E; ++e) {
          const Edge& edge = cost.net->edges[static_cast<std::size_t>(e)];
          if (edge.kind == EdgeKind::driving ||
              edge.kind == EdgeKind::riding) {
            J(e, k) = edge.cost.m + cost.toll(static_cast<int>(e));
          }
        }
        break;
      case ParamRef::Kind::tau:
        for (Index e = 0; e < E; ++e) {
          const Edge& edge = cost.net->edges[static_cast<std::size_t>(e)];
          if (edge.kind != EdgeKind::riding) continue;
          const double q = cost.behavior.effective_q_cap(
              static_cast<int>(e), edge.cost);
          if (!std::isfinite(q)) continue;
          const double ratio2 = (x[e] / q) * (x[e] / q);
          J(e, k) = cost.behavior.riding_form ==
                            RidingCostForm::offset_quadratic
                        ? 1.0 + ratio2
                        : ratio2;
        }
        break;
      case ParamRef::Kind::q_cap: {
        const Edge& edge =
            cost.net->edges[static_cast<std::size_t>(ref.edge)];
        const double q =
            cost.behavior.effective_q_cap(ref.edge, edge.cost);
        if (std::isfinite(q)) {
          const double xe = x[ref.edge];
          J(ref.edge, k) = -2.0 * cost.behavior.tau * xe * xe / (q * q * q);
        }
        break;
      }
      case ParamRef::Kind::capacity: {
        const Edge& edge =
            cost.net->edges[static_cast<std::size_t>(ref.edge)];
        const double s = cost.effective_capacity(ref.edge);
        if (std::isfinite(s)) {
          const double xe = x[ref.edge];
          J(ref.edge, k) = -edge.cost.T * edge.cost.bpr_coeff *
                           edge.cost.bpr_power * powi(xe, edge.cost.bpr_power) /
                           powi(s, edge.cost.bpr_power + 1);
        }
        break;
      }
      case ParamRef::Kind::toll:
        J(ref.edge, k) = cost.behavior.gamma;
        break;
    }
  }
  return J;
}

namespace {

struct DijkstraResult {
  std::vector<double> dist;
  std::vector<std::vector<int>> node_path;  // node sequences from the source
  std::vector<std::vector<int>> edge_path;
};

DijkstraResult dijkstra_lex(const Network& net, const Vector& costs,
                            int source) {
  const Index n = net.n_nodes();
  std::vector<std::vector<std::pair<int, int>>> out(
      static_cast<std::size_t>(n));  // (edge, head)
  for (Index e = 0; e < net.n_edges(); ++e) {
    const Edge& edge = net.edges[static_cast<std::size_t>(e)];
    out[static_cast<std::size_t>(edge.tail)].push_back(
        {static_cast<int>(e), edge.head});
  }

  DijkstraResult res;
  res.dist.assign(static_cast<std::size_t>(n), kInf);
  res.node_path.assign(static_cast<std::size_t>(n), {});
  res.edge_path.assign(static_cast<std::size_t>(n), {});
  std::vector<std::uint8_t> done(static_cast<std::size_t>(n), 0);
  res.dist[static_cast<std::size_t>(source)] = 0.0;
  res.node_path[static_cast<std::size_t>(source)] = {source};

  for (Index round = 0; round < n; ++round) {
    int u = -1;
    for (Index v = 0; v < n; ++v) {
      if (done[static_cast<std::size_t>(v)] ||
          !std::isfinite(res.dist[static_cast<std::size_t>(v)]))
        continue;
      if (u < 0 || res.dist[static_cast<std::size_t>(v)] <
                       res.dist[static_cast<std::size_t>(u)] ||
          (res.dist[static_cast<std::size_t>(v)] ==
               res.dist[static_cast<std::size_t>(u)] &&
           res.node_path[static_cast<std::size_t>(v)] <
               res.node_path[static_cast<std::size_t>(u)])) {
        u = static_cast<int>(v);
      }
    }
    if (u < 0) break;
    done[static_cast<std::size_t>(u)] = 1;
    for (const auto& [e, v] : out[static_cast<std::size_t>(u)]) {
      if (done[static_cast<std::size_t>(v)]) continue;
      const double nd = res.dist[static_cast<std::size_t>(u)] + costs[e];
      const double tie = 1e-12 * (1.0 + std::abs(nd));
      const double cur = res.dist[static_cast<std::size_t>(v)];
      bool better = nd < cur - tie;
      if (!better && nd <= cur + tie) {
        std::vector<int> cand = res.node_path[static_cast<std::size_t>(u)];
        cand.push_back(v);
        better = cand < res.node_path[static_cast<std::size_t>(v)];
      }
      if (better) {
        res.dist[static_cast<std::size_t>(v)] = std::min(nd, cur);
        res.node_path[static_cast<std::size_t>(v)] =
            res.node_path[static_cast<std::size_t>(u)];
        res.node_path[static_cast<std::size_t>(v)].push_back(v);
        res.edge_path[static_cast<std::size_t>(v)] =
            res.edge_path[static_cast<std::size_t>(u)];
        res.edge_path[static_cast<std::size_t>(v)].push_back(e);
      }
    }
  }
  return res;
}

}  // namespace

std::pair<Vector, PathSet> shortest_paths_aon(const Network& net,
                                              const Vector& edge_costs,
                                              const DemandMatrix& demands) {
  require(edge_costs.size() == net.n_edges(), "aon: cost vector size");
  require((edge_costs.array() >= 0).all(), "aon: costs must be nonnegative");
  require(demands.q.size() == net.n_od(), "aon: demand vector size");

  Vector flow = Vector::Zero(net.n_edges());
  PathSet paths;
  std::map<int, DijkstraResult> by_source;
  for (Index w = 0; w < net.n_od(); ++w) {
    const auto& [s, t] = net.od_pairs[static_cast<std::size_t>(w)];
    auto it = by_source.find(s);
    if (it == by_source.end()) {
      it = by_source.emplace(s, dijkstra_lex(net, edge_costs, s)).first;
    }
    const DijkstraResult& d = it->second;
    if (!std::isfinite(d.dist[static_cast<std::size_t>(t)])) {
      throw ConnectivityError(
          "aon: sink unreachable for od pair " + std::to_string(w) + " (" +
          net.node_names[static_cast<std::size_t>(s)] + " -> " +
          net.node_names[static_cast<std::size_t>(t)] + ")");
    }
    const std::vector<int>& ep = d.edge_path[static_cast<std::size_t>(t)];
    for (int e : ep) flow[e] += demands.q[w];
    paths.paths.push_back(ep);
    paths.od_of_path.push_back(static_cast<int>(w));
  }
  return {std::move(flow), std::move(paths)};
}

Vector commodity_flows_from_paths(const Network& net, const PathSet& paths,
                                  const Vector& path_flows) {
  const Index E = net.n_edges();
  Vector z = Vector::Zero(E * net.n_od());
  for (Index p = 0; p < paths.n_paths(); ++p) {
    const Index w = paths.od_of_path[static_cast<std::size_t>(p)];
    for (int e : paths.paths[static_cast<std::size_t>(p)]) {
      z[w * E + e] += path_flows[p];
    }
  }
  return z;
}

VIProblem assemble_vi(const CostModel& cost, const DemandMatrix& demands,
                      ViForm form, const PathSet& paths,
                      const ParameterBinding& binding) {
  const auto net = cost.net;
  require(net != nullptr, "assemble_vi: cost model has no network");
  require(demands.q.size() == net->n_od(), "assemble_vi: demand size");
  const Index E = net->n_edges();
  const Index W = net->n_od();

  VIProblem problem;
  problem.lambda_lower = binding.lower;
  problem.lambda_upper = binding.upper;
  require(problem.lambda_lower.size() == binding.size() &&
              problem.lambda_upper.size() == binding.size(),
          "assemble_vi: binding bounds size mismatch");
  const ParameterBinding bind = binding;
  const CostModel base = cost;
  auto resolve = [base, bind](const Vector& lambda) {
    return bind.size() > 0 ? bind.apply(base, lambda) : base;
  };

  if (form == ViForm::path) {
    require(paths.n_paths() > 0, "assemble_vi: path form needs a nonempty "
                                 "path set");
    const Index P = paths.n_paths();
    const Matrix Delta = paths.edge_incidence(E);
    const Matrix Mpd = paths.demand_incidence(W);

    // Even per-od spread is feasible and seeds the set probe.
    Vector hint = Vector::Zero(P);
    std::vector<int> counts(static_cast<std::size_t>(W), 0);
    for (Index p = 0; p < P; ++p)
      counts[static_cast<std::size_t>(
          paths.od_of_path[static_cast<std::size_t>(p)])]++;
    for (Index p = 0; p < P; ++p) {
      const int w = paths.od_of_path[static_cast<std::size_t>(p)];
      hint[p] = demands.q[w] / counts[static_cast<std::size_t>(w)];
    }
    auto set = std::make_shared<const PolyhedralSet>(PolyhedralSet::make(
        -Matrix::Identity(P, P), Vector::Zero(P), Mpd, demands.q, hint));

    problem.dim = P;
    problem.omega = [set](const Vector&) { return set; };
    problem.F = [resolve, Delta](const Vector& f, const Vector& lambda) {
      const CostModel cm = resolve(lambda);
      return Vector(Delta.transpose() * cm.costs(Delta * f));
    };
    problem.dF_dz = [resolve, Delta](const Vector& f, const Vector& lambda) {
      const CostModel cm = resolve(lambda);
      const Vector s = cm.slopes(Delta * f);
      return Matrix(Delta.transpose() * s.asDiagonal() * Delta);
    };
    if (bind.size() > 0) {
      problem.dF_dlambda = [resolve, bind, Delta](const Vector& f,
                                                  const Vector& lambda) {
        const CostModel cm = resolve(lambda);
        return Matrix(Delta.transpose() *
                      bind.cost_jacobian(cm, Delta * f));
      };
    }
    return problem;
  }

  // Edge form: per-commodity edge flows with node conservation. A loose
  // per-commodity total-flow cap keeps the set bounded when the graph has
  // directed cycles; it is never active at a solution.
  const Index dim = E * W;
  std::vector<std::vector<Index>> rows_per_w(static_cast<std::size_t>(W));
  Index n_eq = 0;
  std::vector<std::uint8_t> touched(static_cast<std::size_t>(net->n_nodes()),
                                    0);
  for (const Edge& e : net->edges) {
    touched[static_cast<std::size_t>(e.tail)] = 1;
    touched[static_cast<std::size_t>(e.head)] = 1;
  }
  for (Index w = 0; w < W; ++w) {
    const int sink = net->od_pairs[static_cast<std::size_t>(w)].second;
    for (Index v = 0; v < net->n_nodes(); ++v) {
      if (!touched[static_cast<std::size_t>(v)] ||
          static_cast<int>(v) == sink)
        continue;
      rows_per_w[static_cast<std::size_t>(w)].push_back(n_eq++);
    }
  }
  Matrix Meq = Matrix::Zero(n_eq, dim);
  Vector qeq = Vector::Zero(n_eq);
  for (Index w = 0; w < W; ++w) {
    const auto& [src, sink] = net->od_pairs[static_cast<std::size_t>(w)];
    Index row_i = 0;
    std::vector<Index> node_row(static_cast<std::size_t>(net->n_nodes()),
                                static_cast<Index>(-1));
    for (Index v = 0; v < net->n_nodes(); ++v) {
      if (!touched[static_cast<std::size_t>(v)] ||
          static_cast<int>(v) == sink)
        continue;
      const Index r = rows_per_w[static_cast<std::size_t>(w)]
                                [static_cast<std::size_t>(row_i++)];
      node_row[static_cast<std::size_t>(v)] = r;
      if (static_cast<int>(v) == src) qeq[r] = demands.q[w];
    }
    for (Index e = 0; e < E; ++e) {
      const Edge& edge = net->edges[static_cast<std::size_t>(e)];
      const Index rt = node_row[static_cast<std::size_t>(edge.tail)];
      const Index rh = node_row[static_cast<std::size_t>(edge.head)];
      if (rt >= 0) Meq(rt, w * E + e) += 1.0;
      if (rh >= 0) Meq(rh, w * E + e) -= 1.0;
    }
  }

  const bool cyclic = net->has_directed_cycle();
  const Index n_ineq = dim + (cyclic ? W : 0);
  Matrix A = Matrix::Zero(n_ineq, dim);
  Vector b = Vector::Zero(n_ineq);
  A.topRows(dim) = -Matrix::Identity(dim, dim);
  if (cyclic) {
    for (Index w = 0; w < W; ++w) {
      A.block(dim + w, w * E, 1, E).setOnes();
      b[dim + w] = static_cast<double>(E) * (demands.q[w] + 1.0);
    }
  }

  // Feasible hint: all-or-nothing loading at free-flow costs (also verifies
  // od connectivity).
  const auto [aon_flow, aon_paths] =
      shortest_paths_aon(*net, base.free_flow_costs(), demands);
  (void)aon_flow;
  Vector hint = Vector::Zero(dim);
  for (Index p = 0; p < aon_paths.n_paths(); ++p) {
    const Index w = aon_paths.od_of_path[static_cast<std::size_t>(p)];
    for (int e : aon_paths.paths[static_cast<std::size_t>(p)]) {
      hint[w * E + e] += demands.q[w];
    }
  }
  auto set = std::make_shared<const PolyhedralSet>(
      PolyhedralSet::make(std::move(A), std::move(b), std::move(Meq),
                          std::move(qeq), hint));

  problem.dim = dim;
  problem.omega = [set](const Vector&) { return set; };
  problem.F = [resolve, E, W](const Vector& z, const Vector& lambda) {
    const CostModel cm = resolve(lambda);
    Vector x = Vector::Zero(E);
    for (Index w = 0; w < W; ++w) x += z.segment(w * E, E);
    const Vector c = cm.costs(x);
    Vector out(E * W);
    for (Index w = 0; w < W; ++w) out.segment(w * E, E) = c;
    return out;
  };
  problem.dF_dz = [resolve, E, W](const Vector& z, const Vector& lambda) {
    const CostModel cm = resolve(lambda);
    Vector x = Vector::Zero(E);
    for (Index w = 0; w < W; ++w) x += z.segment(w * E, E);
    const Vector s = cm.slopes(x);
    Matrix out = Matrix::Zero(E * W, E * W);
    for (Index wr = 0; wr < W; ++wr) {
      for (Index wc = 0; wc < W; ++wc) {
        out.block(wr * E, wc * E, E, E).diagonal() = s;
      }
    }
    return out;
  };
  if (bind.size() > 0) {
    problem.dF_dlambda = [resolve, bind, E, W](const Vector& z,
                                               const Vector& lambda) {
      const CostModel cm = resolve(lambda);
      Vector x = Vector::Zero(E);
      for (Index w = 0; w < W; ++w) x += z.segment(w * E, E);
      const Matrix J = bind.cost_jacobian(cm, x);
      Matrix out(E * W, J.cols());
      for (Index w = 0; w < W; ++w) out.middleRows(w * E, E) = J;
      return out;
    };
  }
  return problem;
}

EquilibriumState solve_equilibrium(const CostModel& cost,
                                   const DemandMatrix& demands,
                                   const SolverOptions& opts,
                                   const ColumnGenOptions& cg) {
  const auto net = cost.net;
  require(net != nullptr, "solve_equilibrium: cost model has no network");

  PathSet pathset;
  Vector f;
  bool warm_ok = false;
  if (cg.warm != nullptr && cg.warm->paths.n_paths() > 0) {
    const Matrix Mpd = cg.warm->paths.demand_incidence(net->n_od());
    if (cg.warm->path_flows.size() == cg.warm->paths.n_paths() &&
        (Mpd * cg.warm->path_flows - demands.q).cwiseAbs().maxCoeff() <=
            1e-9 * (1.0 + demands.q.cwiseAbs().maxCoeff())) {
      pathset = cg.warm->paths;
      f = cg.warm->path_flows;
      warm_ok = true;
    }
  }
  if (!warm_ok) {
    auto [flow0, paths0] =
        shortest_paths_aon(*net, cost.free_flow_costs(), demands);
    (void)flow0;
    pathset = std::move(paths0);
    f = demands.q;  // one path per od, in od order
  }

  EquilibriumState state;
  for (int round = 0; round < cg.max_rounds; ++round) {
    const VIProblem problem =
        assemble_vi(cost, demands, ViForm::path, pathset);
    SolveTrace trace = solve_pn(problem, Vector(0), opts, f);
    f = trace.z_star;
    const Matrix Delta = pathset.edge_incidence(net->n_edges());
    const Vector x = Delta * f;
    const Vector c = cost.costs(x);
    auto [x_aon, aon_paths] = shortest_paths_aon(*net, c, demands);
    const double wardrop = c.dot(x - x_aon);

    int would_add = 0;
    for (Index p = 0; p < aon_paths.n_paths(); ++p) {
      if (!pathset.contains(aon_paths.paths[static_cast<std::size_t>(p)],
                            aon_paths.od_of_path[static_cast<std::size_t>(p)]))
        ++would_add;
    }

    state.outer_rounds = round + 1;
    state.wardrop_gap = wardrop;
    if ((wardrop <= opts.eps_newton && would_add == 0) ||
        round == cg.max_rounds - 1) {
      state.edge_flows = x;
      state.path_flows = f;
      state.paths = pathset;
      state.last_trace = std::move(trace);
      state.status = (wardrop <= opts.eps_newton && would_add == 0)
                         ? SolveStatus::converged
                         : SolveStatus::iteration_limit;
      return state;
    }
    pathset.merge(aon_paths);
    f.conservativeResize(pathset.n_paths());
    f.tail(pathset.n_paths() - trace.z_star.size()).setZero();
  }
  throw SolverError("solve_equilibrium: unreachable");
}

FlowMetrics metrics_for_flows(const Vector& edge_flows,
                              const CostModel& cost) {
  const auto net = cost.net;
  FlowMetrics out;
  for (Index e = 0; e < net->n_edges(); ++e) {
    const Edge& edge = net->edges[static_cast<std::size_t>(e)];
    PerEdgeMetrics pe;
    pe.edge = static_cast<int>(e);
    pe.flow = edge_flows[e];
    pe.cost = cost_raw(edge, cost.behavior,
                       cost.effective_capacity(static_cast<int>(e)),
                       cost.behavior.effective_q_cap(static_cast<int>(e),
                                                     edge.cost),
                       cost.toll(static_cast<int>(e)), edge_flows[e]);
    if (edge.kind == EdgeKind::driving || edge.kind == EdgeKind::riding) {
      const double s = cost.effective_capacity(static_cast<int>(e));
      pe.time = edge.cost.T * (1.0 + bpr_term(edge_flows[e], s,
                                              edge.cost.bpr_coeff,
                                              edge.cost.bpr_power));
      out.total_travel_time += pe.time * pe.flow;
    }
    if (edge.kind == EdgeKind::riding) {
      const double q = cost.behavior.effective_q_cap(static_cast<int>(e),
                                                     edge.cost);
      pe.crowding = crowd_term(edge_flows[e], q, cost.behavior);
      out.total_crowding_cost += pe.crowding * pe.flow;
    }
    out.per_edge.push_back(pe);
  }
  return out;
}

FlowMetrics metrics(const EquilibriumState& state, const CostModel& cost) {
  return metrics_for_flows(state.edge_flows, cost);
}

BenchTrace benchmark_interleaved(const CostModel& cost,
                                 const DemandMatrix& demands,
                                 const SolverOptions& opts,
                                 BenchMethod method) {
  const auto net = cost.net;
  auto [flow0, pathset] =
      shortest_paths_aon(*net, cost.free_flow_costs(), demands);
  (void)flow0;
  Vector f = demands.q;

  auto wardrop_and_augment = [&](Vector& flows) -> double {
    const Matrix Delta = pathset.edge_incidence(net->n_edges());
    const Vector x = Delta * flows;
    const Vector c = cost.costs(x.cwiseMax(0.0));
    auto [x_aon, aon_paths] = shortest_paths_aon(*net, c, demands);
    const double g = c.dot(x - x_aon);
    const Index before = pathset.n_paths();
    pathset.merge(aon_paths);
    if (pathset.n_paths() > before) {
      flows.conservativeResize(pathset.n_paths());
      flows.tail(pathset.n_paths() - before).setZero();
    }
    return g;
  };

  BenchTrace trace;
  double m = wardrop_and_augment(f);
  double r = opts.r0;
  const double gap_scale = 1.0 + std::abs(m);
  bool set_grew = true;
  // Newton attempts are gated: a failed trial halves the gap level at which
  // the next attempt happens, so the trajectory stays on projection steps
  // until the local convergence basin is reached.
  double newton_gate = opts.eps_proj;
  for (int k = 0; k < opts.max_iter && m > opts.eps_newton; ++k) {
    const VIProblem problem =
        assemble_vi(cost, demands, ViForm::path, pathset);
    // Newton also waits one projection step after the path set grows:
    // freshly added zero-flow columns leave the linearized system
    // degenerate.
    bool newton_step = method == BenchMethod::projection_newton &&
                       m <= newton_gate && !set_grew;
    Vector f_next;
    if (newton_step) {
      Vector d;
      try {
        d = newton_direction(problem, Vector(0), f, r, opts.eta_seed).first;
      } catch (const SingularityError&) {
        newton_step = false;
        newton_gate = 0.5 * m;
      }
      if (newton_step) {
        f_next = f - d;
        const Matrix Delta2 = pathset.edge_incidence(net->n_edges());
        const Vector x2 = Delta2 * f_next;
        const Vector c2 = cost.costs(x2.cwiseMax(0.0));
        const auto [x_aon2, ap2] = shortest_paths_aon(*net, c2, demands);
        (void)ap2;
        const double probe = c2.dot(x2 - x_aon2);
        if (!std::isfinite(probe) ||
            probe > std::max(0.9 * m, 10.0 * opts.eps_newton) ||
            probe < -1e-6 * gap_scale) {
          newton_step = false;
          newton_gate = 0.5 * m;
        }
      }
    }
    if (!newton_step) {
      const Vector Fz = problem.F(f, Vector(0));
      const auto set = problem.omega(Vector(0));
      f_next = project(*set, f - r * Fz).z_star;
    }
    // Raw Newton iterates can carry small negative flows; the reported gap
    // belongs to the feasible representative, while iteration continues
    // from the raw point.
    Vector f_meas = f_next;
    if (newton_step) {
      const auto set = problem.omega(Vector(0));
      f_meas = project(*set, f_next).z_star;
    }
    const int n_paths_used = static_cast<int>(pathset.n_paths());
    const double m_next = wardrop_and_augment(f_meas);
    set_grew = f_meas.size() > f_next.size();
    if (set_grew) {  // augmentation extended the set
      const Index old = f_next.size();
      f_next.conservativeResize(f_meas.size());
      f_next.tail(f_meas.size() - old).setZero();
    }

    BenchStep step;
    step.iter = k;
    step.phase = newton_step ? SolvePhase::newton : SolvePhase::projection;
    step.gap = m_next;
    step.r = r;
    step.n_paths = n_paths_used;
    trace.steps.push_back(step);

    if (m > 0.0) {
      const double ratio = m_next / m;
      if (!newton_step && ratio >= 1.0 - opts.delta_proj) {
        r *= opts.alpha_down;
      } else if (newton_step) {
        // Slow-but-real decrease grows r; an increase backs it off.
        if (ratio >= 1.0) {
          r *= opts.alpha_down;
        } else if (ratio >= 1.0 - opts.delta_newton) {
          r *= opts.alpha_up;
        }
      }
    }
    f = f_next;
    m = m_next;
    if (trace.iters_to_target < 0 && m <= opts.eps_newton) {
      trace.iters_to_target = k + 1;
    }
  }
  trace.final_gap = m;
  return trace;
}

// --- JSON ---

namespace {

double json_number(const nlohmann::json& j, const std::string& key,
                   double fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (v.is_string() && v.get<std::string>() == "inf") return kInf;
  if (!v.is_number()) {
    throw ConfigError(where + "/" + key + ": expected a number or \"inf\"");
  }
  return v.get<double>();
}

}  // namespace

Network network_from_json(const nlohmann::json& j) {
  if (!j.contains("schema") || j.at("schema") != "vil.network.v1") {
    throw ConfigError("/schema: expected \"vil.network.v1\"");
  }
  Network net;
  if (!j.contains("nodes") || !j.at("nodes").is_array()) {
    throw ConfigError("/nodes: expected an array of node names");
  }
  for (const auto& n : j.at("nodes")) {
    net.node_names.push_back(n.get<std::string>());
  }
  if (!j.contains("edges") || !j.at("edges").is_array()) {
    throw ConfigError("/edges: expected an array");
  }
  int idx = 0;
  for (const auto& je : j.at("edges")) {
    const std::string where = "/edges/" + std::to_string(idx);
    Edge e;
    const int tail = net.node_id(je.value("tail", std::string()));
    const int head = net.node_id(je.value("head", std::string()));
    if (tail < 0) throw ConfigError(where + "/tail: unknown node");
    if (head < 0) throw ConfigError(where + "/head: unknown node");
    e.tail = tail;
    e.head = head;
    e.kind = edge_kind_from_string(je.value("kind", std::string("driving")));
    e.cost.T = json_number(je, "T", 0.0, where);
    e.cost.s = json_number(je, "s", kInf, where);
    e.cost.m = json_number(je, "m", 0.0, where);
    e.cost.w = json_number(je, "w", 0.0, where);
    e.cost.q_cap = json_number(je, "q_cap", kInf, where);
    e.cost.bpr_coeff = json_number(je, "bpr_coeff", 1.0, where);
    e.cost.bpr_power =
        static_cast<int>(json_number(je, "bpr_power", 2.0, where));
    e.name = je.value("name", std::string());
    if (e.cost.T < 0) throw ConfigError(where + "/T: must be nonnegative");
    if (!(e.cost.s > 0)) throw ConfigError(where + "/s: must be positive");
    if (!(e.cost.q_cap > 0))
      throw ConfigError(where + "/q_cap: must be positive");
    if (e.cost.w < 0) throw ConfigError(where + "/w: must be nonnegative");
    if (e.cost.bpr_power < 1)
      throw ConfigError(where + "/bpr_power: must be >= 1");
    net.edges.push_back(std::move(e));
    ++idx;
  }
  if (!j.contains("od_pairs") || !j.at("od_pairs").is_array()) {
    throw ConfigError("/od_pairs: expected an array of [source, sink]");
  }
  idx = 0;
  for (const auto& jod : j.at("od_pairs")) {
    const std::string where = "/od_pairs/" + std::to_string(idx);
    if (!jod.is_array() || jod.size() != 2) {
      throw ConfigError(where + ": expected [source, sink]");
    }
    const int s = net.node_id(jod.at(0).get<std::string>());
    const int t = net.node_id(jod.at(1).get<std::string>());
    if (s < 0) throw ConfigError(where + "/0: unknown node");
    if (t < 0) throw ConfigError(where + "/1: unknown node");
    if (s == t) throw ConfigError(where + ": source equals sink");
    net.od_pairs.emplace_back(s, t);
    ++idx;
  }
  net.validate();
  return net;
}

Network load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open network file: " + path);
  nlohmann::json j;
  in >> j;
  return network_from_json(j);
}

DemandSpec demand_spec_from_json(const nlohmann::json& j) {
  if (!j.contains("schema") || j.at("schema") != "vil.demand.v1") {
    throw ConfigError("/schema: expected \"vil.demand.v1\"");
  }
  DemandSpec spec;
  spec.periods = j.value("periods", 1);
  if (spec.periods < 1) throw ConfigError("/periods: must be >= 1");
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    if (g.value("distribution", std::string()) != "uniform") {
      throw ConfigError("/generator/distribution: only \"uniform\"");
    }
    spec.generated = true;
    spec.low = g.value("low", 0.0);
    spec.high = g.value("high", 0.0);
    spec.seed = g.value("seed", 0ULL);
    if (!(spec.high >= spec.low) || spec.low < 0) {
      throw ConfigError("/generator: need 0 <= low <= high");
    }
  } else if (j.contains("values")) {
    for (const auto& row : j.at("values")) {
      Vector v(static_cast<Index>(row.size()));
      Index i = 0;
      for (const auto& x : row) v[i++] = x.get<double>();
      if ((v.array() < 0).any()) {
        throw ConfigError("/values: demands must be nonnegative");
      }
      spec.values.push_back(std::move(v));
    }
    if (static_cast<int>(spec.values.size()) != spec.periods) {
      throw ConfigError("/values: row count must equal periods");
    }
  } else {
    throw ConfigError(": need either /generator or /values");
  }
  return spec;
}

DemandSpec load_demand_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open demand file: " + path);
  nlohmann::json j;
  in >> j;
  return demand_spec_from_json(j);
}

std::vector<DemandMatrix> DemandSpec::realize(Index n_od) const {
  std::vector<DemandMatrix> out;
  if (generated) {
    Rng rng(seed);
    for (int p = 0; p < periods; ++p) {
      DemandMatrix dm;
      dm.period = p;
      dm.q = rng.uniform_vector(n_od, low, high);
      out.push_back(std::move(dm));
    }
  } else {
    for (int p = 0; p < periods; ++p) {
      if (values[static_cast<std::size_t>(p)].size() != n_od) {
        throw ConfigError("demand values row " + std::to_string(p) +
                          " does not match the od count");
      }
      DemandMatrix dm;
      dm.period = p;
      dm.q = values[static_cast<std::size_t>(p)];
      out.push_back(std::move(dm));
    }
  }
  return out;
}

}  // namespace vil
