#include "vil/experiment.hpp"

#include "vil/toml_lite.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace vil {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

void write_text(ResultBundle& bundle, const std::string& name,
                const std::string& content) {
  fs::create_directories(bundle.out_dir);
  std::ofstream out(fs::path(bundle.out_dir) / name, std::ios::binary);
  out << content;
  bundle.files.push_back(name);
}

void write_json(ResultBundle& bundle, const std::string& name,
                const json& j) {
  write_text(bundle, name, j.dump(2) + "\n");
}

double jget(const json& j, const std::string& key, double fallback) {
  return j.contains(key) ? j.at(key).get<double>() : fallback;
}

int jget_int(const json& j, const std::string& key, int fallback) {
  return j.contains(key) ? j.at(key).get<int>() : fallback;
}

std::string jget_str(const json& j, const std::string& key,
                     const std::string& fallback) {
  return j.contains(key) ? j.at(key).get<std::string>() : fallback;
}

SolverOptions solver_from_config(const json& raw, SolverOptions defaults) {
  if (!raw.contains("solver")) return defaults;
  const json& s = raw.at("solver");
  defaults.r0 = jget(s, "r0", defaults.r0);
  defaults.eps_proj = jget(s, "eps_proj", defaults.eps_proj);
  defaults.eps_newton = jget(s, "eps_newton", defaults.eps_newton);
  defaults.delta_proj = jget(s, "delta_proj", defaults.delta_proj);
  defaults.delta_newton = jget(s, "delta_newton", defaults.delta_newton);
  defaults.alpha_down = jget(s, "alpha_down", defaults.alpha_down);
  defaults.alpha_up = jget(s, "alpha_up", defaults.alpha_up);
  defaults.max_iter = jget_int(s, "max_iter", defaults.max_iter);
  defaults.eta_seed = jget(s, "eta_seed", defaults.eta_seed);
  return defaults;
}

std::string resolve(const ExperimentConfig& cfg, const std::string& rel) {
  if (rel.empty() || rel.front() == '/') return rel;
  return (fs::path(cfg.config_dir) / rel).string();
}

int worker_count() {
  if (const char* env = std::getenv("VIL_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::min(4u, hw == 0 ? 1u : hw));
}

// Runs fn(i) for i in [0, n) on up to worker_count() threads; results land
// by index, so output order is deterministic.
template <typename Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<int> riding_edges(const Network& net) {
  std::vector<int> out;
  for (Index e = 0; e < net.n_edges(); ++e) {
    if (net.edges[static_cast<std::size_t>(e)].kind == EdgeKind::riding) {
      out.push_back(static_cast<int>(e));
    }
  }
  return out;
}

std::vector<int> driving_edges(const Network& net) {
  std::vector<int> out;
  for (Index e = 0; e < net.n_edges(); ++e) {
    if (net.edges[static_cast<std::size_t>(e)].kind == EdgeKind::driving) {
      out.push_back(static_cast<int>(e));
    }
  }
  return out;
}

// --- experiment runners ---

ResultBundle run_braess(const ExperimentConfig& cfg) {
  ResultBundle bundle;
  bundle.out_dir = cfg.out_dir;
  const auto net = std::make_shared<const Network>(
      load_network(resolve(cfg, cfg.raw.at("network").get<std::string>())));
  require(net->n_od() == 1, "braess: expected a single od pair");

  const json sweep = cfg.raw.value("sweep", json::object());
  const double q_min = jget(sweep, "q_min", 0.75);
  const double q_max = jget(sweep, "q_max", 12.0);
  const int points = jget_int(sweep, "points", 24);
  const json grad = cfg.raw.value("gradient", json::object());
  const double fd_step = jget(grad, "fd_step", 1e-5);
  const bool one_sided = grad.value("fd_one_sided_5pct", false);
  const std::string design_name = jget_str(grad, "design_edge", "shortcut");

  int design_edge = -1;
  for (Index e = 0; e < net->n_edges(); ++e) {
    if (net->edges[static_cast<std::size_t>(e)].name == design_name) {
      design_edge = static_cast<int>(e);
    }
  }
  require(design_edge >= 0, "braess: design edge not found: " + design_name);

  SolverOptions opts;
  opts.eps_proj = 1e-2;
  opts.eps_newton = 1e-10;
  opts.max_iter = 600;
  opts = solver_from_config(cfg.raw, opts);

  Vector grid(points);
  for (int i = 0; i < points; ++i) {
    grid[i] = q_min + (q_max - q_min) * i / std::max(points - 1, 1);
  }

  CostModel cost;
  cost.net = net;
  const std::vector<BraessPoint> rows =
      braess_sweep(cost, design_edge, grid, opts, fd_step, one_sided);

  std::ostringstream csv;
  csv << "q,implicit,explicit,fd\n";
  double worst_rel = 0.0;
  for (const BraessPoint& p : rows) {
    csv << fmt(p.q) << ',' << fmt(p.implicit_g) << ',' << fmt(p.unrolled_g)
        << ',' << fmt(p.fd_g) << '\n';
    const double scale =
        1.0 + std::max({std::abs(p.implicit_g), std::abs(p.unrolled_g),
                        std::abs(p.fd_g)});
    worst_rel = std::max(
        {worst_rel, std::abs(p.implicit_g - p.unrolled_g) / scale,
         std::abs(p.implicit_g - p.fd_g) / scale,
         std::abs(p.unrolled_g - p.fd_g) / scale});
  }
  write_text(bundle, "braess_sweep.csv", csv.str());

  bool neg_low = false, pos_mid = false, neg_high = false;
  for (const BraessPoint& p : rows) {
    if (p.fd_g > 0.0) {
      pos_mid = true;
    } else if (!pos_mid) {
      neg_low = true;
    } else {
      neg_high = true;
    }
  }
  bundle.summary = {
      {"experiment", "braess"},
      {"points", points},
      {"max_pairwise_rel_err", worst_rel},
      {"sign_pattern",
       {{"negative_low", neg_low},
        {"positive_mid", pos_mid},
        {"negative_high", neg_high}}}};
  write_json(bundle, "summary.json", bundle.summary);
  return bundle;
}

ResultBundle run_two_loop(const ExperimentConfig& cfg) {
  ResultBundle bundle;
  bundle.out_dir = cfg.out_dir;
  const Network base =
      load_network(resolve(cfg, cfg.raw.at("network").get<std::string>()));
  const auto net = std::make_shared<const Network>(expand_network(base));
  DemandSpec dspec = load_demand_spec(
      resolve(cfg, cfg.raw.at("demand").get<std::string>()));
  if (cfg.seed != 0) dspec.seed = cfg.seed;
  const Vector q0 = dspec.realize(net->n_od()).front().q;

  std::vector<double> multipliers{1.0, 2.0, 3.0, 4.0};
  if (cfg.raw.contains("multipliers")) {
    multipliers.clear();
    for (const auto& m : cfg.raw.at("multipliers")) {
      multipliers.push_back(m.get<double>());
    }
  }

  SolverOptions opts;
  opts.eps_proj = 1e3;
  opts.eps_newton = 1e-3;
  opts.max_iter = 150;
  opts = solver_from_config(cfg.raw, opts);

  struct Cell {
    BenchTrace pn, proj;
  };
  std::vector<Cell> cells(multipliers.size());
  parallel_for(static_cast<int>(multipliers.size()), [&](int i) {
    CostModel cost;
    cost.net = net;
    DemandMatrix dm;
    dm.q = multipliers[static_cast<std::size_t>(i)] * q0;
    cells[static_cast<std::size_t>(i)].pn = benchmark_interleaved(
        cost, dm, opts, BenchMethod::projection_newton);
    cells[static_cast<std::size_t>(i)].proj =
        benchmark_interleaved(cost, dm, opts, BenchMethod::projection);
  });

  std::ostringstream csv;
  csv << "method,multiplier,iter,phase,gap,r,n_paths\n";
  json per_mult = json::array();
  for (std::size_t i = 0; i < multipliers.size(); ++i) {
    const auto emit = [&](const char* name, const BenchTrace& t) {
      for (const BenchStep& s : t.steps) {
        csv << name << ',' << fmt(multipliers[i]) << ',' << s.iter << ','
            << (s.phase == SolvePhase::projection ? "projection" : "newton")
            << ',' << fmt(s.gap) << ',' << fmt(s.r) << ',' << s.n_paths
            << '\n';
      }
    };
    emit("pn", cells[i].pn);
    emit("projection", cells[i].proj);
    per_mult.push_back({{"multiplier", multipliers[i]},
                        {"pn_iters", cells[i].pn.iters_to_target},
                        {"projection_iters", cells[i].proj.iters_to_target},
                        {"pn_final_gap", cells[i].pn.final_gap},
                        {"projection_final_gap", cells[i].proj.final_gap}});
  }
  write_text(bundle, "convergence.csv", csv.str());
  bundle.summary = {{"experiment", "two-loop-bench"},
                    {"levels", per_mult}};
  write_json(bundle, "summary.json", bundle.summary);
  return bundle;
}

ResultBundle run_learn(const ExperimentConfig& cfg) {
  ResultBundle bundle;
  bundle.out_dir = cfg.out_dir;
  const Network base =
      load_network(resolve(cfg, cfg.raw.at("network").get<std::string>()));
  const auto net = std::make_shared<const Network>(expand_network(base));
  DemandSpec dspec = load_demand_spec(
      resolve(cfg, cfg.raw.at("demand").get<std::string>()));
  if (cfg.seed != 0) dspec.seed = cfg.seed;
  const std::vector<DemandMatrix> demands = dspec.realize(net->n_od());

  SolverOptions forward;
  forward.eps_proj = 1.0;
  forward.eps_newton = 1e-3;
  forward.max_iter = 150;
  forward = solver_from_config(cfg.raw, forward);

  const std::string preset = jget_str(cfg.raw, "preset", "a");
  require(preset.size() == 1 && preset[0] >= 'a' && preset[0] <= 'd',
          "linear-city-learn: preset must be a..d");
  const int epochs = jget_int(cfg.raw, "epochs", 60);
  LearningSpec spec = city_learning_preset(net, demands, preset[0], epochs,
                                           cfg.seed, forward);
  const json learning = cfg.raw.value("learning", json::object());
  spec.n_train = jget_int(learning, "n_train", spec.n_train);
  spec.obs_rounding = jget(learning, "obs_rounding", spec.obs_rounding);
  spec.unroll_tail = jget_int(learning, "unroll_tail", spec.unroll_tail);

  const TrainTrace trace = learn(spec);

  const std::vector<int> riders = riding_edges(*net);
  std::ostringstream csv;
  csv << "epoch,train_loss,test_loss,gamma,tau";
  for (int e : riders) {
    csv << ",q:" << net->edges[static_cast<std::size_t>(e)].name;
  }
  csv << '\n';
  for (const auto& row : trace.epochs) {
    csv << row.epoch << ',' << fmt(row.train_loss) << ','
        << fmt(row.test_loss);
    for (Index k = 0; k < row.params.size(); ++k) {
      csv << ',' << fmt(row.params[k]);
    }
    csv << '\n';
  }
  write_text(bundle, "training_curve.csv", csv.str());

  std::ostringstream ptab;
  ptab << "setting,gamma,tau";
  for (int e : riders) {
    ptab << ",q:" << net->edges[static_cast<std::size_t>(e)].name;
  }
  ptab << '\n' << preset;
  for (Index k = 0; k < trace.final_params.size(); ++k) {
    ptab << ',' << fmt(trace.final_params[k]);
  }
  ptab << '\n';
  write_text(bundle, "learned_params.csv", ptab.str());

  json learned = json::object();
  learned["gamma"] = trace.final_params[0];
  learned["tau"] = trace.final_params[1];
  json qvals = json::array();
  for (Index k = 2; k < trace.final_params.size(); ++k) {
    qvals.push_back(trace.final_params[k]);
  }
  learned["q_cap"] = qvals;
  bundle.summary = {
      {"experiment", "linear-city-learn"},
      {"preset", preset},
      {"epochs", static_cast<int>(trace.epochs.size())},
      {"diverged", trace.diverged},
      {"first_train_loss",
       trace.epochs.empty() ? 0.0 : trace.epochs.front().train_loss},
      {"final_train_loss",
       trace.epochs.empty() ? 0.0 : trace.epochs.back().train_loss},
      {"final_test_loss",
       trace.epochs.empty() ? 0.0 : trace.epochs.back().test_loss},
      {"learned", learned},
      {"grad_implicit_calls", trace.n_implicit},
      {"grad_unrolled_calls", trace.n_unrolled}};
  write_json(bundle, "summary.json", bundle.summary);
  return bundle;
}

ResultBundle run_toll(const ExperimentConfig& cfg) {
  ResultBundle bundle;
  bundle.out_dir = cfg.out_dir;
  const Network base =
      load_network(resolve(cfg, cfg.raw.at("network").get<std::string>()));
  const auto net = std::make_shared<const Network>(expand_network(base));
  DemandSpec dspec = load_demand_spec(
      resolve(cfg, cfg.raw.at("demand").get<std::string>()));
  if (cfg.seed != 0) dspec.seed = cfg.seed;
  const int period = jget_int(cfg.raw, "demand_period", 0);
  const auto all = dspec.realize(net->n_od());
  require(period >= 0 && period < static_cast<int>(all.size()),
          "linear-city-toll: demand_period out of range");

  InterventionSpec spec;
  spec.net = net;
  spec.demands = all[static_cast<std::size_t>(period)];
  spec.design_cost.net = net;
  const json intv = cfg.raw.value("intervention", json::object());
  spec.toll_edges = driving_edges(*net);
  spec.toll_max = jget(intv, "toll_max", 5.0);
  spec.budget_fraction = jget(intv, "budget_fraction", 0.15);
  spec.armijo_c1 = jget(intv, "armijo_c1", 1e-4);
  spec.backtrack_factor = jget(intv, "backtrack_factor", 0.5);
  spec.max_backtracks = jget_int(intv, "max_backtracks", 30);
  spec.max_outer = jget_int(intv, "max_outer", 40);
  spec.step0 = jget(intv, "step0", 0.5);
  spec.rho0 = jget(intv, "rho0", 10.0);
  SolverOptions forward;
  forward.eps_proj = 1.0;
  forward.eps_newton = 1e-4;
  forward.max_iter = 200;
  spec.forward = solver_from_config(cfg.raw, forward);

  if (cfg.raw.contains("learned")) {
    // Design under learned parameters, evaluate under the truth.
    const json& l = cfg.raw.at("learned");
    spec.true_cost = spec.design_cost;
    spec.design_cost.behavior.gamma =
        jget(l, "gamma", spec.design_cost.behavior.gamma);
    spec.design_cost.behavior.tau =
        jget(l, "tau", spec.design_cost.behavior.tau);
    if (l.contains("q_cap")) {
      const auto riders = riding_edges(*net);
      const auto& qv = l.at("q_cap");
      require(qv.size() == riders.size(),
              "linear-city-toll: learned q_cap length mismatch");
      spec.design_cost.behavior.q_cap_override.assign(
          static_cast<std::size_t>(net->n_edges()),
          std::numeric_limits<double>::quiet_NaN());
      for (std::size_t i = 0; i < riders.size(); ++i) {
        spec.design_cost.behavior
            .q_cap_override[static_cast<std::size_t>(riders[i])] =
            qv.at(i).get<double>();
      }
    }
  }

  const DesignResult res = design_tolls(spec);

  std::ostringstream csv;
  csv << "iter,objective,tt,crowding,step,rho\n";
  for (const DesignStep& s : res.trace) {
    csv << s.iter << ',' << fmt(s.objective) << ',' << fmt(s.tt) << ','
        << fmt(s.crowding) << ',' << fmt(s.step) << ',' << fmt(s.rho) << '\n';
  }
  write_text(bundle, "design_trace.csv", csv.str());

  json tolls = json::array();
  for (Index k = 0; k < res.tolls.size(); ++k) tolls.push_back(res.tolls[k]);
  bundle.summary = {
      {"experiment", "linear-city-toll"},
      {"status", res.status},
      {"tt_reduction_pct", res.tt_reduction_pct},
      {"crowding_increase_pct", res.crowding_increase_pct},
      {"tt_before", res.before.total_travel_time},
      {"tt_after", res.after.total_travel_time},
      {"crowding_before", res.before.total_crowding_cost},
      {"crowding_after", res.after.total_crowding_cost},
      {"tolls", tolls}};
  if (res.before_true && res.after_true) {
    bundle.summary["truth_eval"] = {
        {"tt_reduction_pct",
         100.0 *
             (res.before_true->total_travel_time -
              res.after_true->total_travel_time) /
             res.before_true->total_travel_time},
        {"crowding_increase_pct",
         100.0 *
             (res.after_true->total_crowding_cost -
              res.before_true->total_crowding_cost) /
             res.before_true->total_crowding_cost}};
  }
  write_json(bundle, "summary.json", bundle.summary);
  return bundle;
}

ResultBundle run_solve(const ExperimentConfig& cfg) {
  ResultBundle bundle;
  bundle.out_dir = cfg.out_dir;
  Network loaded =
      load_network(resolve(cfg, cfg.raw.at("network").get<std::string>()));
  const auto net = std::make_shared<const Network>(
      loaded.has_riding() ? expand_network(loaded) : std::move(loaded));

  DemandMatrix dm;
  if (cfg.raw.contains("demands")) {
    const auto& arr = cfg.raw.at("demands");
    dm.q = Vector(static_cast<Index>(arr.size()));
    Index i = 0;
    for (const auto& v : arr) dm.q[i++] = v.get<double>();
    require(dm.q.size() == net->n_od(), "solve: demands length mismatch");
  } else {
    DemandSpec dspec = load_demand_spec(
        resolve(cfg, cfg.raw.at("demand").get<std::string>()));
    if (cfg.seed != 0) dspec.seed = cfg.seed;
    dm = dspec.realize(net->n_od()).front();
  }

  SolverOptions opts;
  opts.eps_proj = 1.0;
  opts.eps_newton = 1e-6;
  opts = solver_from_config(cfg.raw, opts);

  CostModel cost;
  cost.net = net;
  const EquilibriumState eq = solve_equilibrium(cost, dm, opts);
  const FlowMetrics met = metrics(eq, cost);

  write_text(bundle, "trace.csv", eq.last_trace.csv());
  json flows = json::object();
  for (Index e = 0; e < net->n_edges(); ++e) {
    flows[net->edges[static_cast<std::size_t>(e)].name.empty()
              ? "edge" + std::to_string(e)
              : net->edges[static_cast<std::size_t>(e)].name] =
        eq.edge_flows[e];
  }
  bundle.summary = {
      {"experiment", "solve"},
      {"wardrop_gap", eq.wardrop_gap},
      {"converged", eq.status == SolveStatus::converged},
      {"eps_newton", opts.eps_newton},
      {"n_paths", static_cast<int>(eq.paths.n_paths())},
      {"total_travel_time", met.total_travel_time},
      {"total_crowding_cost", met.total_crowding_cost},
      {"edge_flows", flows}};
  write_json(bundle, "summary.json", bundle.summary);
  if (eq.status != SolveStatus::converged) bundle.exit_code = 3;
  return bundle;
}

ResultBundle run_gradcheck(const ExperimentConfig& cfg) {
  ResultBundle bundle;
  bundle.out_dir = cfg.out_dir;
  Network loaded =
      load_network(resolve(cfg, cfg.raw.at("network").get<std::string>()));
  const auto net = std::make_shared<const Network>(
      loaded.has_riding() ? expand_network(loaded) : std::move(loaded));

  DemandMatrix dm;
  const auto& arr = cfg.raw.at("demands");
  dm.q = Vector(static_cast<Index>(arr.size()));
  Index i = 0;
  for (const auto& v : arr) dm.q[i++] = v.get<double>();
  require(dm.q.size() == net->n_od(), "gradcheck: demands length mismatch");

  CostModel cost;
  cost.net = net;
  ParameterBinding binding;
  const json gc = cfg.raw.value("gradcheck", json::object());
  std::vector<std::string> names;
  for (const auto& p : gc.value("parameters", json::array({"gamma", "tau"}))) {
    const std::string name = p.get<std::string>();
    names.push_back(name);
    if (name == "gamma") {
      binding.refs.push_back({ParamRef::Kind::gamma, -1});
    } else if (name == "tau") {
      binding.refs.push_back({ParamRef::Kind::tau, -1});
    } else if (name.rfind("toll:", 0) == 0) {
      int e = -1;
      for (Index k = 0; k < net->n_edges(); ++k) {
        if (net->edges[static_cast<std::size_t>(k)].name == name.substr(5)) {
          e = static_cast<int>(k);
        }
      }
      require(e >= 0, "gradcheck: unknown edge in " + name);
      binding.refs.push_back({ParamRef::Kind::toll, e});
    } else {
      throw ConfigError("gradcheck: unknown parameter " + name);
    }
  }
  binding.lower = Vector::Constant(binding.size(), 0.0);
  binding.upper = Vector::Constant(binding.size(), 100.0);

  SolverOptions opts;
  opts.eps_proj = 1e-2;
  opts.eps_newton = 1e-10;
  opts.max_iter = 600;
  opts = solver_from_config(cfg.raw, opts);
  const double fd_step = jget(gc, "fd_step", 1e-5);
  const double tol = jget(gc, "tol", 1e-3);

  const PipelineTTGrads grads =
      pipeline_tt_gradients(cost, dm, binding, opts, fd_step, false);

  // --grad-mode narrows which route is checked against the oracle.
  const bool check_implicit =
      cfg.grad_mode.empty() || cfg.grad_mode == "implicit" ||
      cfg.grad_mode == "fd";
  const bool check_explicit =
      cfg.grad_mode.empty() || cfg.grad_mode == "explicit" ||
      cfg.grad_mode == "fd";
  std::ostringstream csv;
  csv << "param,implicit,explicit,fd,rel_implicit_fd,rel_explicit_fd\n";
  double worst = 0.0;
  for (Index k = 0; k < binding.size(); ++k) {
    const double scale = 1.0 + std::abs(grads.fd_g[k]);
    const double ri = std::abs(grads.implicit_g[k] - grads.fd_g[k]) / scale;
    const double ru = std::abs(grads.unrolled_g[k] - grads.fd_g[k]) / scale;
    if (check_implicit) worst = std::max(worst, ri);
    if (check_explicit) worst = std::max(worst, ru);
    csv << names[static_cast<std::size_t>(k)] << ','
        << fmt(grads.implicit_g[k]) << ',' << fmt(grads.unrolled_g[k]) << ','
        << fmt(grads.fd_g[k]) << ',' << fmt(ri) << ',' << fmt(ru) << '\n';
  }
  write_text(bundle, "gradcheck.csv", csv.str());
  bundle.summary = {{"experiment", "gradcheck"},
                    {"tt", grads.tt},
                    {"worst_rel_err", worst},
                    {"tol", tol},
                    {"pass", worst <= tol}};
  write_json(bundle, "summary.json", bundle.summary);
  if (worst > tol) bundle.exit_code = 3;
  return bundle;
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  ExperimentConfig cfg;
  cfg.config_path = path;
  cfg.config_dir = fs::path(path).parent_path().string();
  if (cfg.config_dir.empty()) cfg.config_dir = ".";
  cfg.raw = toml::parse_file(path);
  if (!cfg.raw.contains("experiment")) {
    throw ConfigError("/experiment: missing");
  }
  cfg.experiment = cfg.raw.at("experiment").get<std::string>();
  cfg.out_dir = jget_str(cfg.raw, "output_dir", "out");
  cfg.seed = static_cast<std::uint64_t>(jget_int(cfg.raw, "seed", 0));
  return cfg;
}

std::vector<std::string> validate_config(const std::string& path) {
  std::vector<std::string> diags;
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(path);
  } catch (const Error& e) {
    diags.push_back(e.what());
    return diags;
  }
  static const std::vector<std::string> known{
      "solve",      "gradcheck",        "braess",
      "linear-city-learn", "linear-city-toll", "two-loop-bench"};
  if (std::find(known.begin(), known.end(), cfg.experiment) == known.end()) {
    diags.push_back("/experiment: unknown experiment '" + cfg.experiment +
                    "'");
    return diags;
  }

  auto check_network = [&](const std::string& key) {
    if (!cfg.raw.contains(key)) {
      diags.push_back("/" + key + ": missing");
      return;
    }
    const std::string p = resolve(cfg, cfg.raw.at(key).get<std::string>());
    try {
      const Network net = load_network(p);
      const Network solved = net.has_riding() ? expand_network(net) : net;
      // Connectivity probe at free-flow costs.
      CostModel cost;
      cost.net = std::make_shared<const Network>(solved);
      DemandMatrix dm;
      dm.q = Vector::Ones(solved.n_od());
      shortest_paths_aon(solved, cost.free_flow_costs(), dm);
    } catch (const Error& e) {
      diags.push_back("/" + key + ": " + e.what());
    }
  };
  check_network("network");
  if (cfg.raw.contains("demand")) {
    try {
      load_demand_spec(resolve(cfg, cfg.raw.at("demand").get<std::string>()));
    } catch (const Error& e) {
      diags.push_back(std::string("/demand: ") + e.what());
    }
  }
  if (cfg.raw.contains("solver")) {
    const json& s = cfg.raw.at("solver");
    for (const std::string key :
         {"r0", "eps_proj", "eps_newton", "eta_seed"}) {
      if (s.contains(key) && !(s.at(key).get<double>() > 0)) {
        diags.push_back("/solver/" + key + ": must be positive");
      }
    }
    if (s.contains("max_iter") && s.at("max_iter").get<int>() < 1) {
      diags.push_back("/solver/max_iter: must be >= 1");
    }
  }
  return diags;
}

ResultBundle run_experiment(const ExperimentConfig& cfg) {
  ResultBundle bundle;
  bundle.out_dir = cfg.out_dir;
  try {
    if (cfg.experiment == "braess") {
      bundle = run_braess(cfg);
    } else if (cfg.experiment == "two-loop-bench") {
      bundle = run_two_loop(cfg);
    } else if (cfg.experiment == "linear-city-learn") {
      bundle = run_learn(cfg);
    } else if (cfg.experiment == "linear-city-toll") {
      bundle = run_toll(cfg);
    } else if (cfg.experiment == "solve") {
      bundle = run_solve(cfg);
    } else if (cfg.experiment == "gradcheck") {
      bundle = run_gradcheck(cfg);
    } else {
      throw ConfigError("/experiment: unknown experiment '" + cfg.experiment +
                        "'");
    }
  } catch (const ConfigError& e) {
    bundle.exit_code = 2;
    write_json(bundle, "error.json",
               {{"error", "config"}, {"message", e.what()}});
  } catch (const ConvergenceError& e) {
    bundle.exit_code = 3;
    write_json(bundle, "error.json",
               {{"error", "non-convergence"}, {"message", e.what()}});
  } catch (const SolverError& e) {
    bundle.exit_code = 3;
    write_json(bundle, "error.json",
               {{"error", "solver"}, {"message", e.what()}});
  } catch (const Error& e) {
    bundle.exit_code = 4;
    write_json(bundle, "error.json",
               {{"error", "internal"}, {"message", e.what()}});
  }

  // Run metadata: the only artifact carrying a timestamp.
  std::string config_bytes;
  {
    std::ifstream in(cfg.config_path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    config_bytes = ss.str();
  }
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  write_json(
      bundle, "metadata.json",
      {{"experiment", cfg.experiment},
       {"config", cfg.config_path},
       {"config_hash", hex64(fnv1a(config_bytes))},
       {"seed", cfg.seed},
       {"version", "0.1.0"},
       {"timestamp_unix_ms",
        std::chrono::duration_cast<std::chrono::milliseconds>(now).count()}});
  return bundle;
}

PipelineTTGrads pipeline_tt_gradients(const CostModel& cost,
                                      const DemandMatrix& demands,
                                      const ParameterBinding& binding,
                                      const SolverOptions& forward,
                                      double fd_step, bool fd_one_sided) {
  const auto net = cost.net;
  const Vector lambda0 = binding.pack(cost);

  SolverOptions tight = forward;
  tight.eps_newton = std::min(forward.eps_newton, 1e-8);
  const EquilibriumState eq = solve_equilibrium(cost, demands, tight);

  // Path problem with the terminal path set; the unrolled mode replays a
  // projection trajectory started from the all-or-nothing corner.
  const VIProblem prob_path =
      assemble_vi(cost, demands, ViForm::path, eq.paths, binding);
  Vector f0 = Vector::Zero(eq.paths.n_paths());
  f0.head(net->n_od()) = demands.q;  // initial paths are in od order
  SolverOptions proj_opts = tight;
  proj_opts.max_iter = std::max(tight.max_iter, 4000);
  const SolveTrace trace = solve_projection(prob_path, lambda0, proj_opts, f0);

  const Matrix Delta = eq.paths.edge_incidence(net->n_edges());
  const Vector f_star = trace.z_star;
  const Vector x = Delta * f_star;

  PipelineTTGrads out;
  const FlowMetrics met = metrics_for_flows(x, cost);
  out.tt = met.total_travel_time;

  Vector w_x(net->n_edges());
  for (Index e = 0; e < net->n_edges(); ++e) {
    w_x[e] = cost.time_of(static_cast<int>(e), x[e]) +
             cost.time_slope(static_cast<int>(e), x[e]) * x[e];
  }

  // Direct dependence of TT on lambda: only capacity parameters move the
  // travel-time function itself.
  Vector direct = Vector::Zero(binding.size());
  const Matrix cj = binding.cost_jacobian(cost, x);
  for (Index k = 0; k < binding.size(); ++k) {
    if (binding.refs[static_cast<std::size_t>(k)].kind ==
        ParamRef::Kind::capacity) {
      const int e = binding.refs[static_cast<std::size_t>(k)].edge;
      direct[k] = x[e] * cj(e, k);
    }
  }

  // Unrolled mode on the path trajectory.
  GradientRequest req_u;
  req_u.mode = GradMode::unrolled;
  req_u.cotangent = Vector(Delta.transpose() * w_x);
  const EquilibriumGradient gu =
      grad_explicit(prob_path, lambda0, trace, req_u);
  out.unrolled_g = gu.dz_dlambda.row(0).transpose() + direct;

  // Implicit mode on the edge formulation.
  const VIProblem prob_edge =
      assemble_vi(cost, demands, ViForm::edge, eq.paths, binding);
  const Vector z_star = commodity_flows_from_paths(*net, eq.paths, f_star);
  const double smax = cost.slopes(x).maxCoeff();
  const double r = std::min(
      0.5, 0.9 / (static_cast<double>(net->n_od()) * smax + 1e-12));
  const auto set = prob_edge.omega(lambda0);
  ProjectOptions popts;
  popts.tol = 1e-8 * (1.0 + z_star.cwiseAbs().maxCoeff());
  ProjectionResult seed;
  seed.active_mask.assign(static_cast<std::size_t>(set->n_ineq()), 0);
  {
    const Vector slack0 = set->A * z_star - set->b;
    for (Index i = 0; i < set->n_ineq(); ++i) {
      seed.active_mask[static_cast<std::size_t>(i)] =
          slack0[i] > -popts.tol_active;
    }
  }
  popts.warm = &seed;
  const ProjectionResult res =
      project(*set, z_star - r * prob_edge.F(z_star, lambda0), popts);
  Vector cot(z_star.size());
  for (Index w = 0; w < net->n_od(); ++w) {
    cot.segment(w * net->n_edges(), net->n_edges()) = w_x;
  }
  GradientRequest req_i;
  req_i.cotangent = cot;
  EquilibriumGradient gi;
  try {
    gi = grad_implicit(prob_edge, lambda0, z_star, res, r, req_i);
  } catch (const DegeneracyError&) {
    // Degenerate edge system: replay fixed-point layers of the forward
    // (path) formulation instead, which is cheap enough to run deep.
    GradientRequest req_p;
    req_p.cotangent = Vector(Delta.transpose() * w_x);
    gi = grad_unrolled_tail(prob_path, lambda0, f_star, 6000, req_p);
  }
  out.implicit_g = gi.dz_dlambda.row(0).transpose() + direct;

  // Finite differences of the full pipeline.
  out.fd_g = Vector(binding.size());
  auto tt_at = [&](const Vector& lambda) {
    const CostModel cm = binding.apply(cost, lambda);
    const EquilibriumState e2 = solve_equilibrium(cm, demands, tight);
    return metrics_for_flows(e2.edge_flows, cm).total_travel_time;
  };
  for (Index k = 0; k < binding.size(); ++k) {
    Vector lp = lambda0;
    if (fd_one_sided) {
      const double h =
          lambda0[k] != 0.0 ? 0.05 * std::abs(lambda0[k]) : fd_step;
      lp[k] += h;
      out.fd_g[k] = (tt_at(lp) - out.tt) / h;
    } else {
      const double h = fd_step * (1.0 + std::abs(lambda0[k]));
      Vector lm = lambda0;
      lp[k] += h;
      lm[k] -= h;
      out.fd_g[k] = (tt_at(lp) - tt_at(lm)) / (2.0 * h);
    }
  }
  return out;
}

std::vector<BraessPoint> braess_sweep(const CostModel& cost, int design_edge,
                                      const Vector& q_grid,
                                      const SolverOptions& forward,
                                      double fd_step, bool fd_one_sided) {
  ParameterBinding binding;
  binding.refs.push_back({ParamRef::Kind::capacity, design_edge});
  binding.lower = Vector::Constant(1, 1e-6);
  binding.upper = Vector::Constant(1, 1e6);

  std::vector<BraessPoint> out(static_cast<std::size_t>(q_grid.size()));
  parallel_for(static_cast<int>(q_grid.size()), [&](int i) {
    DemandMatrix dm;
    dm.q = Vector::Constant(1, q_grid[i]);
    const PipelineTTGrads g = pipeline_tt_gradients(cost, dm, binding,
                                                    forward, fd_step,
                                                    fd_one_sided);
    out[static_cast<std::size_t>(i)] =
        BraessPoint{q_grid[i], g.implicit_g[0], g.unrolled_g[0], g.fd_g[0]};
  });
  return out;
}

LearningSpec city_learning_preset(std::shared_ptr<const Network> expanded,
                                  std::vector<DemandMatrix> demands,
                                  char preset, int epochs, std::uint64_t seed,
                                  const SolverOptions& forward) {
  require(preset >= 'a' && preset <= 'd', "unknown learning preset");
  LearningSpec spec;
  spec.net = expanded;
  spec.demands = std::move(demands);
  spec.true_cost.net = expanded;
  spec.true_cost.behavior.gamma = 1.0;
  spec.true_cost.behavior.tau = 1.0;

  const std::vector<int> riders = riding_edges(*expanded);
  spec.binding.refs.push_back({ParamRef::Kind::gamma, -1});
  spec.binding.refs.push_back({ParamRef::Kind::tau, -1});
  for (int e : riders) {
    spec.binding.refs.push_back({ParamRef::Kind::q_cap, e});
  }
  const Index m = spec.binding.size();
  spec.binding.lower = Vector(m);
  spec.binding.upper = Vector(m);
  spec.binding.lower << 0.0, 0.0, Vector::Constant(m - 2, 1.0);
  spec.binding.upper << 10.0, 10.0, Vector::Constant(m - 2, 200.0);

  const bool high_riding_init = preset == 'a' || preset == 'b';
  const double gamma0 = high_riding_init ? 0.2 : 1.5;
  const double tau0 = high_riding_init ? 1.5 : 0.2;
  const double q0 = high_riding_init ? 10.0 : 30.0;
  spec.initial = Vector(m);
  spec.initial << gamma0, tau0, Vector::Constant(m - 2, q0);

  const double lr_gamma = (preset == 'a' || preset == 'c') ? 1e-3 : 1e-4;
  spec.learning_rates = Vector(m);
  spec.learning_rates << lr_gamma, 1e-4, Vector::Constant(m - 2, 1e-4);

  spec.epochs = epochs;
  spec.seed = seed;
  spec.forward = forward;
  return spec;
}

}  // namespace vil
