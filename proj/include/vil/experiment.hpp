#pragma once

#include "vil/endopt.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace vil {

struct ExperimentConfig {
  std::string experiment;
  std::string config_path;
  std::string config_dir;   // base for relative file references
  nlohmann::json raw;       // parsed config
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  std::string grad_mode;    // optional override: implicit|explicit|fd
};

struct ResultBundle {
  std::string out_dir;
  std::vector<std::string> files;  // names written under out_dir
  nlohmann::json summary;
  int exit_code = 0;
};

/// Parses the TOML experiment config; CLI flags may override out_dir, seed
/// and grad_mode afterwards.
ExperimentConfig load_experiment_config(const std::string& path);

/// Schema plus semantic validation; returns one diagnostic per violation
/// (empty means clean).
std::vector<std::string> validate_config(const std::string& path);

/// Runs the configured experiment and writes traces, plot CSVs, a JSON
/// summary and run metadata under out_dir. Failures leave a partial bundle
/// with an error manifest and a nonzero exit code.
ResultBundle run_experiment(const ExperimentConfig& config);

// --- building blocks shared with the acceptance suite ---

/// Total travel time and its gradient with respect to the bound parameters,
/// computed three ways: implicit differentiation on the edge formulation,
/// unrolled differentiation of the path-based projection trajectory, and
/// finite differences of the full pipeline.
struct PipelineTTGrads {
  double tt = 0.0;
  Vector implicit_g;
  Vector unrolled_g;
  Vector fd_g;
};

PipelineTTGrads pipeline_tt_gradients(const CostModel& cost,
                                      const DemandMatrix& demands,
                                      const ParameterBinding& binding,
                                      const SolverOptions& forward,
                                      double fd_step, bool fd_one_sided);

struct BraessPoint {
  double q = 0.0;
  double implicit_g = 0.0;
  double unrolled_g = 0.0;
  double fd_g = 0.0;
};

/// Demand sweep of d(total travel time)/d(capacity of design_edge).
std::vector<BraessPoint> braess_sweep(const CostModel& cost, int design_edge,
                                      const Vector& q_grid,
                                      const SolverOptions& forward,
                                      double fd_step, bool fd_one_sided);

/// Learning presets: initialization 1 (high riding costs) or 2 (low riding
/// costs) crossed with the two gamma learning rates.
LearningSpec city_learning_preset(std::shared_ptr<const Network> expanded,
                                  std::vector<DemandMatrix> demands,
                                  char preset, int epochs, std::uint64_t seed,
                                  const SolverOptions& forward);

}  // namespace vil
