#include "vil/experiment.hpp"

#include "vil/toml_lite.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace vil;
namespace fs = std::filesystem;

namespace {

const std::string kConfigDir = VIL_CONFIG_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("vil_test_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("toml subset parses sections, scalars and arrays") {
  const std::string text = R"(# comment
experiment = "solve"
seed = 7
ratio = 1.5e-3
flag = true
values = [1.0, 2, 3.5]

[solver]
eps_newton = 1e-6
name = "pn"  # trailing comment
)";
  const nlohmann::json j = toml::parse(text);
  CHECK(j.at("experiment") == "solve");
  CHECK(j.at("seed") == 7);
  CHECK(j.at("ratio").get<double>() == doctest::Approx(1.5e-3));
  CHECK(j.at("flag") == true);
  CHECK(j.at("values").size() == 3);
  CHECK(j.at("solver").at("eps_newton").get<double>() ==
        doctest::Approx(1e-6));
  CHECK(j.at("solver").at("name") == "pn");
}

TEST_CASE("toml subset reports line numbers on errors") {
  try {
    toml::parse("a = 1\nb = \n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("shipped configs validate cleanly") {
  for (const std::string name :
       {"braess.toml", "linear_city_learn.toml", "linear_city_toll.toml",
        "two_loop_bench.toml", "solve_toy.toml", "gradcheck_city.toml"}) {
    const auto diags = validate_config(kConfigDir + "/" + name);
    for (const std::string& d : diags) {
      MESSAGE(name, ": ", d);
    }
    CHECK(diags.empty());
  }
}

TEST_CASE("validation localizes schema violations") {
  TempDir tmp("validate");
  {
    std::ofstream bad(tmp.path / "bad_net.json");
    bad << R"({"schema": "vil.network.v1", "nodes": ["A", "B"],
               "edges": [{"tail": "A", "head": "B", "kind": "driving",
                          "T": 1.0, "s": -1.0}],
               "od_pairs": [["A", "B"]]})";
  }
  {
    std::ofstream cfg(tmp.path / "exp.toml");
    cfg << "experiment = \"solve\"\nnetwork = \"bad_net.json\"\n"
        << "demands = [1.0]\n";
  }
  const auto diags = validate_config((tmp.path / "exp.toml").string());
  REQUIRE(!diags.empty());
  bool located = false;
  for (const std::string& d : diags) {
    if (d.find("/edges/0/s") != std::string::npos) located = true;
  }
  CHECK(located);

  {
    std::ofstream cfg(tmp.path / "exp2.toml");
    cfg << "experiment = \"warp\"\n";
  }
  const auto diags2 = validate_config((tmp.path / "exp2.toml").string());
  REQUIRE(!diags2.empty());
  CHECK(diags2.front().find("unknown experiment") != std::string::npos);

  // Disconnected od pair surfaces as a connectivity diagnostic.
  {
    std::ofstream net(tmp.path / "disc.json");
    net << R"({"schema": "vil.network.v1", "nodes": ["A", "B", "C"],
               "edges": [{"tail": "A", "head": "B", "kind": "driving",
                          "T": 1.0}],
               "od_pairs": [["A", "C"]]})";
    std::ofstream cfg(tmp.path / "exp3.toml");
    cfg << "experiment = \"solve\"\nnetwork = \"disc.json\"\n"
        << "demands = [1.0]\n";
  }
  const auto diags3 = validate_config((tmp.path / "exp3.toml").string());
  REQUIRE(!diags3.empty());
  bool connectivity = false;
  for (const std::string& d : diags3) {
    if (d.find("unreachable") != std::string::npos) connectivity = true;
  }
  CHECK(connectivity);
}

TEST_CASE("solve experiment emits a converged summary on the toy network") {
  TempDir tmp("solve");
  ExperimentConfig cfg =
      load_experiment_config(kConfigDir + "/solve_toy.toml");
  cfg.out_dir = (tmp.path / "out").string();
  const ResultBundle bundle = run_experiment(cfg);
  CHECK(bundle.exit_code == 0);
  CHECK(bundle.summary.at("converged") == true);
  const double gap = bundle.summary.at("wardrop_gap").get<double>();
  CHECK(gap <= bundle.summary.at("eps_newton").get<double>());
  // Demand 2 over two identical edges splits evenly.
  CHECK(bundle.summary.at("edge_flows").at("upper").get<double>() ==
        doctest::Approx(1.0).epsilon(1e-6));
  CHECK(bundle.summary.at("edge_flows").at("lower").get<double>() ==
        doctest::Approx(1.0).epsilon(1e-6));
  CHECK(fs::exists(tmp.path / "out" / "trace.csv"));
  CHECK(fs::exists(tmp.path / "out" / "metadata.json"));
}

TEST_CASE("identical config and seed give byte-identical outputs") {
  TempDir tmp("determinism");
  ExperimentConfig cfg =
      load_experiment_config(kConfigDir + "/solve_toy.toml");
  cfg.out_dir = (tmp.path / "a").string();
  REQUIRE(run_experiment(cfg).exit_code == 0);
  cfg.out_dir = (tmp.path / "b").string();
  REQUIRE(run_experiment(cfg).exit_code == 0);
  for (const std::string name : {"summary.json", "trace.csv"}) {
    CHECK(slurp(tmp.path / "a" / name) == slurp(tmp.path / "b" / name));
  }
}

TEST_CASE("failed experiments leave an error manifest and nonzero code") {
  TempDir tmp("errors");
  {
    std::ofstream cfg(tmp.path / "exp.toml");
    cfg << "experiment = \"solve\"\nnetwork = \"missing.json\"\n"
        << "demands = [1.0]\n";
  }
  ExperimentConfig cfg =
      load_experiment_config((tmp.path / "exp.toml").string());
  cfg.out_dir = (tmp.path / "out").string();
  const ResultBundle bundle = run_experiment(cfg);
  CHECK(bundle.exit_code == 2);
  CHECK(fs::exists(tmp.path / "out" / "error.json"));
  CHECK(fs::exists(tmp.path / "out" / "metadata.json"));
}

TEST_CASE("gradcheck experiment produces agreeing modes on the city") {
  TempDir tmp("gradcheck");
  ExperimentConfig cfg =
      load_experiment_config(kConfigDir + "/gradcheck_city.toml");
  cfg.out_dir = (tmp.path / "out").string();
  const ResultBundle bundle = run_experiment(cfg);
  CHECK(bundle.exit_code == 0);
  CHECK(bundle.summary.at("pass") == true);
  CHECK(bundle.summary.at("worst_rel_err").get<double>() <= 1e-3);
}
