#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "mirrorla/cli.hpp"

using namespace mirrorla::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("mirrorla_cli_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run_args(std::vector<std::string> args, std::string* log_text = nullptr) {
  args.insert(args.begin(), "mirrorla");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, log;
  const int rc = run(static_cast<int>(argv.size()), argv.data(), out, log);
  if (log_text) *log_text = log.str();
  return rc;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

int spawn(const std::string& cmd) {
  const int st = std::system((std::string(MIRRORLA_CLI_PATH) + " " + cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

}  // namespace

TEST_CASE("json config applies and rejects bad input") {
  RunConfig cfg;
  apply_json(cfg, R"({"seed": 9, "reps": 7, "heads": 3, "n_grid": [8, 16, 32, 64],
                      "modulation": {"lambda": 2.5, "stop_grad_variance": false},
                      "modes": ["vanilla", "mirror"]})");
  CHECK(cfg.seed == 9);
  CHECK(cfg.reps == 7);
  CHECK(cfg.heads == 3u);
  CHECK_FALSE(cfg.head_dim.has_value());
  CHECK(cfg.n_grid == std::vector<std::size_t>{8, 16, 32, 64});
  CHECK(cfg.modulation.lambda == 2.5);
  CHECK_FALSE(cfg.modulation.stop_grad_variance);
  CHECK(cfg.modes.size() == 2);

  CHECK_THROWS_AS(apply_json(cfg, "{\"sead\": 1}"), UsageError);
  CHECK_THROWS_AS(apply_json(cfg, "{\"seed\": \"one\"}"), UsageError);
  CHECK_THROWS_AS(apply_json(cfg, "{\"modulation\": {\"lamda\": 1}}"), UsageError);
  CHECK_THROWS_AS(apply_json(cfg, "{\"seed\": 1"), UsageError);
  CHECK_THROWS_AS(apply_json(cfg, "[1, 2]"), UsageError);
}

TEST_CASE("json round trip") {
  RunConfig a;
  a.command = "train";
  a.seed = 42;
  a.tokens = 12;
  a.modulation.alpha_max = 1.0;
  RunConfig b;
  apply_json(b, to_json(a));
  CHECK(b.seed == 42);
  CHECK(b.tokens == 12u);
  CHECK(b.modulation.alpha_max == 1.0);
  CHECK(to_json(b) == to_json(a));
}

TEST_CASE("output paths") {
  RunConfig cfg;
  cfg.command = "topology";
  ::unsetenv(kOutDirEnv);
  CHECK(output_path(cfg) == fs::path(".") / "topology.csv");
  ::setenv(kOutDirEnv, "/tmp/somewhere", 1);
  CHECK(output_path(cfg) == fs::path("/tmp/somewhere/topology.csv"));
  cfg.out = "/x/y/res.csv";
  CHECK(output_path(cfg) == fs::path("/x/y/res.csv"));
  CHECK(side_path(cfg, "log") == fs::path("/x/y/res_log.csv"));
  ::unsetenv(kOutDirEnv);
}

TEST_CASE("usage errors exit 2") {
  const fs::path bad = scratch() / "bad.json";
  std::ofstream(bad) << "{ not json";
  CHECK(run_args({"check", "--config", bad.string()}) == kExitUsage);
  const fs::path unknown = scratch() / "unknown.json";
  std::ofstream(unknown) << R"({"tolerance": 1})";
  CHECK(run_args({"check", "--config", unknown.string()}) == kExitUsage);
  CHECK(run_args({"check", "--config", (scratch() / "missing.json").string()}) == kExitUsage);
  CHECK(run_args({}) == kExitUsage);
  CHECK(run_args({"frobnicate"}) == kExitUsage);
  CHECK(run_args({"check", "--seed", "x"}) == kExitUsage);
  CHECK(run_args({"check", "--alpha-max", "9"}) == kExitUsage);
  CHECK(run_args({"bench", "--n-grid", "64,128", "--out", (scratch() / "b.csv").string()}) ==
        kExitUsage);
  CHECK(run_args({"--help"}) == kExitOk);
}

TEST_CASE("check passes by default and fails on an impossible tolerance") {
  const fs::path out = scratch() / "check.csv";
  std::string log;
  CHECK(run_args({"check", "--out", out.string()}, &log) == kExitOk);
  const auto rows = csv_rows(out);
  REQUIRE(rows.size() > 1);
  CHECK(rows[0] == std::vector<std::string>{"suite", "cases", "worst", "tolerance", "verdict"});
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].back() == "PASS");

  CHECK(run_args({"check", "--equivalence-tol", "0", "--out", out.string()}, &log) ==
        kExitFailed);
  CHECK(log.find("check failed") != std::string::npos);
  CHECK(log.find("equivalence") != std::string::npos);
}

TEST_CASE("flags override the config file") {
  const fs::path cfg = scratch() / "tol.json";
  std::ofstream(cfg) << R"({"equivalence_tol": 0})";
  const fs::path out = scratch() / "check2.csv";
  CHECK(run_args({"check", "--config", cfg.string(), "--out", out.string()}) == kExitFailed);
  CHECK(run_args({"check", "--config", cfg.string(), "--equivalence-tol", "1e-10", "--out",
                  out.string()}) == kExitOk);
}

TEST_CASE("topology writes three equal blocks and is reproducible") {
  const fs::path a = scratch() / "topo_a.csv", b = scratch() / "topo_b.csv";
  REQUIRE(run_args({"topology", "--seed", "3", "--out", a.string()}) == kExitOk);
  REQUIRE(run_args({"topology", "--seed", "3", "--out", b.string()}) == kExitOk);
  CHECK(slurp(a) == slurp(b));
  const auto rows = csv_rows(a);
  CHECK(rows[0] == std::vector<std::string>{"point_id", "pc1", "pc2", "mode"});
  std::map<std::string, int> per_mode;
  for (std::size_t i = 1; i < rows.size(); ++i) ++per_mode[rows[i][3]];
  CHECK(per_mode.size() == 3);
  CHECK(per_mode["vanilla"] == per_mode["truncate"]);
  CHECK(per_mode["truncate"] == per_mode["mirror_relu"]);
  CHECK(per_mode["vanilla"] == 64);
}

TEST_CASE("diversity verdicts all pass") {
  const fs::path out = scratch() / "div.csv";
  REQUIRE(run_args({"diversity", "--out", out.string()}) == kExitOk);
  const auto rows = csv_rows(out);
  CHECK(rows[0] ==
        std::vector<std::string>{"seed", "setting", "mean_hamming", "distinct", "dist_mean"});
  CHECK(rows.size() == 1 + 20 * 4);
  const auto verdicts = csv_rows(scratch() / "div_verdict.csv");
  REQUIRE(verdicts.size() == 21);
  for (std::size_t i = 1; i < verdicts.size(); ++i) CHECK(verdicts[i].back() == "PASS");

  const fs::path again = scratch() / "div2.csv";
  REQUIRE(run_args({"diversity", "--out", again.string()}) == kExitOk);
  CHECK(slurp(out) == slurp(again));
}

TEST_CASE("train reports the accuracy gap") {
  const fs::path out = scratch() / "train.csv";
  REQUIRE(run_args({"train", "--out", out.string()}) == kExitOk);
  const auto rows = csv_rows(out);
  CHECK(rows[0] ==
        std::vector<std::string>{"kind", "model", "seed", "init_acc", "test_acc", "gap_points"});
  CHECK(rows.back()[0] == "gap");
  CHECK(std::stod(rows.back()[5]) >= 5.0);
  const auto log = csv_rows(scratch() / "train_log.csv");
  CHECK(log[0] == std::vector<std::string>{"model", "seed", "step", "loss", "acc"});
  CHECK(log.size() == 1 + 2 * 5 * 200);

  const fs::path again = scratch() / "train2.csv";
  REQUIRE(run_args({"train", "--out", again.string()}) == kExitOk);
  CHECK(slurp(out) == slurp(again));
}

TEST_CASE("binary honours exit codes and the output directory variable") {
  const fs::path dir = scratch() / "envdir";
  const std::string env = std::string("env ") + kOutDirEnv + "=" + dir.string() + " ";
  const int rc = std::system((env + MIRRORLA_CLI_PATH + " topology >/dev/null 2>&1").c_str());
  REQUIRE(WIFEXITED(rc));
  CHECK(WEXITSTATUS(rc) == 0);
  CHECK(fs::exists(dir / "topology.csv"));
  CHECK(spawn("check --equivalence-tol 0 --out " + (scratch() / "c.csv").string()) == 1);
  CHECK(spawn("nonsense") == 2);
}
