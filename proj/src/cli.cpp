#include "mirrorla/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "mirrorla/bench.hpp"
#include "mirrorla/diversity.hpp"
#include "mirrorla/gradcheck.hpp"
#include "mirrorla/harness.hpp"
#include "mirrorla/rng.hpp"
#include "mirrorla/suites.hpp"

namespace mirrorla::cli {

using nlohmann::json;

namespace {

template <class T>
T get_as(const json& j, const std::string& key) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw UsageError("config key '" + key + "': " + e.what());
  }
}

void apply_modulation(ModulationConfig& m, const json& j) {
  if (!j.is_object()) throw UsageError("config key 'modulation' must be an object");
  for (const auto& [key, val] : j.items()) {
    const std::string k = "modulation." + key;
    if (key == "lambda") m.lambda = get_as<double>(val, k);
    else if (key == "eps") m.eps = get_as<double>(val, k);
    else if (key == "alpha_max") m.alpha_max = get_as<double>(val, k);
    else if (key == "stop_grad_variance") m.stop_grad_variance = get_as<bool>(val, k);
    else if (key == "disable_global") m.disable_global = get_as<bool>(val, k);
    else if (key == "disable_modulation") m.disable_modulation = get_as<bool>(val, k);
    else if (key == "disable_reflection") m.disable_reflection = get_as<bool>(val, k);
    else throw UsageError("unknown config key '" + k + "'");
  }
}

}  // namespace

void apply_json(RunConfig& cfg, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("malformed config: ") + e.what());
  }
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, val] : j.items()) {
    if (key == "command") cfg.command = get_as<std::string>(val, key);
    else if (key == "seed") cfg.seed = get_as<std::uint64_t>(val, key);
    else if (key == "out") cfg.out = get_as<std::string>(val, key);
    else if (key == "n_grid") cfg.n_grid = get_as<std::vector<std::size_t>>(val, key);
    else if (key == "reps") cfg.reps = get_as<std::size_t>(val, key);
    else if (key == "heads") cfg.heads = get_as<std::size_t>(val, key);
    else if (key == "head_dim") cfg.head_dim = get_as<std::size_t>(val, key);
    else if (key == "tokens") cfg.tokens = get_as<std::size_t>(val, key);
    else if (key == "seeds") cfg.seeds = get_as<std::size_t>(val, key);
    else if (key == "modulation") apply_modulation(cfg.modulation, val);
    else if (key == "equivalence_tol") cfg.equivalence_tol = get_as<double>(val, key);
    else if (key == "trials") cfg.trials = get_as<std::size_t>(val, key);
    else if (key == "spread") cfg.spread = get_as<double>(val, key);
    else if (key == "epochs") cfg.epochs = get_as<std::size_t>(val, key);
    else if (key == "lr") cfg.lr = get_as<double>(val, key);
    else if (key == "sequences") cfg.sequences = get_as<std::size_t>(val, key);
    else if (key == "modes") cfg.modes = get_as<std::vector<std::string>>(val, key);
    else throw UsageError("unknown config key '" + key + "'");
  }
}

std::string to_json(const RunConfig& cfg) {
  json j;
  j["command"] = cfg.command;
  j["seed"] = cfg.seed;
  j["out"] = cfg.out;
  j["n_grid"] = cfg.n_grid;
  j["reps"] = cfg.reps;
  if (cfg.heads) j["heads"] = *cfg.heads;
  if (cfg.head_dim) j["head_dim"] = *cfg.head_dim;
  if (cfg.tokens) j["tokens"] = *cfg.tokens;
  if (cfg.seeds) j["seeds"] = *cfg.seeds;
  j["modulation"] = {{"lambda", cfg.modulation.lambda},
                     {"eps", cfg.modulation.eps},
                     {"alpha_max", cfg.modulation.alpha_max},
                     {"stop_grad_variance", cfg.modulation.stop_grad_variance},
                     {"disable_global", cfg.modulation.disable_global},
                     {"disable_modulation", cfg.modulation.disable_modulation},
                     {"disable_reflection", cfg.modulation.disable_reflection}};
  j["equivalence_tol"] = cfg.equivalence_tol;
  j["trials"] = cfg.trials;
  j["spread"] = cfg.spread;
  j["epochs"] = cfg.epochs;
  j["lr"] = cfg.lr;
  j["sequences"] = cfg.sequences;
  j["modes"] = cfg.modes;
  return j.dump(2);
}

std::filesystem::path output_path(const RunConfig& cfg) {
  if (!cfg.out.empty()) return cfg.out;
  const char* dir = std::getenv(kOutDirEnv);
  const std::filesystem::path base = dir && *dir ? dir : ".";
  return base / (cfg.command + ".csv");
}

std::filesystem::path side_path(const RunConfig& cfg, const std::string& suffix) {
  const std::filesystem::path main = output_path(cfg);
  return main.parent_path() / (main.stem().string() + "_" + suffix + ".csv");
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw UsageError("cannot open output file " + path.string());
  os << std::setprecision(17);
  return os;
}

void close_output(std::ofstream& os, const std::filesystem::path& path) {
  os.close();
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

int cmd_check(const RunConfig& cfg, std::ostream& log) {
  std::vector<SuiteResult> rows;

  GradcheckOptions go;
  go.seed = cfg.seed;
  go.trials = cfg.trials;
  const GradcheckReport gr = gradcheck_suite(go);
  for (const GroupResult& g : gr.groups) {
    rows.push_back({"gradcheck_" + g.group + (g.stop_grad ? "_stopgrad" : "_fullgrad"),
                    gr.trials, g.worst_rel_error, gr.tolerance, g.passed});
  }
  rows.push_back(equivalence_suite(cfg.seed, 200, cfg.equivalence_tol));
  for (SuiteResult& r : isometry_suite(cfg.seed)) rows.push_back(std::move(r));
  rows.push_back(spectrum_suite(cfg.seed));
  rows.push_back(mixing_example());

  const auto path = output_path(cfg);
  std::ofstream os = open_output(path);
  os << "suite,cases,worst,tolerance,verdict\n";
  std::vector<std::string> failed;
  for (const SuiteResult& r : rows) {
    os << r.name << ',' << r.cases << ',' << r.worst << ',' << r.tolerance << ','
       << (r.passed ? "PASS" : "FAIL") << '\n';
    log << (r.passed ? "PASS " : "FAIL ") << r.name << " worst=" << r.worst
        << " tol=" << r.tolerance << '\n';
    if (!r.passed) failed.push_back(r.name);
  }
  close_output(os, path);
  if (!failed.empty()) {
    log << "check failed:";
    for (const auto& f : failed) log << ' ' << f;
    log << '\n';
    return kExitFailed;
  }
  log << "check passed (" << rows.size() << " suites)\n";
  return kExitOk;
}

int cmd_bench(const RunConfig& cfg, std::ostream& log) {
  BenchOptions bo;
  bo.n_grid = cfg.n_grid;
  bo.reps = cfg.reps;
  bo.heads = cfg.heads.value_or(4);
  bo.head_dim = cfg.head_dim.value_or(32);
  bo.seed = cfg.seed;
  const BenchResult res = run_bench(bo);

  const auto path = output_path(cfg);
  std::ofstream os = open_output(path);
  write_bench_csv(os, res);
  close_output(os, path);
  for (const BenchPoint& p : res.points) {
    log << p.path << " N=" << p.n << " median=" << p.median_seconds << "s peak=" << p.peak_bytes
        << "B\n";
  }
  log << "slope softmax=" << res.slope_softmax << " linear=" << res.slope_linear << '\n';
  const std::size_t ref = std::find(cfg.n_grid.begin(), cfg.n_grid.end(), 8192) != cfg.n_grid.end()
                              ? 8192
                              : cfg.n_grid.back();
  log << "memory ratio at N=" << ref << ": " << res.memory_ratio(ref) << '\n';
  return kExitOk;
}

int cmd_topology(const RunConfig& cfg, std::ostream& log) {
  const std::size_t H = cfg.heads.value_or(2), D = cfg.head_dim.value_or(8);
  const std::size_t N = cfg.tokens.value_or(64);
  std::vector<TopologyMode> modes;
  for (const std::string& m : cfg.modes) modes.push_back(parse_topology_mode(m));
  if (modes.empty()) throw UsageError("topology: no modes selected");

  const Array x = clustered_tokens(cfg.seed, N, H * D);
  Rng rng(cfg.seed + 1);
  const MirrorParams params = MirrorParams::random(H, D, rng);
  std::vector<TopologyResult> results;
  for (TopologyMode m : modes) results.push_back(topology_export(x, x, params, cfg.modulation, m));

  const auto path = output_path(cfg);
  std::ofstream os = open_output(path);
  write_topology_csv(os, results);
  close_output(os, path);
  for (const TopologyResult& r : results) {
    log << to_string(r.mode) << ": distinct rows " << r.distinct_rows
        << (r.degenerate ? " (degenerate kernel)" : "") << '\n';
  }
  return kExitOk;
}

int cmd_diversity(const RunConfig& cfg, std::ostream& log) {
  const std::size_t n = cfg.seeds.value_or(20);
  if (n < 2) throw UsageError("diversity: need at least 2 seeds");
  std::vector<CollapseResult> results;
  for (std::size_t i = 0; i < n; ++i) {
    results.push_back(
        collapse_construction(cfg.seed + i, cfg.spread, cfg.modulation, cfg.tokens.value_or(64)));
  }

  const auto path = output_path(cfg);
  std::ofstream os = open_output(path);
  write_disagreement_csv(os, results);
  close_output(os, path);

  std::vector<double> ratios;
  bool all_pass = true;
  const auto vpath = side_path(cfg, "verdict");
  std::ofstream vs = open_output(vpath);
  vs << "seed,variance,shift_fraction,ratio,verdict\n";
  for (const CollapseResult& r : results) {
    const bool ok = r.passed() && r.shift_fraction >= 0.999 && r.disagreement_ratio() > 0.0;
    all_pass = all_pass && ok;
    ratios.push_back(r.disagreement_ratio());
    vs << r.seed << ',' << r.variance << ',' << r.shift_fraction << ',' << r.disagreement_ratio()
       << ',' << (ok ? "PASS" : "FAIL") << '\n';
  }
  close_output(vs, vpath);

  double mean = 0.0, var = 0.0;
  for (double v : ratios) mean += v / static_cast<double>(ratios.size());
  for (double v : ratios) var += (v - mean) * (v - mean) / static_cast<double>(ratios.size() - 1);
  const double cv = mean > 0.0 ? std::sqrt(var) / mean : INFINITY;
  log << "diversity: " << n << " seeds, " << (all_pass ? "all PASS" : "some FAIL")
      << ", ratio mean " << mean << " cv " << cv << '\n';
  return all_pass && cv < 1.0 ? kExitOk : kExitFailed;
}

int cmd_train(const RunConfig& cfg, std::ostream& log) {
  const std::size_t n = cfg.seeds.value_or(5);
  const std::size_t H = cfg.heads.value_or(2), D = cfg.head_dim.value_or(4);
  const std::size_t N = cfg.tokens.value_or(16);
  if (n < 1) throw UsageError("train: need at least 1 seed");

  const auto path = output_path(cfg);
  const auto lpath = side_path(cfg, "log");
  std::ofstream os = open_output(path);
  std::ofstream ls = open_output(lpath);
  os << "kind,model,seed,init_acc,test_acc,gap_points\n";
  ls << "model,seed,step,loss,acc\n";

  std::vector<double> acc[2];
  const ModelKind kinds[2] = {ModelKind::mirror, ModelKind::relu_la};
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t seed = cfg.seed + i;
    const ToyTask task = make_task(seed, cfg.sequences, N, H * D);
    for (int a = 0; a < 2; ++a) {
      TrainConfig tc;
      tc.kind = kinds[a];
      tc.epochs = cfg.epochs;
      tc.lr = cfg.lr;
      tc.seed = seed;
      tc.heads = H;
      tc.modulation = cfg.modulation;
      const TrainResult r = train(task, tc);
      acc[a].push_back(r.test_accuracy);
      os << "run," << to_string(tc.kind) << ',' << seed << ',' << r.init_accuracy << ','
         << r.test_accuracy << ",\n";
      std::ostringstream rows;
      rows << std::setprecision(17);
      write_training_log(rows, r.state, false);
      std::istringstream in(rows.str());
      for (std::string line; std::getline(in, line);) {
        ls << to_string(tc.kind) << ',' << seed << ',' << line << '\n';
      }
      log << to_string(tc.kind) << " seed " << seed << ": test accuracy " << r.test_accuracy
          << '\n';
    }
  }
  const double med_mirror = median(acc[0]), med_relu = median(acc[1]);
  const double gap = 100.0 * (med_mirror - med_relu);
  os << "median,mirror,,," << med_mirror << ",\n";
  os << "median,relu_la,,," << med_relu << ",\n";
  os << "gap,,,,," << gap << '\n';
  close_output(os, path);
  close_output(ls, lpath);
  log << "median accuracy mirror " << med_mirror << " relu_la " << med_relu << ", gap " << gap
      << " points\n";
  return kExitOk;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& log) {
  CLI::App app{"Reflecting linear attention: checks, benchmarks and experiments"};
  app.name("mirrorla");
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_path;
  std::vector<std::size_t> n_grid;
  std::size_t reps = 0, heads = 0, head_dim = 0, tokens = 0, seeds = 0, trials = 0;
  std::size_t epochs = 0, sequences = 0;
  double lambda = 0, eps = 0, alpha_max = 0, eq_tol = 0, spread = 0, lr = 0;
  bool stop_grad = true;
  std::vector<std::string> modes;

  app.add_option("--config", config_path, "JSON config file; flags override its values");
  auto* o_seed = app.add_option("--seed", seed, "Base random seed");
  auto* o_out = app.add_option("--out", out_path, "Output CSV path");
  auto* o_grid = app.add_option("--n-grid", n_grid, "Sequence lengths for bench")->delimiter(',');
  auto* o_reps = app.add_option("--reps", reps, "Timed repetitions per point");
  auto* o_heads = app.add_option("--heads", heads, "Number of heads");
  auto* o_hd = app.add_option("--head-dim", head_dim, "Per-head width (even)");
  auto* o_tok = app.add_option("--tokens", tokens, "Tokens per sequence");
  auto* o_seeds = app.add_option("--seeds", seeds, "Number of seeds in sweeps");
  auto* o_trials = app.add_option("--trials", trials, "Gradient check trials");
  auto* o_lambda = app.add_option("--lambda", lambda, "Modulation temperature");
  auto* o_eps = app.add_option("--eps", eps, "Variance floor of the modulation");
  auto* o_alpha = app.add_option("--alpha-max", alpha_max, "Largest angular shift");
  auto* o_sg = app.add_option("--stop-grad-variance", stop_grad,
                              "Treat block variance as a constant in backward");
  auto* f_global = app.add_flag("--disable-global", "Skip the cross-head reflection");
  auto* f_mod = app.add_flag("--disable-modulation", "Use the base angles unchanged");
  auto* f_refl = app.add_flag("--disable-reflection", "Skip the block reflections");
  auto* o_eqtol = app.add_option("--equivalence-tol", eq_tol, "Tolerance of the equivalence suite");
  auto* o_spread = app.add_option("--spread", spread, "Cluster spread for diversity");
  auto* o_epochs = app.add_option("--epochs", epochs, "Training epochs");
  auto* o_lr = app.add_option("--lr", lr, "Learning rate");
  auto* o_seq = app.add_option("--sequences", sequences, "Training sequences per task");
  auto* o_modes = app.add_option("--modes", modes, "Topology modes")->delimiter(',');

  app.add_subcommand("check", "Run the verification suites");
  app.add_subcommand("bench", "Time softmax and linear attention over an N grid");
  app.add_subcommand("topology", "Export PCA projections of attention kernels");
  app.add_subcommand("diversity", "Run the mask-collapse constructions over seeds");
  app.add_subcommand("train", "Train both toy-task models over seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, log);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw UsageError("cannot read config file " + config_path);
      std::stringstream ss;
      ss << in.rdbuf();
      apply_json(cfg, ss.str());
    }
    cfg.command = app.get_subcommands().front()->get_name();
    if (o_seed->count()) cfg.seed = seed;
    if (o_out->count()) cfg.out = out_path;
    if (o_grid->count()) cfg.n_grid = n_grid;
    if (o_reps->count()) cfg.reps = reps;
    if (o_heads->count()) cfg.heads = heads;
    if (o_hd->count()) cfg.head_dim = head_dim;
    if (o_tok->count()) cfg.tokens = tokens;
    if (o_seeds->count()) cfg.seeds = seeds;
    if (o_trials->count()) cfg.trials = trials;
    if (o_lambda->count()) cfg.modulation.lambda = lambda;
    if (o_eps->count()) cfg.modulation.eps = eps;
    if (o_alpha->count()) cfg.modulation.alpha_max = alpha_max;
    if (o_sg->count()) cfg.modulation.stop_grad_variance = stop_grad;
    if (f_global->count()) cfg.modulation.disable_global = true;
    if (f_mod->count()) cfg.modulation.disable_modulation = true;
    if (f_refl->count()) cfg.modulation.disable_reflection = true;
    if (o_eqtol->count()) cfg.equivalence_tol = eq_tol;
    if (o_spread->count()) cfg.spread = spread;
    if (o_epochs->count()) cfg.epochs = epochs;
    if (o_lr->count()) cfg.lr = lr;
    if (o_seq->count()) cfg.sequences = sequences;
    if (o_modes->count()) cfg.modes = modes;
    cfg.modulation.validate();

    if (cfg.command == "check") return cmd_check(cfg, log);
    if (cfg.command == "bench") return cmd_bench(cfg, log);
    if (cfg.command == "topology") return cmd_topology(cfg, log);
    if (cfg.command == "diversity") return cmd_diversity(cfg, log);
    return cmd_train(cfg, log);
  } catch (const UsageError& e) {
    log << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    log << "invalid configuration: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kExitFailed;
  }
}

}  // namespace mirrorla::cli
