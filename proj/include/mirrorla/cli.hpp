#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mirrorla/featmap.hpp"

namespace mirrorla::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitUsage = 2;

// Default output directory when --out is not given.
inline constexpr const char* kOutDirEnv = "MIRRORLA_OUT_DIR";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Unset optionals fall back to a per-command default.
struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string out;
  std::vector<std::size_t> n_grid = {512, 1024, 2048, 4096, 8192, 16384};
  std::size_t reps = 5;
  std::optional<std::size_t> heads;
  std::optional<std::size_t> head_dim;
  std::optional<std::size_t> tokens;
  std::optional<std::size_t> seeds;
  ModulationConfig modulation;
  double equivalence_tol = 1e-10;
  std::size_t trials = 50;
  double spread = 1e-4;
  std::size_t epochs = 200;
  double lr = 0.5;
  std::size_t sequences = 64;
  std::vector<std::string> modes = {"vanilla", "truncate", "mirror_relu"};
};

// Applies the keys of a JSON object onto cfg. Unknown keys and wrongly typed
// values raise UsageError.
void apply_json(RunConfig& cfg, const std::string& text);
std::string to_json(const RunConfig& cfg);

// Output file for the command: --out, else $MIRRORLA_OUT_DIR/<command>.csv,
// else ./<command>.csv.
std::filesystem::path output_path(const RunConfig& cfg);
// Sibling file "<stem>_<suffix>.csv" of the main output.
std::filesystem::path side_path(const RunConfig& cfg, const std::string& suffix);

int cmd_check(const RunConfig& cfg, std::ostream& log);
int cmd_bench(const RunConfig& cfg, std::ostream& log);
int cmd_topology(const RunConfig& cfg, std::ostream& log);
int cmd_diversity(const RunConfig& cfg, std::ostream& log);
int cmd_train(const RunConfig& cfg, std::ostream& log);

// Parses arguments, dispatches and maps exceptions to exit codes.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& log);

}  // namespace mirrorla::cli
