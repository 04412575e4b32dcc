#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mirrorla/array.hpp"
#include "mirrorla/attention.hpp"
#include "mirrorla/featmap.hpp"

namespace mirrorla {

// Generator of the two-class toy task. Both class means sit in the negative
// orthant and their difference is negative in every coordinate, so a plain
// ReLU feature map sees nothing of the class signal.
struct ToyTaskSpec {
  std::uint64_t seed = 0;
  std::size_t width = 0;
  double noise = 0.1;
  Array mean0;  // [F]
  Array mean1;  // [F]
};

struct ToyTask {
  ToyTaskSpec spec;
  Array sequences;          // [S, N, F]
  std::vector<int> labels;  // S entries, alternating 0, 1

  std::size_t size() const { return labels.size(); }
};

ToyTask make_task(std::uint64_t seed, std::size_t sequences, std::size_t tokens,
                  std::size_t width, double noise = 0.1);

// Fresh samples from the same class means; `stream` selects an independent
// sample stream (make_task uses stream 0).
ToyTask sample_split(const ToyTaskSpec& spec, std::size_t sequences, std::size_t tokens,
                     std::uint64_t stream);

enum class ModelKind { mirror, relu_la };

const char* to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct TrainConfig {
  ModelKind kind = ModelKind::mirror;
  std::size_t epochs = 200;
  double lr = 0.5;
  std::uint64_t seed = 0;
  std::size_t heads = 2;
  std::size_t test_sequences = 200;
  ModulationConfig modulation;
};

struct TrainState {
  MirrorParams params;
  Array head_w;  // [2, F]
  Array head_b;  // [2]
  std::size_t steps = 0;
  std::vector<double> loss_history;
  std::vector<double> accuracy_history;  // training accuracy before each step
};

struct TrainResult {
  TrainState state;
  double init_accuracy = 0.0;  // held-out accuracy before training
  double test_accuracy = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Attention configuration of a model arm.
AttentionConfig model_attention_config(ModelKind kind, const ModulationConfig& modulation);

// Initial parameters drawn from cfg.seed.
TrainState init_model(std::size_t width, const TrainConfig& cfg);

// Linear attention with q = k = v = tokens, mean pooling and a linear head.
// Returns logits [S, 2].
Array model_logits(const TrainState& state, const Array& sequences, ModelKind kind,
                   const ModulationConfig& modulation = {});

double accuracy(const TrainState& state, const ToyTask& task, ModelKind kind,
                const ModulationConfig& modulation = {});

// Full-batch gradient descent with a fixed learning rate; cross-entropy loss.
// Accuracy is measured on a disjoint split drawn from the same generator.
TrainResult train(const ToyTask& task, const TrainConfig& cfg);

// step,loss,acc rows for one run.
void write_training_log(std::ostream& os, const TrainState& state, bool header = true);

class ParamFileError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, invalid };

  ParamFileError(Kind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

// Layout: "MRLA" magic, u32 version, u32 heads, u32 head_dim, then theta
// [heads * head_dim / 2] and u_c [heads * head_dim] as f64. All integers and
// floats little-endian.
inline constexpr std::uint32_t kParamFileVersion = 1;

void write_params(std::ostream& os, const MirrorParams& params);
MirrorParams read_params(std::istream& is);
void save_params(const std::filesystem::path& path, const MirrorParams& params);
MirrorParams load_params(const std::filesystem::path& path);

}  // namespace mirrorla
