#include "mirrorla/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>

#include "mirrorla/gradcheck.hpp"
#include "mirrorla/rng.hpp"

namespace mirrorla {

ToyTask sample_split(const ToyTaskSpec& spec, std::size_t sequences, std::size_t tokens,
                     std::uint64_t stream) {
  if (sequences % 2 != 0) throw std::invalid_argument("toy task: sequence count must be even");
  ToyTask task;
  task.spec = spec;
  task.sequences = Array({sequences, tokens, spec.width});
  task.labels.resize(sequences);
  Rng rng(spec.seed ^ (0xa0761d6478bd642fULL * (stream + 1)));
  for (std::size_t s = 0; s < sequences; ++s) {
    const int label = static_cast<int>(s % 2);
    task.labels[s] = label;
    const Array& mean = label == 0 ? spec.mean0 : spec.mean1;
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t f = 0; f < spec.width; ++f)
        task.sequences(s, t, f) = mean[f] + spec.noise * rng.normal();
  }
  return task;
}

ToyTask make_task(std::uint64_t seed, std::size_t sequences, std::size_t tokens,
                  std::size_t width, double noise) {
  if (width % 2 != 0) throw std::invalid_argument("toy task: width must be even");
  ToyTaskSpec spec;
  spec.seed = seed;
  spec.width = width;
  spec.noise = noise;
  Rng rng(seed);
  spec.mean0 = rng.uniform_array({width}, -1.0, -0.4);
  spec.mean1 = spec.mean0;
  for (double& v : spec.mean1.data()) v += rng.uniform(-0.8, -0.4);
  return sample_split(spec, sequences, tokens, 0);
}

const char* to_string(ModelKind kind) {
  return kind == ModelKind::mirror ? "mirror" : "relu_la";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "mirror") return ModelKind::mirror;
  if (name == "relu_la") return ModelKind::relu_la;
  throw std::invalid_argument("unknown model kind '" + name + "'");
}

AttentionConfig model_attention_config(ModelKind kind, const ModulationConfig& modulation) {
  AttentionConfig cfg;
  cfg.modulation = modulation;
  if (kind == ModelKind::relu_la) {
    cfg.modulation.disable_global = true;
    cfg.modulation.disable_reflection = true;
    cfg.modulation.disable_modulation = true;
  }
  return cfg;
}

TrainState init_model(std::size_t width, const TrainConfig& cfg) {
  if (cfg.heads == 0 || width % cfg.heads != 0 || (width / cfg.heads) % 2 != 0) {
    throw std::invalid_argument("init_model: width must split into heads of even size");
  }
  Rng rng(cfg.seed);
  TrainState st;
  st.params = MirrorParams::random(cfg.heads, width / cfg.heads, rng);
  st.head_w = rng.normal_array({2, width}, 0.1);
  st.head_b = Array({2});
  return st;
}

namespace {

struct Forward {
  AttentionTape tape;
  Array pooled;  // [S, F]
  Array logits;  // [S, 2]
};

Forward forward(const TrainState& st, const Array& x, const AttentionConfig& cfg) {
  const std::size_t S = x.extent(0), N = x.extent(1), F = x.extent(2);
  const std::size_t H = st.params.heads(), D = st.params.head_dim();
  Forward fw;
  fw.tape = attention_forward(x, x, split_heads(x, H), st.params, cfg);
  fw.pooled = Array({S, F});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t d = 0; d < D; ++d)
          fw.pooled(s, h * D + d) += fw.tape.out(s, h, t, d) / static_cast<double>(N);
  fw.logits = Array({S, 2});
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = st.head_b[c];
      for (std::size_t f = 0; f < F; ++f) acc += st.head_w(c, f) * fw.pooled(s, f);
      fw.logits(s, c) = acc;
    }
  return fw;
}

double logits_accuracy(const Array& logits, const std::vector<int>& labels) {
  std::size_t hits = 0;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const int pred = logits(s, 1) > logits(s, 0) ? 1 : 0;
    hits += pred == labels[s];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

}  // namespace

Array model_logits(const TrainState& state, const Array& sequences, ModelKind kind,
                   const ModulationConfig& modulation) {
  return forward(state, sequences, model_attention_config(kind, modulation)).logits;
}

double accuracy(const TrainState& state, const ToyTask& task, ModelKind kind,
                const ModulationConfig& modulation) {
  return logits_accuracy(model_logits(state, task.sequences, kind, modulation), task.labels);
}

TrainResult train(const ToyTask& task, const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  const std::size_t S = task.size(), N = task.sequences.extent(1), F = task.spec.width;
  const AttentionConfig attn = model_attention_config(cfg.kind, cfg.modulation);
  const ToyTask held_out = sample_split(task.spec, cfg.test_sequences, N, 1);

  TrainResult res;
  res.state = init_model(F, cfg);
  TrainState& st = res.state;
  res.init_accuracy = accuracy(st, held_out, cfg.kind, cfg.modulation);
  const std::size_t H = st.params.heads(), D = st.params.head_dim();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Forward fw = forward(st, task.sequences, attn);

    double loss = 0.0;
    Array d_logits({S, 2});
    for (std::size_t s = 0; s < S; ++s) {
      const double a = fw.logits(s, 0), b = fw.logits(s, 1);
      const double mx = std::max(a, b);
      const double lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
      const int y = task.labels[s];
      loss -= fw.logits(s, static_cast<std::size_t>(y)) - lse;
      for (std::size_t c = 0; c < 2; ++c) {
        const double p = std::exp(fw.logits(s, c) - lse);
        d_logits(s, c) = (p - (static_cast<int>(c) == y ? 1.0 : 0.0)) / static_cast<double>(S);
      }
    }
    loss /= static_cast<double>(S);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("train: non-finite loss at step " + std::to_string(epoch) + " (" +
                             to_string(cfg.kind) + ", lr " + std::to_string(cfg.lr) + ")");
    }
    st.loss_history.push_back(loss);
    st.accuracy_history.push_back(logits_accuracy(fw.logits, task.labels));

    Array d_w({2, F});
    Array d_b({2});
    Array d_pooled({S, F});
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t c = 0; c < 2; ++c) {
        d_b[c] += d_logits(s, c);
        for (std::size_t f = 0; f < F; ++f) {
          d_w(c, f) += d_logits(s, c) * fw.pooled(s, f);
          d_pooled(s, f) += d_logits(s, c) * st.head_w(c, f);
        }
      }
    Array d_out(fw.tape.out.shape());
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t t = 0; t < N; ++t)
          for (std::size_t d = 0; d < D; ++d)
            d_out(s, h, t, d) = d_pooled(s, h * D + d) / static_cast<double>(N);
    const GradBundle g = attention_backward(fw.tape, d_out, st.params, attn);

    for (std::size_t i = 0; i < d_w.size(); ++i) st.head_w[i] -= cfg.lr * d_w[i];
    for (std::size_t i = 0; i < 2; ++i) st.head_b[i] -= cfg.lr * d_b[i];
    Array theta = st.params.angles.theta();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= cfg.lr * g.d_theta[i];
    Array u = st.params.mirror.u();
    for (std::size_t i = 0; i < u.size(); ++i) u[i] -= cfg.lr * g.d_uc[i];
    if (!all_finite(theta) || !all_finite(u) || !all_finite(st.head_w)) {
      throw TrainingDiverged("train: non-finite parameters after step " + std::to_string(epoch));
    }
    st.params.angles = MirrorAngles(std::move(theta));
    st.params.mirror.set(std::move(u));
    ++st.steps;
  }
  res.test_accuracy = accuracy(st, held_out, cfg.kind, cfg.modulation);
  return res;
}

void write_training_log(std::ostream& os, const TrainState& state, bool header) {
  if (header) os << "step,loss,acc\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < state.loss_history.size(); ++i) {
    os << i << ',' << state.loss_history[i] << ',' << state.accuracy_history[i] << '\n';
  }
}

namespace {

constexpr char kMagic[4] = {'M', 'R', 'L', 'A'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void get_bytes(std::istream& is, unsigned char* out, std::size_t n, const char* what) {
  is.read(reinterpret_cast<char*>(out), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw ParamFileError(ParamFileError::Kind::truncated,
                         std::string("parameter file truncated while reading ") + what);
  }
}

std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  get_bytes(is, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is, const char* what) {
  unsigned char b[8];
  get_bytes(is, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

}  // namespace

void write_params(std::ostream& os, const MirrorParams& params) {
  os.write(kMagic, 4);
  put_u32(os, kParamFileVersion);
  put_u32(os, static_cast<std::uint32_t>(params.heads()));
  put_u32(os, static_cast<std::uint32_t>(params.head_dim()));
  for (double v : params.angles.theta().data()) put_f64(os, v);
  for (double v : params.mirror.u().data()) put_f64(os, v);
  if (!os) throw ParamFileError(ParamFileError::Kind::io, "failed writing parameter data");
}

MirrorParams read_params(std::istream& is) {
  unsigned char magic[4];
  get_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw ParamFileError(ParamFileError::Kind::bad_magic, "not a parameter file (bad magic)");
  }
  const std::uint32_t version = get_u32(is, "version");
  if (version != kParamFileVersion) {
    throw ParamFileError(ParamFileError::Kind::version_mismatch,
                         "parameter file version " + std::to_string(version) +
                             " is not supported (expected version " +
                             std::to_string(kParamFileVersion) + ")");
  }
  const std::uint32_t heads = get_u32(is, "heads");
  const std::uint32_t head_dim = get_u32(is, "head_dim");
  if (heads == 0 || head_dim == 0 || head_dim % 2 != 0 || heads > (1u << 16) ||
      head_dim > (1u << 16)) {
    throw ParamFileError(ParamFileError::Kind::invalid,
                         "parameter file has invalid shape header " + std::to_string(heads) +
                             " x " + std::to_string(head_dim));
  }
  Array theta({heads, head_dim / 2});
  for (double& v : theta.data()) v = get_f64(is, "theta");
  Array u({static_cast<std::size_t>(heads) * head_dim});
  for (double& v : u.data()) v = get_f64(is, "u_c");
  if (is.peek() != std::char_traits<char>::eof()) {
    throw ParamFileError(ParamFileError::Kind::invalid, "trailing bytes after parameter data");
  }
  try {
    return MirrorParams(MirrorAngles(std::move(theta)), GlobalMirror(std::move(u)));
  } catch (const std::invalid_argument& e) {
    throw ParamFileError(ParamFileError::Kind::invalid, e.what());
  }
}

void save_params(const std::filesystem::path& path, const MirrorParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ParamFileError(ParamFileError::Kind::io, "cannot open " + path.string());
  write_params(os, params);
}

MirrorParams load_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParamFileError(ParamFileError::Kind::io, "cannot open " + path.string());
  return read_params(is);
}

}  // namespace mirrorla
