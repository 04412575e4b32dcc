#include "mirrorla/featmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mirrorla {

void ModulationConfig::validate() const {
  if (!(lambda > 0.0)) throw std::invalid_argument("ModulationConfig: lambda must be > 0");
  if (!(eps > 0.0)) throw std::invalid_argument("ModulationConfig: eps must be > 0");
  if (!(alpha_max > 0.0 && alpha_max <= std::numbers::pi)) {
    throw std::invalid_argument("ModulationConfig: alpha_max must lie in (0, pi]");
  }
}

MirrorParams::MirrorParams(MirrorAngles a, GlobalMirror m)
    : angles(std::move(a)), mirror(std::move(m)) {
  if (mirror.width() != width()) {
    throw ShapeError("MirrorParams: mirror width " + std::to_string(mirror.width()) +
                     " does not match H*D = " + std::to_string(width()));
  }
}

MirrorParams MirrorParams::random(std::size_t heads, std::size_t head_dim, Rng& rng) {
  if (head_dim % 2 != 0) throw ShapeError("MirrorParams: head dimension must be even");
  MirrorAngles angles(rng.normal_array({heads, head_dim / 2}));
  GlobalMirror mirror(rng.normal_array({heads * head_dim}));
  return MirrorParams(std::move(angles), std::move(mirror));
}

BlockStats block_variance(const Array& x) {
  const Array* parts[] = {&x};
  return block_variance(parts);
}

BlockStats block_variance(std::span<const Array* const> parts) {
  if (parts.empty()) throw std::invalid_argument("block_variance: no inputs");
  const Array& first = *parts[0];
  require_rank(first, 4, "block_variance input");
  const std::size_t B = first.extent(0), H = first.extent(1), D = first.extent(3);
  if (D % 2 != 0) throw ShapeError("block_variance: head dimension must be even");
  const std::size_t M = D / 2;
  std::size_t L = 0;
  for (const Array* p : parts) {
    require_rank(*p, 4, "block_variance input");
    if (p->extent(0) != B || p->extent(1) != H || p->extent(3) != D) {
      throw ShapeError("block_variance: parts disagree on [B, H, D]");
    }
    L += p->extent(2);
  }

  BlockStats stats{Array({B, H, M}), Array({B, H, M, 2})};
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t m = 0; m < M; ++m) {
        double m1 = 0.0, m2 = 0.0;
        for (const Array* p : parts) {
          const std::size_t N = p->extent(2);
          for (std::size_t t = 0; t < N; ++t) {
            const double* row = p->raw() + ((b * H + h) * N + t) * D;
            m1 += row[2 * m];
            m2 += row[2 * m + 1];
          }
        }
        m1 /= static_cast<double>(L);
        m2 /= static_cast<double>(L);
        double ss = 0.0;
        for (const Array* p : parts) {
          const std::size_t N = p->extent(2);
          for (std::size_t t = 0; t < N; ++t) {
            const double* row = p->raw() + ((b * H + h) * N + t) * D;
            const double d1 = row[2 * m] - m1, d2 = row[2 * m + 1] - m2;
            ss += d1 * d1 + d2 * d2;
          }
        }
        stats.variance(b, h, m) = ss / (2.0 * static_cast<double>(L));
        stats.mean(b, h, m, 0) = m1;
        stats.mean(b, h, m, 1) = m2;
      }
    }
  }
  return stats;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double modulation_shift(double variance, const ModulationConfig& cfg) {
  return sigmoid(cfg.lambda / (variance + cfg.eps)) * cfg.alpha_max;
}

double modulation_shift_slope(double variance, const ModulationConfig& cfg) {
  const double denom = variance + cfg.eps;
  const double s = sigmoid(cfg.lambda / denom);
  return -cfg.alpha_max * s * (1.0 - s) * cfg.lambda / (denom * denom);
}

Array modulate_angles(const MirrorAngles& theta, const BlockStats& stats,
                      const ModulationConfig& cfg) {
  require_rank(stats.variance, 3, "modulate_angles variance");
  const std::size_t B = stats.variance.extent(0), H = theta.heads(), M = theta.blocks();
  require_shape(stats.variance, {B, H, M}, "modulate_angles variance");
  Array out({B, H, M});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t m = 0; m < M; ++m) {
        const double base = theta.theta()(h, m);
        out(b, h, m) = cfg.disable_modulation
                           ? base
                           : base + modulation_shift(stats.variance(b, h, m), cfg);
      }
  return out;
}

Array split_heads(const Array& x, std::size_t heads) {
  require_rank(x, 3, "split_heads input");
  const std::size_t B = x.extent(0), N = x.extent(1), W = x.extent(2);
  if (heads == 0 || W % heads != 0) {
    throw ShapeError("split_heads: width " + std::to_string(W) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t D = W / heads;
  Array out({B, heads, N, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < N; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(x.raw() + (b * N + t) * W + h * D, D,
                    out.raw() + ((b * heads + h) * N + t) * D);
  return out;
}

Array merge_heads(const Array& x) {
  require_rank(x, 4, "merge_heads input");
  const std::size_t B = x.extent(0), H = x.extent(1), N = x.extent(2), D = x.extent(3);
  Array out({B, N, H * D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < N; ++t)
        std::copy_n(x.raw() + ((b * H + h) * N + t) * D, D,
                    out.raw() + (b * N + t) * H * D + h * D);
  return out;
}

namespace {

void check_input(const Array& x, const MirrorParams& params) {
  require_rank(x, 3, "feature map input");
  if (x.extent(2) != params.width()) {
    throw ShapeError("feature map input width " + std::to_string(x.extent(2)) +
                     " does not match H*D = " + std::to_string(params.width()));
  }
}

}  // namespace

FeatureMapTrace trace_feature_map(const Array& x, const MirrorParams& params,
                                  const ModulationConfig& cfg, const BlockStats* stats) {
  cfg.validate();
  check_input(x, params);
  FeatureMapTrace tr;
  tr.global = cfg.disable_global ? x : global_reflect(x, params.mirror);
  tr.heads = split_heads(tr.global, params.heads());
  tr.stats = stats ? *stats : block_variance(tr.heads);
  tr.angles = modulate_angles(params.angles, tr.stats, cfg);
  tr.preact = cfg.disable_reflection ? tr.heads : reflect_blocks(tr.heads, tr.angles);
  tr.features = tr.preact;
  for (double& v : tr.features.data()) v = v > 0.0 ? v : 0.0;
  return tr;
}

Array mirror_feature_map(const Array& x, const MirrorParams& params, const ModulationConfig& cfg) {
  return trace_feature_map(x, params, cfg).features;
}

ActivationMask mask_from_preactivation(const Array& preact) {
  ActivationMask mask{Array(preact.shape())};
  for (std::size_t i = 0; i < preact.size(); ++i) mask.bits[i] = preact[i] > 0.0 ? 1.0 : 0.0;
  return mask;
}

ActivationMask activation_mask(const Array& x, const MirrorParams& params,
                               const ModulationConfig& cfg) {
  return mask_from_preactivation(trace_feature_map(x, params, cfg).preact);
}

TokenFeatureMap::TokenFeatureMap(const MirrorParams& params, const ModulationConfig& cfg,
                                 double input_scale)
    : params_(params),
      cfg_(cfg),
      scale_(input_scale),
      heads_(params.heads()),
      head_dim_(params.head_dim()),
      width_(params.width()),
      unit_mirror_(params.mirror.unit()) {
  cfg_.validate();
}

void TokenFeatureMap::pre_reflect(std::span<const double> row, std::span<double> out) const {
  for (std::size_t i = 0; i < width_; ++i) out[i] = scale_ * row[i];
  if (!cfg_.disable_global) global_reflect_row(out, unit_mirror_.data());
}

BlockStats TokenFeatureMap::stats(std::span<const Array* const> inputs) const {
  if (inputs.empty()) throw std::invalid_argument("TokenFeatureMap::stats: no inputs");
  const std::size_t B = inputs[0]->extent(0);
  const std::size_t M = head_dim_ / 2;
  std::size_t L = 0;
  for (const Array* x : inputs) {
    check_input(*x, params_);
    if (x->extent(0) != B) throw ShapeError("TokenFeatureMap::stats: batch sizes differ");
    L += x->extent(1);
  }

  // Same accumulation order as block_variance, so both give identical bits.
  BlockStats stats{Array({B, heads_, M}), Array({B, heads_, M, 2})};
  Array row({width_});
  Array sums({heads_, M, 2});
  Array ss({heads_, M});
  for (std::size_t b = 0; b < B; ++b) {
    sums.fill(0.0);
    for (const Array* x : inputs) {
      const std::size_t N = x->extent(1);
      for (std::size_t t = 0; t < N; ++t) {
        pre_reflect(x->data().subspan((b * N + t) * width_, width_), row.data());
        for (std::size_t i = 0; i < width_; ++i) sums[i] += row[i];
      }
    }
    for (double& v : sums.data()) v /= static_cast<double>(L);
    ss.fill(0.0);
    for (const Array* x : inputs) {
      const std::size_t N = x->extent(1);
      for (std::size_t t = 0; t < N; ++t) {
        pre_reflect(x->data().subspan((b * N + t) * width_, width_), row.data());
        for (std::size_t j = 0; j < heads_ * M; ++j) {
          const double d1 = row[2 * j] - sums[2 * j], d2 = row[2 * j + 1] - sums[2 * j + 1];
          ss[j] += d1 * d1 + d2 * d2;
        }
      }
    }
    for (std::size_t j = 0; j < heads_ * M; ++j) {
      stats.variance[b * heads_ * M + j] = ss[j] / (2.0 * static_cast<double>(L));
      stats.mean[(b * heads_ * M + j) * 2] = sums[2 * j];
      stats.mean[(b * heads_ * M + j) * 2 + 1] = sums[2 * j + 1];
    }
  }
  return stats;
}

void TokenFeatureMap::prepare(const BlockStats& stats) {
  const Array angles = modulate_angles(params_.angles, stats, cfg_);
  trig_ = Array({angles.extent(0), heads_, head_dim_ / 2, 2});
  for (std::size_t i = 0; i < angles.size(); ++i) {
    trig_[2 * i] = std::cos(2.0 * angles[i]);
    trig_[2 * i + 1] = std::sin(2.0 * angles[i]);
  }
}

void TokenFeatureMap::map(std::span<const double> row, std::size_t b,
                          std::span<double> out) const {
  pre_reflect(row, out);
  if (!cfg_.disable_reflection) {
    const double* trig = trig_.raw() + b * width_;
    for (std::size_t j = 0; j < width_ / 2; ++j)
      reflect_pair(out[2 * j], out[2 * j + 1], trig[2 * j], trig[2 * j + 1]);
  }
  for (double& v : out) v = v > 0.0 ? v : 0.0;
}

}  // namespace mirrorla
