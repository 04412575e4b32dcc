#pragma once

#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "mirrorla/array.hpp"
#include "mirrorla/reflect.hpp"
#include "mirrorla/rng.hpp"

namespace mirrorla {

struct ModulationConfig {
  double lambda = 1.0;
  double eps = 1e-6;
  double alpha_max = std::numbers::pi / 2;
  // Treat the block variance as a constant when differentiating.
  bool stop_grad_variance = true;

  // Ablation switches. disable_reflection drops the block-wise reflection,
  // which together with disable_global gives a plain ReLU feature map.
  bool disable_global = false;
  bool disable_modulation = false;
  bool disable_reflection = false;

  void validate() const;
};

struct MirrorParams {
  MirrorAngles angles;  // [H, D/2]
  GlobalMirror mirror;  // [H * D]

  MirrorParams() = default;
  MirrorParams(MirrorAngles a, GlobalMirror m);

  std::size_t heads() const { return angles.heads(); }
  std::size_t head_dim() const { return 2 * angles.blocks(); }
  std::size_t width() const { return heads() * head_dim(); }

  // Standard-normal angles and mirror direction.
  static MirrorParams random(std::size_t heads, std::size_t head_dim, Rng& rng);
};

struct BlockStats {
  Array variance;  // [B, H, M]
  Array mean;      // [B, H, M, 2]
};

// Per (batch, head, block): mean of the 2D block over tokens and
// sigma^2 = 1/(2L) sum_t |x_tm - mean_m|^2 with L tokens.
BlockStats block_variance(const Array& x);

// Statistics of the token-axis concatenation of several [B, H, N_i, D] tensors.
BlockStats block_variance(std::span<const Array* const> parts);

double sigmoid(double z);

// sigmoid(lambda / (variance + eps)) * alpha_max.
double modulation_shift(double variance, const ModulationConfig& cfg);
// d shift / d variance.
double modulation_shift_slope(double variance, const ModulationConfig& cfg);

// Effective angles [B, H, M]: theta + shift(variance), or theta broadcast over
// the batch when modulation is disabled.
Array modulate_angles(const MirrorAngles& theta, const BlockStats& stats,
                      const ModulationConfig& cfg);

// [B, N, H*D] <-> [B, H, N, D].
Array split_heads(const Array& x, std::size_t heads);
Array merge_heads(const Array& x);

// Every intermediate of the reflecting feature map, in pipeline order.
struct FeatureMapTrace {
  Array global;    // [B, N, H*D] after the cross-head reflection
  Array heads;     // [B, H, N, D]
  BlockStats stats;
  Array angles;    // [B, H, M] effective angles
  Array preact;    // [B, H, N, D] after block reflection
  Array features;  // [B, H, N, D] after ReLU
};

// Runs the full map on x [B, N, H*D]. If `stats` is given it replaces the
// statistics of x (frozen or shared statistics).
FeatureMapTrace trace_feature_map(const Array& x, const MirrorParams& params,
                                  const ModulationConfig& cfg, const BlockStats* stats = nullptr);

Array mirror_feature_map(const Array& x, const MirrorParams& params, const ModulationConfig& cfg);

// s = 1 where the pre-ReLU reflected feature is strictly positive.
struct ActivationMask {
  Array bits;  // [B, H, N, D], entries in {0, 1}
};

ActivationMask mask_from_preactivation(const Array& preact);
ActivationMask activation_mask(const Array& x, const MirrorParams& params,
                               const ModulationConfig& cfg);

// Token-at-a-time evaluation of the same map. Nothing it allocates grows with
// the number of tokens, which is what the linear attention path relies on.
class TokenFeatureMap {
 public:
  TokenFeatureMap(const MirrorParams& params, const ModulationConfig& cfg,
                  double input_scale = 1.0);

  // Block statistics of inputs [B, N_i, H*D], tokens concatenated.
  BlockStats stats(std::span<const Array* const> inputs) const;

  // Precomputes cos/sin of twice the effective angles for every (b, h, m).
  void prepare(const BlockStats& stats);

  std::size_t width() const { return width_; }

  // Writes the features of one input row of batch element b into out; both
  // spans have length H*D.
  void map(std::span<const double> row, std::size_t b, std::span<double> out) const;

 private:
  void pre_reflect(std::span<const double> row, std::span<double> out) const;

  const MirrorParams& params_;
  ModulationConfig cfg_;
  double scale_;
  std::size_t heads_, head_dim_, width_;
  Array unit_mirror_;
  Array trig_;  // [B, H, M, 2]
};

}  // namespace mirrorla
