#pragma once

#include <span>

#include "mirrorla/array.hpp"
#include "mirrorla/featmap.hpp"

namespace mirrorla {

struct AttentionConfig {
  // Added to every linear-attention normaliser.
  double denom_eps = 1e-6;
  // Scale q and k by D^(-1/4) each before the feature map so that their inner
  // product carries the 1/sqrt(D) factor of softmax attention.
  bool scale_qk = true;
  // Compute the block statistics once over the concatenated q and k tokens
  // instead of separately per tensor.
  bool shared_stats = false;
  ModulationConfig modulation;

  void validate() const;
  double input_scale(std::size_t head_dim) const;
};

struct AttentionOutput {
  Array out;    // [B, H, N, Dv]
  Array denom;  // [B, H, N], guarded normaliser (softmax: row sum of exponentials)
  // Rows whose unguarded normaliser was exactly zero (fully truncated features).
  std::size_t zero_denominators = 0;
};

// Eq.-1 style reference: q, k [B, H, N, D], v [B, H, N_k, Dv]. Scores are
// always scaled by 1/sqrt(D); rows are max-shifted before exponentiation.
AttentionOutput softmax_attention(const Array& q, const Array& k, const Array& v);

// Linear attention with the reflecting feature map. q [B, N_q, H*D],
// k [B, N_k, H*D] and v [B, H, N_k, Dv].
//
// The direct form materialises the N_q x N_k kernel and is the oracle for the
// reordered form, which accumulates S = sum_i phi(k_i)^T v_i and
// z = sum_i phi(k_i) once and then streams the queries.
AttentionOutput linear_attention_direct(const Array& q, const Array& k, const Array& v,
                                        const MirrorParams& params, const AttentionConfig& cfg);
AttentionOutput linear_attention_reordered(const Array& q, const Array& k, const Array& v,
                                           const MirrorParams& params,
                                           const AttentionConfig& cfg);

// Feature maps of q and k as the linear-attention paths see them (scaling and
// statistics policy applied).
struct FeaturePair {
  FeatureMapTrace q;
  FeatureMapTrace k;
};
FeaturePair attention_features(const Array& q, const Array& k, const MirrorParams& params,
                               const AttentionConfig& cfg);

// sum_m <phi_q[2m:2m+2], phi_k[2m:2m+2]> over already-mapped features.
double blockwise_kernel(std::span<const double> phi_q, std::span<const double> phi_k);

// Kernel of raw single-head vectors q, k [D] with effective angles [D/2]:
// block reflection and ReLU, then the blockwise sum.
double blockwise_kernel(std::span<const double> q, std::span<const double> k,
                        std::span<const double> angles);

}  // namespace mirrorla
