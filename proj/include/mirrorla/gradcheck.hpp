#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mirrorla/array.hpp"
#include "mirrorla/attention.hpp"
#include "mirrorla/featmap.hpp"

namespace mirrorla {

enum class LossKind { sum_of_squares, sum, weighted };

// Scalar reduction of the attention output used as the training/check loss.
struct LossSpec {
  LossKind kind = LossKind::sum_of_squares;
  Array weights;  // same shape as the output; only read by LossKind::weighted

  double value(const Array& out) const;
  Array grad(const Array& out) const;
};

struct GradBundle {
  Array d_theta;  // [H, M]
  Array d_uc;     // [H * D]
  Array d_q;      // [B, N_q, H * D]
  Array d_k;      // [B, N_k, H * D]
  Array d_v;      // [B, H, N_k, Dv]
  double loss = 0.0;
};

// Forward state of linear attention kept for the backward pass.
struct AttentionTape {
  double scale = 1.0;
  FeatureMapTrace fq, fk;
  Array q_in, k_in;  // scaled inputs
  Array v;
  Array kv;   // [B, H, D, Dv] sum_i phi(k_i)^T v_i
  Array z;    // [B, H, D]
  Array den;  // [B, H, N_q] guarded normaliser
  Array out;  // [B, H, N_q, Dv]
};

// Linear attention forward (reordered form) that records its intermediates.
// frozen_q / frozen_k replace the block statistics of q / k; with shared
// statistics only frozen_q is read.
AttentionTape attention_forward(const Array& q, const Array& k, const Array& v,
                                const MirrorParams& params, const AttentionConfig& cfg,
                                const BlockStats* frozen_q = nullptr,
                                const BlockStats* frozen_k = nullptr);

// Reverse pass for an upstream gradient d_out of the attention output.
GradBundle attention_backward(const AttentionTape& tape, const Array& d_out,
                              const MirrorParams& params, const AttentionConfig& cfg);

GradBundle backward_full(const Array& q, const Array& k, const Array& v,
                         const MirrorParams& params, const AttentionConfig& cfg,
                         const LossSpec& loss = {});

struct BlockReflectGrad {
  Array d_x;       // [B, H, N, D]
  Array d_angles;  // same shape as the angles argument
};

// Gradient of reflect_blocks(x, angles) contracted with d_out.
BlockReflectGrad reflect_blocks_backward(const Array& x, const Array& angles,
                                         const Array& d_out);

// Loss value as seen by the finite-difference oracle. With
// stop_grad_variance set, the statistics are frozen at (frozen_q, frozen_k).
double attention_loss(const Array& q, const Array& k, const Array& v, const MirrorParams& params,
                      const AttentionConfig& cfg, const LossSpec& loss,
                      const BlockStats* frozen_q = nullptr, const BlockStats* frozen_k = nullptr);

struct GradcheckOptions {
  std::uint64_t seed = 7;
  std::size_t trials = 50;
  double tolerance = 1e-5;
  double step = 1e-5;
  // Trials are resampled while any pre-ReLU value is closer than this to 0.
  double kink_margin = 1e-4;
  // Smallest block variance accepted when the variance is differentiated.
  double min_variance = 1e-2;
  // Rows with a nonzero unguarded normaliser below this are resampled too.
  double min_denominator = 1e-2;
  // Added to every analytic d_theta entry; used to check that faults are caught.
  double theta_fault = 0.0;
};

struct GroupResult {
  std::string group;  // theta, u_c, q, k, v
  bool stop_grad = true;
  double worst_rel_error = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GroupResult> groups;
  std::size_t trials = 0;
  std::size_t resamples = 0;
  double tolerance = 0.0;

  bool passed() const;
};

// Normwise relative error max|a - f| / max(max|f|, 1e-3).
double gradient_rel_error(const Array& analytic, const Array& numeric);

// Compares backward_full against central finite differences on `trials`
// random small configurations for each stop-gradient setting.
GradcheckReport gradcheck_suite(const GradcheckOptions& opts);

}  // namespace mirrorla
