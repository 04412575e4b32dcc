#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mirrorla/array.hpp"
#include "mirrorla/featmap.hpp"

namespace mirrorla {

struct DisagreementStats {
  double mean_hamming = 0.0;           // E_{t != t'} |s_t - s_t'|_0
  std::size_t distinct_patterns = 0;   // unique mask rows
  double pairwise_dist_mean = 0.0;     // E_{t != t'} |x_t - x_t'|_2, 0 without tokens
};

// Exact averages over all ordered token pairs t != t' of a [N, D] mask.
DisagreementStats mask_disagreement(const Array& mask_rows);
// Same, plus the mean pairwise distance of the matching tokens [N, F].
DisagreementStats mask_disagreement(const Array& mask_rows, const Array& tokens);

// The [N, D] slice of one (batch, head) of an activation mask.
Array mask_rows(const ActivationMask& mask, std::size_t b, std::size_t h);

struct CollapseSetting {
  DisagreementStats unmodulated;
  DisagreementStats modulated;
};

struct CollapseResult {
  std::uint64_t seed = 0;
  double spread = 0.0;
  double variance = 0.0;        // block variance of the cluster
  double shift_fraction = 0.0;  // measured shift / alpha_max
  // Base angle puts the reflected cluster mean deep in the negative quadrant.
  CollapseSetting deep_margin;
  // Base angle puts the modulated image of the mean on a ReLU boundary.
  CollapseSetting boundary;
  std::size_t attempts = 1;

  bool collapse_without_modulation() const;
  bool split_with_modulation() const;
  bool passed() const { return collapse_without_modulation() && split_with_modulation(); }
  // mean_hamming / pairwise_dist_mean of the modulated boundary case.
  double disagreement_ratio() const;
};

// Builds a single-block token cluster x_t = mean + delta_t with |delta_t| <=
// spread and evaluates the two constructions. Throws std::invalid_argument
// unless 0 < spread <= 1e-3.
CollapseResult collapse_construction(std::uint64_t seed, double spread,
                                     const ModulationConfig& cfg = {}, std::size_t tokens = 64);

void write_disagreement_csv(std::ostream& os, std::span<const CollapseResult> results);

struct MixingStats {
  double offdiag_mass_before = 0.0;  // Frobenius norm of the cross-head blocks
  double offdiag_mass_after = 0.0;
  double spectrum_error = 0.0;       // max |lambda_i - lambda'_i|, sorted
};

// Frobenius norm of all (h, h') blocks with h != h' of an [HD x HD] matrix.
double cross_head_mass(const Array& sigma, std::size_t heads, std::size_t head_dim);

// H_c^T Sigma H_c.
Array reflect_covariance(const Array& sigma, const GlobalMirror& mirror);

// Sample covariance of x [L, H*D] before and after reflecting every row.
MixingStats covariance_mixing(const Array& x, const GlobalMirror& mirror, std::size_t heads,
                              std::size_t head_dim);

enum class TopologyMode {
  vanilla,      // phi(x) = x
  truncate,     // phi(x) = ReLU(x)
  mirror,       // reflections only, no truncation
  mirror_relu,  // full reflecting feature map
};

const char* to_string(TopologyMode mode);
TopologyMode parse_topology_mode(const std::string& name);

struct TopologyResult {
  TopologyMode mode = TopologyMode::vanilla;
  Array raw_kernel;  // [N_q, N_k] phi(Q) phi(K)^T summed over heads
  Array kernel;      // row softmax of raw_kernel
  Array points;      // [N_q, 2] PCA projection of the kernel rows
  std::size_t distinct_rows = 0;
  bool degenerate = false;  // raw kernel identically zero
};

// Rows equal within tol (max-abs) count once.
std::size_t count_distinct_rows(const Array& m, double tol = 1e-9);

// q [1, N_q, H*D], k [1, N_k, H*D]. The mirror modes use block statistics
// shared between q and k so both sides see the same reflection.
TopologyResult topology_export(const Array& q, const Array& k, const MirrorParams& params,
                               const ModulationConfig& cfg, TopologyMode mode);

// Header `point_id,pc1,pc2,mode`.
void write_topology_csv(std::ostream& os, std::span<const TopologyResult> results);

// Token clusters in the negative orthant: `clusters` centres with all
// coordinates in [-2, -1] and isotropic noise of the given scale.
Array clustered_tokens(std::uint64_t seed, std::size_t tokens, std::size_t width,
                       std::size_t clusters = 4, double noise = 0.2);

}  // namespace mirrorla
