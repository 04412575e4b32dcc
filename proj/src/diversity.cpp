#include "mirrorla/diversity.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <set>
#include <stdexcept>

#include "mirrorla/numerics.hpp"
#include "mirrorla/rng.hpp"

namespace mirrorla {

DisagreementStats mask_disagreement(const Array& mask_rows) {
  require_rank(mask_rows, 2, "mask_disagreement");
  const std::size_t N = mask_rows.extent(0), D = mask_rows.extent(1);
  if (N < 2) throw ShapeError("mask_disagreement: need at least two tokens");

  DisagreementStats st;
  std::set<std::vector<bool>> patterns;
  std::size_t total = 0;
  for (std::size_t t = 0; t < N; ++t) {
    std::vector<bool> row(D);
    for (std::size_t d = 0; d < D; ++d) row[d] = mask_rows[t * D + d] != 0.0;
    patterns.insert(row);
    for (std::size_t u = t + 1; u < N; ++u)
      for (std::size_t d = 0; d < D; ++d)
        total += (mask_rows[t * D + d] != 0.0) != (mask_rows[u * D + d] != 0.0);
  }
  const double pairs = static_cast<double>(N * (N - 1) / 2);
  st.mean_hamming = static_cast<double>(total) / pairs;
  st.distinct_patterns = patterns.size();
  return st;
}

DisagreementStats mask_disagreement(const Array& mask_rows, const Array& tokens) {
  DisagreementStats st = mask_disagreement(mask_rows);
  require_rank(tokens, 2, "mask_disagreement tokens");
  const std::size_t N = tokens.extent(0), F = tokens.extent(1);
  if (N != mask_rows.extent(0)) throw ShapeError("mask_disagreement: token count mismatch");
  double total = 0.0;
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t u = t + 1; u < N; ++u) {
      double s = 0.0;
      for (std::size_t f = 0; f < F; ++f) {
        const double d = tokens[t * F + f] - tokens[u * F + f];
        s += d * d;
      }
      total += std::sqrt(s);
    }
  st.pairwise_dist_mean = total / static_cast<double>(N * (N - 1) / 2);
  return st;
}

Array mask_rows(const ActivationMask& mask, std::size_t b, std::size_t h) {
  const Array& bits = mask.bits;
  require_rank(bits, 4, "mask_rows");
  const std::size_t H = bits.extent(1), N = bits.extent(2), D = bits.extent(3);
  if (b >= bits.extent(0) || h >= H) throw std::out_of_range("mask_rows: (b, h) out of range");
  return Array({N, D}, bits.data().subspan((b * H + h) * N * D, N * D));
}

bool CollapseResult::collapse_without_modulation() const {
  return deep_margin.unmodulated.distinct_patterns == 1 &&
         deep_margin.unmodulated.mean_hamming == 0.0;
}

bool CollapseResult::split_with_modulation() const {
  return boundary.modulated.distinct_patterns >= 2;
}

double CollapseResult::disagreement_ratio() const {
  const DisagreementStats& s = boundary.modulated;
  return s.pairwise_dist_mean > 0.0 ? s.mean_hamming / s.pairwise_dist_mean : 0.0;
}

namespace {

DisagreementStats block_disagreement(const Array& tokens, double theta,
                                     const ModulationConfig& cfg) {
  MirrorParams params(MirrorAngles(Array({1, 1}, {theta})), GlobalMirror(Array({2}, {1.0, 0.0})));
  const ActivationMask mask = activation_mask(tokens, params, cfg);
  const std::size_t N = tokens.extent(1);
  return mask_disagreement(mask_rows(mask, 0, 0), tokens.reshaped({N, 2}));
}

// Angle whose reflection sends direction phi to direction target.
double mirror_angle_for(double phi, double target) { return 0.5 * (phi + target); }

}  // namespace

CollapseResult collapse_construction(std::uint64_t seed, double spread,
                                     const ModulationConfig& cfg, std::size_t tokens) {
  if (!(spread > 0.0 && spread <= 1e-3)) {
    throw std::invalid_argument("collapse_construction: spread must lie in (0, 1e-3]");
  }
  if (tokens < 2) throw std::invalid_argument("collapse_construction: need >= 2 tokens");
  cfg.validate();

  ModulationConfig mod = cfg;
  mod.disable_global = true;
  mod.disable_reflection = false;
  mod.disable_modulation = false;
  ModulationConfig fixed = mod;
  fixed.disable_modulation = true;

  constexpr std::size_t kMaxAttempts = 16;
  Rng rng(seed);
  for (std::size_t attempt = 1; attempt <= kMaxAttempts; ++attempt) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double radius = rng.uniform(0.5, 2.0);
    Array x({1, tokens, 2});
    for (std::size_t t = 0; t < tokens; ++t) {
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double r = spread * std::sqrt(rng.uniform());
      x(0, t, 0) = radius * std::cos(phi) + r * std::cos(a);
      x(0, t, 1) = radius * std::sin(phi) + r * std::sin(a);
    }

    CollapseResult res;
    res.seed = seed;
    res.spread = spread;
    res.attempts = attempt;
    const BlockStats stats = block_variance(x.reshaped({1, 1, tokens, 2}));
    res.variance = stats.variance[0];
    const double shift = modulation_shift(res.variance, mod);
    res.shift_fraction = shift / mod.alpha_max;

    // Deep margin: the mean lands on the negative diagonal, so every
    // coordinate of every token sits at least radius/sqrt(2) - spread below 0.
    const double theta_deep = mirror_angle_for(phi, 1.25 * std::numbers::pi);
    const Array h = householder_2d(theta_deep);
    const double mx = radius * std::cos(phi), my = radius * std::sin(phi);
    const double img1 = h[0] * mx + h[1] * my, img2 = h[2] * mx + h[3] * my;
    if (!(std::max(img1, img2) < -10.0 * spread)) continue;
    res.deep_margin.unmodulated = block_disagreement(x, theta_deep, fixed);
    res.deep_margin.modulated = block_disagreement(x, theta_deep, mod);

    // Boundary: after the measured shift the mean lands on the positive x2
    // axis, i.e. exactly on the x1 = 0 boundary of the ReLU.
    const double theta_boundary = mirror_angle_for(phi, 0.5 * std::numbers::pi) - shift;
    res.boundary.unmodulated = block_disagreement(x, theta_boundary, fixed);
    res.boundary.modulated = block_disagreement(x, theta_boundary, mod);

    if (res.split_with_modulation()) return res;
  }
  throw std::runtime_error("collapse_construction: no feasible instance for seed " +
                           std::to_string(seed));
}

void write_disagreement_csv(std::ostream& os, std::span<const CollapseResult> results) {
  os << "seed,setting,mean_hamming,distinct,dist_mean\n";
  os << std::setprecision(17);
  auto row = [&](std::uint64_t seed, const char* setting, const DisagreementStats& s) {
    os << seed << ',' << setting << ',' << s.mean_hamming << ',' << s.distinct_patterns << ','
       << s.pairwise_dist_mean << '\n';
  };
  for (const CollapseResult& r : results) {
    row(r.seed, "deep_unmodulated", r.deep_margin.unmodulated);
    row(r.seed, "deep_modulated", r.deep_margin.modulated);
    row(r.seed, "boundary_unmodulated", r.boundary.unmodulated);
    row(r.seed, "boundary_modulated", r.boundary.modulated);
  }
}

double cross_head_mass(const Array& sigma, std::size_t heads, std::size_t head_dim) {
  const std::size_t W = heads * head_dim;
  require_shape(sigma, {W, W}, "cross_head_mass");
  double s = 0.0;
  for (std::size_t i = 0; i < W; ++i)
    for (std::size_t j = 0; j < W; ++j)
      if (i / head_dim != j / head_dim) s += sigma[i * W + j] * sigma[i * W + j];
  return std::sqrt(s);
}

Array reflect_covariance(const Array& sigma, const GlobalMirror& mirror) {
  const Array h = householder_matrix(mirror.u().data());
  return matmul(transpose(h), matmul(sigma, h));
}

MixingStats covariance_mixing(const Array& x, const GlobalMirror& mirror, std::size_t heads,
                              std::size_t head_dim) {
  require_rank(x, 2, "covariance_mixing");
  if (x.extent(1) != heads * head_dim || mirror.width() != heads * head_dim) {
    throw ShapeError("covariance_mixing: width must equal H*D");
  }
  const Array before = covariance(x);
  const Array after = covariance(global_reflect(x, mirror));
  const std::vector<double> eb = sym_eigenvalues(before);
  const std::vector<double> ea = sym_eigenvalues(after);
  MixingStats st;
  st.offdiag_mass_before = cross_head_mass(before, heads, head_dim);
  st.offdiag_mass_after = cross_head_mass(after, heads, head_dim);
  for (std::size_t i = 0; i < eb.size(); ++i)
    st.spectrum_error = std::max(st.spectrum_error, std::abs(eb[i] - ea[i]));
  return st;
}

const char* to_string(TopologyMode mode) {
  switch (mode) {
    case TopologyMode::vanilla: return "vanilla";
    case TopologyMode::truncate: return "truncate";
    case TopologyMode::mirror: return "mirror";
    case TopologyMode::mirror_relu: return "mirror_relu";
  }
  return "?";
}

TopologyMode parse_topology_mode(const std::string& name) {
  for (TopologyMode m : {TopologyMode::vanilla, TopologyMode::truncate, TopologyMode::mirror,
                         TopologyMode::mirror_relu}) {
    if (name == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown topology mode '" + name + "'");
}

std::size_t count_distinct_rows(const Array& m, double tol) {
  require_rank(m, 2, "count_distinct_rows");
  const std::size_t R = m.extent(0), C = m.extent(1);
  std::vector<std::size_t> reps;
  for (std::size_t r = 0; r < R; ++r) {
    bool seen = false;
    for (std::size_t p : reps) {
      double diff = 0.0;
      for (std::size_t c = 0; c < C; ++c) diff = std::max(diff, std::abs(m[r * C + c] - m[p * C + c]));
      if (diff <= tol) {
        seen = true;
        break;
      }
    }
    if (!seen) reps.push_back(r);
  }
  return reps.size();
}

TopologyResult topology_export(const Array& q, const Array& k, const MirrorParams& params,
                               const ModulationConfig& cfg, TopologyMode mode) {
  require_rank(q, 3, "topology_export q");
  require_rank(k, 3, "topology_export k");
  if (q.extent(0) != 1 || k.extent(0) != 1) throw ShapeError("topology_export: batch must be 1");
  const std::size_t Nq = q.extent(1), Nk = k.extent(1), W = q.extent(2);
  if (k.extent(2) != W) throw ShapeError("topology_export: q and k widths differ");
  if (Nq < 2 || Nk < 2) throw ShapeError("topology_export: need at least two tokens");

  Array fq = q.reshaped({Nq, W});
  Array fk = k.reshaped({Nk, W});
  switch (mode) {
    case TopologyMode::vanilla:
      break;
    case TopologyMode::truncate:
      for (double& v : fq.data()) v = std::max(v, 0.0);
      for (double& v : fk.data()) v = std::max(v, 0.0);
      break;
    case TopologyMode::mirror:
    case TopologyMode::mirror_relu: {
      FeatureMapTrace tq = trace_feature_map(q, params, cfg);
      FeatureMapTrace tk = trace_feature_map(k, params, cfg);
      const Array* parts[] = {&tq.heads, &tk.heads};
      const BlockStats shared = block_variance(parts);
      tq = trace_feature_map(q, params, cfg, &shared);
      tk = trace_feature_map(k, params, cfg, &shared);
      const bool relu = mode == TopologyMode::mirror_relu;
      fq = merge_heads(relu ? tq.features : tq.preact).reshaped({Nq, W});
      fk = merge_heads(relu ? tk.features : tk.preact).reshaped({Nk, W});
      break;
    }
  }

  TopologyResult res;
  res.mode = mode;
  res.raw_kernel = matmul(fq, transpose(fk));
  res.degenerate = max_abs(res.raw_kernel) == 0.0;
  res.kernel = res.raw_kernel;
  for (std::size_t t = 0; t < Nq; ++t) {
    double mx = -INFINITY;
    for (std::size_t i = 0; i < Nk; ++i) mx = std::max(mx, res.kernel(t, i));
    double sum = 0.0;
    for (std::size_t i = 0; i < Nk; ++i) sum += (res.kernel(t, i) = std::exp(res.kernel(t, i) - mx));
    for (std::size_t i = 0; i < Nk; ++i) res.kernel(t, i) /= sum;
  }
  res.distinct_rows = count_distinct_rows(res.kernel);
  res.points = pca_project(res.kernel, 2).projections;
  return res;
}

void write_topology_csv(std::ostream& os, std::span<const TopologyResult> results) {
  os << "point_id,pc1,pc2,mode\n";
  os << std::setprecision(17);
  for (const TopologyResult& r : results) {
    const std::size_t n = r.points.extent(0);
    for (std::size_t i = 0; i < n; ++i) {
      os << i << ',' << r.points(i, 0) << ',' << r.points(i, 1) << ',' << to_string(r.mode)
         << '\n';
    }
  }
}

Array clustered_tokens(std::uint64_t seed, std::size_t tokens, std::size_t width,
                       std::size_t clusters, double noise) {
  Rng rng(seed);
  const Array centres = rng.uniform_array({clusters, width}, -2.0, -1.0);
  Array x({1, tokens, width});
  for (std::size_t t = 0; t < tokens; ++t) {
    const std::size_t c = t % clusters;
    for (std::size_t f = 0; f < width; ++f) x(0, t, f) = centres(c, f) + noise * rng.normal();
  }
  return x;
}

}  // namespace mirrorla
