#include "mirrorla/suites.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mirrorla/attention.hpp"
#include "mirrorla/diversity.hpp"
#include "mirrorla/numerics.hpp"
#include "mirrorla/reflect.hpp"
#include "mirrorla/rng.hpp"

namespace mirrorla {

namespace {

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

SuiteResult finish(std::string name, std::size_t cases, double worst, double tol) {
  return {std::move(name), cases, worst, tol, worst <= tol};
}

}  // namespace

SuiteResult equivalence_suite(std::uint64_t seed, std::size_t configs, double tolerance) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t c = 0; c < configs; ++c) {
    const std::size_t B = pick(rng, 1, 2), H = pick(rng, 1, 4);
    const std::size_t D = 2 * pick(rng, 1, 8), Dv = pick(rng, 1, 16);
    const std::size_t Nq = pick(rng, 1, 64), Nk = pick(rng, 1, 64);
    AttentionConfig cfg;
    cfg.scale_qk = rng.below(2) == 0;
    cfg.shared_stats = rng.below(2) == 0;
    cfg.modulation.disable_global = rng.below(4) == 0;
    cfg.modulation.disable_modulation = rng.below(4) == 0;
    const MirrorParams params = MirrorParams::random(H, D, rng);
    const Array q = rng.normal_array({B, Nq, H * D});
    const Array k = rng.normal_array({B, Nk, H * D});
    const Array v = rng.normal_array({B, H, Nk, Dv});
    const AttentionOutput a = linear_attention_direct(q, k, v, params, cfg);
    const AttentionOutput b = linear_attention_reordered(q, k, v, params, cfg);
    worst = std::max(worst, max_abs_diff(a.out, b.out));
  }
  return finish("equivalence", configs, worst, tolerance);
}

std::vector<SuiteResult> isometry_suite(std::uint64_t seed, std::size_t triples) {
  Rng rng(seed);
  double worst_ip = 0.0, worst_inv = 0.0, worst_2d = 0.0;
  for (std::size_t t = 0; t < triples; ++t) {
    const std::size_t D = 2 * pick(rng, 1, 16);
    const Array x = rng.normal_array({1, 1, 2, D});
    const Array angles = rng.uniform_array({1, D / 2}, -std::numbers::pi, std::numbers::pi);
    const Array y = reflect_blocks(x, angles);
    const auto xq = x.data().subspan(0, D), xk = x.data().subspan(D, D);
    const auto yq = y.data().subspan(0, D), yk = y.data().subspan(D, D);
    worst_ip = std::max(worst_ip, std::abs(dot(yq, yk) - dot(xq, xk)));
    worst_inv = std::max(worst_inv, max_abs_diff(reflect_blocks(y, angles), x));

    const double th = rng.uniform(-std::numbers::pi, std::numbers::pi);
    // The closed form reflects across the line at angle th, whose normal is
    // (-sin th, cos th).
    const double u[2] = {-std::sin(th), std::cos(th)};
    worst_2d = std::max(worst_2d, max_abs_diff(householder_2d(th), householder_matrix(u)));
  }
  return {finish("isometry_inner_product", triples, worst_ip, 1e-10),
          finish("isometry_involution", triples, worst_inv, 1e-12),
          finish("isometry_closed_form", triples, worst_2d, 1e-12)};
}

SuiteResult spectrum_suite(std::uint64_t seed, std::size_t instances, double tolerance) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t H = pick(rng, 1, 4);
    const std::size_t D = 2 * pick(rng, 1, 32 / H);
    const std::size_t W = H * D;
    const std::size_t L = W + 1 + pick(rng, 0, 16);
    // Correlated samples: x = z A with a random mixing matrix.
    const Array z = rng.normal_array({L, W});
    const Array a = rng.normal_array({W, W}, 1.0 / std::sqrt(static_cast<double>(W)));
    const Array x = matmul(z, a);
    const GlobalMirror mirror(rng.normal_array({W}));
    worst = std::max(worst, covariance_mixing(x, mirror, H, D).spectrum_error);
  }
  return finish("spectrum", instances, worst, tolerance);
}

SuiteResult mixing_example() {
  const Array sigma({4, 4}, {1, 0, 0, 0,  //
                             0, 2, 0, 0,  //
                             0, 0, 3, 0,  //
                             0, 0, 0, 4});
  const GlobalMirror mirror(Array({4}, {1, 1, 1, 1}));
  // Sigma' = Sigma - 2 u u^T Sigma - 2 Sigma u u^T + 4 (u^T Sigma u) u u^T with
  // u = (1/2, 1/2, 1/2, 1/2).
  const Array expected({4, 4}, {2.5, 1.0, 0.5, 0.0,   //
                                1.0, 2.5, 0.0, -0.5,  //
                                0.5, 0.0, 2.5, -1.0,  //
                                0.0, -0.5, -1.0, 2.5});
  const Array got = reflect_covariance(sigma, mirror);
  double dev = max_abs_diff(got, expected);
  dev = std::max(dev, std::abs(cross_head_mass(sigma, 2, 2)));
  dev = std::max(dev, std::abs(cross_head_mass(got, 2, 2) - 1.0));
  return finish("mixing_example", 1, dev, 0.0);
}

}  // namespace mirrorla
