#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mirrorla/featmap.hpp"
#include "mirrorla/numerics.hpp"

using namespace mirrorla;

namespace {

constexpr double kPi = std::numbers::pi;

// Straight-line scalar version of the whole map, written independently of the
// library pipeline. Returns [B, H, N, D] pre-activations.
Array scalar_preact(const Array& x, const MirrorParams& p, const ModulationConfig& cfg) {
  const std::size_t B = x.extent(0), N = x.extent(1), W = x.extent(2);
  const std::size_t H = p.heads(), D = p.head_dim(), M = D / 2;
  double un = 0;
  for (std::size_t i = 0; i < W; ++i) un += p.mirror.u()[i] * p.mirror.u()[i];
  un = std::sqrt(un);

  Array g({B, N, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      double proj = 0;
      for (std::size_t i = 0; i < W; ++i) proj += x.at(b, n, i) * p.mirror.u()[i] / un;
      for (std::size_t i = 0; i < W; ++i)
        g.at(b, n, i) = cfg.disable_global ? x.at(b, n, i)
                                           : x.at(b, n, i) - 2 * proj * p.mirror.u()[i] / un;
    }

  Array out({B, H, N, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t c = h * D + 2 * m;
        double m0 = 0, m1 = 0;
        for (std::size_t n = 0; n < N; ++n) {
          m0 += g.at(b, n, c);
          m1 += g.at(b, n, c + 1);
        }
        m0 /= N;
        m1 /= N;
        double var = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const double d0 = g.at(b, n, c) - m0, d1 = g.at(b, n, c + 1) - m1;
          var += d0 * d0 + d1 * d1;
        }
        var /= 2.0 * N;
        double th = p.angles.theta().at(h, m);
        if (!cfg.disable_modulation)
          th += cfg.alpha_max / (1 + std::exp(-cfg.lambda / (var + cfg.eps)));
        for (std::size_t n = 0; n < N; ++n) {
          const double a = g.at(b, n, c), bb = g.at(b, n, c + 1);
          out.at(b, h, n, 2 * m) = a * std::cos(2 * th) + bb * std::sin(2 * th);
          out.at(b, h, n, 2 * m + 1) = a * std::sin(2 * th) - bb * std::cos(2 * th);
        }
      }
  return out;
}

MirrorParams params_with(Array theta, Array u) {
  return MirrorParams(MirrorAngles(std::move(theta)), GlobalMirror(std::move(u)));
}

}  // namespace

TEST_CASE("modulation config validation") {
  ModulationConfig cfg;
  CHECK(cfg.lambda == 1.0);
  CHECK(cfg.eps == 1e-6);
  CHECK(cfg.alpha_max == kPi / 2);
  CHECK(cfg.stop_grad_variance);
  CHECK_NOTHROW(cfg.validate());
  cfg.alpha_max = 4.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.eps = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.lambda = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("block_variance examples") {
  const Array same({1, 1, 3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
  const BlockStats s = block_variance(same);
  CHECK(s.variance == Array({1, 1, 2}));
  CHECK(s.mean.at(0, 0, 1, 0) == 3.0);

  const BlockStats two = block_variance(Array({1, 1, 2, 2}, {0, 0, 2, 0}));
  CHECK(two.mean.at(0, 0, 0, 0) == 1.0);
  CHECK(two.mean.at(0, 0, 0, 1) == 0.0);
  CHECK(two.variance[0] == 0.5);

  CHECK(block_variance(Array({1, 1, 1, 2}, {5, -3})).variance[0] == 0.0);
  CHECK_THROWS_AS(block_variance(Array({1, 1, 2, 3})), ShapeError);
}

TEST_CASE("block_variance matches a two-pass loop") {
  Rng rng(20);
  const Array x = rng.normal_array({2, 3, 7, 6}, 2.0);
  const BlockStats s = block_variance(x);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t m = 0; m < 3; ++m) {
        double mu[2] = {0, 0};
        for (std::size_t n = 0; n < 7; ++n)
          for (std::size_t c = 0; c < 2; ++c) mu[c] += x.at(b, h, n, 2 * m + c) / 7;
        double v = 0;
        for (std::size_t n = 0; n < 7; ++n)
          for (std::size_t c = 0; c < 2; ++c) v += std::pow(x.at(b, h, n, 2 * m + c) - mu[c], 2);
        v /= 14;
        CHECK(std::abs(s.variance.at(b, h, m) - v) <= 1e-12);
        CHECK(std::abs(s.mean.at(b, h, m, 0) - mu[0]) <= 1e-12);
        CHECK(s.variance.at(b, h, m) >= 0.0);
      }
}

TEST_CASE("block_variance over concatenated parts") {
  Rng rng(21);
  const Array a = rng.normal_array({1, 2, 3, 4}), b = rng.normal_array({1, 2, 5, 4});
  Array cat({1, 2, 8, 4});
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t d = 0; d < 4; ++d)
        cat.at(0, h, n, d) = n < 3 ? a.at(0, h, n, d) : b.at(0, h, n - 3, d);
  const Array* parts[] = {&a, &b};
  CHECK(max_abs_diff(block_variance(parts).variance, block_variance(cat).variance) <= 1e-12);
}

TEST_CASE("modulation shift values") {
  const ModulationConfig def;
  CHECK(modulation_shift(0.0, def) >= 0.999999 * def.alpha_max);
  CHECK(std::abs(modulation_shift(1e300, def) - 0.5 * def.alpha_max) <= 1e-12);
  ModulationConfig tiny;
  tiny.eps = 1e-300;  // stands in for eps = 0
  const double expected = 1.0 / (1.0 + std::exp(-1.0)) * kPi / 2;
  CHECK(std::abs(modulation_shift(1.0, tiny) - expected) <= 1e-12);
  // sigmoid(1) * pi / 2 = 1.1483441...
  CHECK(std::abs(expected - 1.1483441) <= 1e-7);
  CHECK(std::abs(sigmoid(1.0) - 0.7310585786300049) <= 1e-15);
  CHECK(sigmoid(-1e6) == 0.0);
  CHECK(sigmoid(1e6) == 1.0);
}

TEST_CASE("modulation is monotone and saturates") {
  const ModulationConfig def;
  Rng rng(22);
  std::vector<double> grid(200);
  for (double& v : grid) v = std::exp(rng.uniform(-12, 6));
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  for (std::size_t i = 1; i < grid.size(); ++i) {
    // Strict in exact arithmetic; the shift can round to the same double once
    // the sigmoid saturates.
    CHECK(modulation_shift(grid[i], def) <= modulation_shift(grid[i - 1], def));
    CHECK(modulation_shift_slope(grid[i], def) <= 0.0);
  }
  CHECK(modulation_shift(1.0, def) < modulation_shift(0.5, def));
  for (double v : {0.0, 1e-10, 1e-8}) CHECK(modulation_shift(v, def) >= 0.999 * def.alpha_max);
  for (double v : {1e6, 1e8}) CHECK(modulation_shift(v, def) <= 0.501 * def.alpha_max);
}

TEST_CASE("modulation slope matches finite differences") {
  const ModulationConfig def;
  for (double v : {0.1, 0.5, 1.0, 3.0}) {
    const double h = 1e-6;
    const double fd = (modulation_shift(v + h, def) - modulation_shift(v - h, def)) / (2 * h);
    CHECK(std::abs(modulation_shift_slope(v, def) - fd) <= 1e-7);
  }
}

TEST_CASE("modulate_angles broadcasts the base angles") {
  const MirrorAngles th(Array({1, 2}, {0.1, 0.2}));
  const BlockStats st{Array({2, 1, 2}, {0.0, 1.0, 1e9, 0.0}), Array({2, 1, 2, 2})};
  ModulationConfig cfg;
  const Array a = modulate_angles(th, st, cfg);
  CHECK(a.shape() == Shape{2, 1, 2});
  CHECK(std::abs(a.at(1, 0, 0) - (0.1 + modulation_shift(1e9, cfg))) <= 1e-15);
  cfg.disable_modulation = true;
  const Array b = modulate_angles(th, st, cfg);
  CHECK(b == Array({2, 1, 2}, {0.1, 0.2, 0.1, 0.2}));
}

TEST_CASE("split and merge heads") {
  Rng rng(23);
  const Array x = rng.normal_array({2, 3, 8});
  const Array s = split_heads(x, 2);
  CHECK(s.shape() == Shape{2, 2, 3, 4});
  CHECK(s.at(1, 1, 2, 3) == x.at(1, 2, 7));
  CHECK(merge_heads(s) == x);
  CHECK_THROWS_AS(split_heads(x, 3), ShapeError);
}

TEST_CASE("feature map examples") {
  Rng rng(24);
  const MirrorParams p = MirrorParams::random(2, 4, rng);
  const ModulationConfig cfg;
  const FeatureMapTrace z = trace_feature_map(Array({1, 5, 8}), p, cfg);
  CHECK(z.features == Array({1, 2, 5, 4}));
  CHECK(z.stats.variance == Array({1, 2, 2}));
  for (std::size_t i = 0; i < z.angles.size(); ++i) {
    const double base = p.angles.theta()[i];
    CHECK(z.angles[i] - base >= 0.999999 * cfg.alpha_max);
  }

  ModulationConfig bypass;
  bypass.disable_global = true;
  bypass.disable_modulation = true;
  const MirrorParams q = params_with(Array({1, 1}, {kPi / 4}), Array({2}, {1.0, 0.0}));
  const Array phi = mirror_feature_map(Array({1, 1, 2}, {1, -1}), q, bypass);
  CHECK(std::abs(phi[0]) == 0.0);
  CHECK(std::abs(phi[1] - 1.0) <= 1e-15);
  CHECK(activation_mask(Array({1, 1, 2}, {1, -1}), q, bypass).bits == Array({1, 1, 1, 2}, {0, 1}));

  CHECK_THROWS_AS(mirror_feature_map(Array({1, 5, 6}), p, cfg), ShapeError);
}

TEST_CASE("feature map equals the scalar pipeline") {
  Rng rng(25);
  for (int t = 0; t < 40; ++t) {
    const std::size_t B = 1 + rng.below(2), N = 1 + rng.below(6), H = 1 + rng.below(3),
                      D = 2 * (1 + rng.below(4));
    const MirrorParams p = MirrorParams::random(H, D, rng);
    ModulationConfig cfg;
    cfg.lambda = rng.uniform(0.1, 3);
    cfg.disable_global = t % 3 == 1;
    cfg.disable_modulation = t % 4 == 2;
    const Array x = rng.normal_array({B, N, H * D});
    const FeatureMapTrace tr = trace_feature_map(x, p, cfg);
    const Array ref = scalar_preact(x, p, cfg);
    CHECK(max_abs_diff(tr.preact, ref) <= 1e-12);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      REQUIRE(tr.features[i] >= 0.0);
      CHECK(std::abs(tr.features[i] - std::max(ref[i], 0.0)) <= 1e-12);
    }
  }
}

TEST_CASE("activation mask is the strict sign of the output") {
  Rng rng(26);
  const MirrorParams p = MirrorParams::random(2, 6, rng);
  const Array x = rng.normal_array({2, 9, 12});
  const ModulationConfig cfg;
  const ActivationMask m = activation_mask(x, p, cfg);
  const Array phi = mirror_feature_map(x, p, cfg);
  for (std::size_t i = 0; i < phi.size(); ++i) CHECK(m.bits[i] == (phi[i] > 0.0 ? 1.0 : 0.0));

  const ActivationMask neg = mask_from_preactivation(Array({1, 1, 2, 2}, {-1, -2, -0.5, 0.0}));
  CHECK(neg.bits == Array({1, 1, 2, 2}));
}

TEST_CASE("pre-activation keeps token inner products") {
  Rng rng(27);
  for (int t = 0; t < 20; ++t) {
    const MirrorParams p = MirrorParams::random(3, 4, rng);
    const Array x = rng.normal_array({1, 6, 12});
    const FeatureMapTrace tr = trace_feature_map(x, p, {});
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        double before = 0, after = 0;
        for (std::size_t c = 0; c < 12; ++c) before += x.at(0, i, c) * x.at(0, j, c);
        for (std::size_t h = 0; h < 3; ++h)
          for (std::size_t d = 0; d < 4; ++d)
            after += tr.preact.at(0, h, i, d) * tr.preact.at(0, h, j, d);
        CHECK(std::abs(before - after) <= 1e-10);
      }
  }
}

TEST_CASE("batch permutation permutes the output") {
  Rng rng(28);
  const MirrorParams p = MirrorParams::random(2, 4, rng);
  const Array x = rng.normal_array({3, 5, 8});
  Array perm({3, 5, 8});
  const std::size_t order[] = {2, 0, 1};
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 40; ++i) perm[b * 40 + i] = x[order[b] * 40 + i];
  const Array a = mirror_feature_map(x, p, {}), c = mirror_feature_map(perm, p, {});
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 40; ++i) CHECK(c[b * 40 + i] == a[order[b] * 40 + i]);
}

TEST_CASE("token-at-a-time map matches the tensor map") {
  Rng rng(29);
  const MirrorParams p = MirrorParams::random(2, 4, rng);
  const Array x = rng.normal_array({2, 7, 8});
  const ModulationConfig cfg;
  const Array phi = mirror_feature_map(x, p, cfg);
  TokenFeatureMap tm(p, cfg);
  const Array* in[] = {&x};
  const BlockStats st = tm.stats(in);
  CHECK(st.variance == trace_feature_map(x, p, cfg).stats.variance);
  tm.prepare(st);
  Array row({8});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t n = 0; n < 7; ++n) {
      tm.map(x.data().subspan((b * 7 + n) * 8, 8), b, row.data());
      for (std::size_t h = 0; h < 2; ++h)
        for (std::size_t d = 0; d < 4; ++d)
          CHECK(std::abs(row[h * 4 + d] - phi.at(b, h, n, d)) <= 1e-14);
    }
}
