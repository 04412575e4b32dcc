#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mirrorla/gradcheck.hpp"
#include "mirrorla/numerics.hpp"

using namespace mirrorla;

namespace {

struct Setup {
  Array q, k, v;
  MirrorParams p;
  AttentionConfig cfg;
};

double min_abs(const Array& a) {
  double m = INFINITY;
  for (double x : a.data()) m = std::min(m, std::abs(x));
  return m;
}

// Away from ReLU kinks and nearly empty normalisers, where central
// differences are not meaningful.
bool well_conditioned(const Setup& s) {
  const AttentionTape t = attention_forward(s.q, s.k, s.v, s.p, s.cfg);
  if (min_abs(t.fq.preact) < 1e-3 || min_abs(t.fk.preact) < 1e-3) return false;
  for (double d : t.den.data())
    if (d - s.cfg.denom_eps < 1e-2) return false;
  if (!s.cfg.modulation.stop_grad_variance)
    for (const Array* v : {&t.fq.stats.variance, &t.fk.stats.variance})
      if (min_abs(*v) < 1e-2) return false;
  return true;
}

Setup small(Rng& rng, bool stop_grad) {
  while (true) {
    Setup s{rng.normal_array({1, 4, 8}), rng.normal_array({1, 5, 8}),
            rng.normal_array({1, 2, 5, 3}), MirrorParams::random(2, 4, rng), {}};
    s.cfg.modulation.stop_grad_variance = stop_grad;
    if (well_conditioned(s)) return s;
  }
}

}  // namespace

TEST_CASE("loss specs") {
  const Array out({2}, {3, -4});
  LossSpec sq;
  CHECK(sq.value(out) == 25.0);
  CHECK(sq.grad(out) == Array({2}, {6, -8}));
  LossSpec sum{LossKind::sum, {}};
  CHECK(sum.value(out) == -1.0);
  CHECK(sum.grad(out) == Array({2}, {1, 1}));
  LossSpec w{LossKind::weighted, Array({2}, {0.5, 2})};
  CHECK(w.value(out) == -6.5);
  CHECK(w.grad(out) == Array({2}, {0.5, 2}));
}

TEST_CASE("zero input gives zero input gradients") {
  Rng rng(50);
  const MirrorParams p = MirrorParams::random(2, 4, rng);
  const GradBundle g =
      backward_full(Array({1, 3, 8}), Array({1, 4, 8}), rng.normal_array({1, 2, 4, 2}), p, {});
  for (const Array* a : {&g.d_q, &g.d_k, &g.d_v, &g.d_theta, &g.d_uc})
    CHECK(max_abs(*a) == 0.0);
}

TEST_CASE("sum loss with one token has unit value gradient") {
  Rng rng(51);
  const MirrorParams p = MirrorParams::random(2, 4, rng);
  const Array x = rng.normal_array({1, 1, 8});
  const AttentionConfig cfg;
  const GradBundle g = backward_full(x, x, rng.normal_array({1, 2, 1, 3}), p, cfg,
                                     LossSpec{LossKind::sum, {}});
  const AttentionTape t = attention_forward(x, x, Array({1, 2, 1, 3}), p, cfg);
  for (std::size_t h = 0; h < 2; ++h) {
    const double den = t.den[h];
    REQUIRE(den > 1e3 * cfg.denom_eps);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(g.d_v.at(0, h, 0, c) - 1.0) <= 1e-5);
      CHECK(std::abs(g.d_v.at(0, h, 0, c) - (den - cfg.denom_eps) / den) <= 1e-14);
    }
  }
}

TEST_CASE("block reflection Jacobian is the reflection itself") {
  Rng rng(52);
  for (int t = 0; t < 50; ++t) {
    const Array x = rng.normal_array({1, 1, 1, 2});
    const Array ang = rng.uniform_array({1, 1}, -4, 4);
    const Array d_out = rng.normal_array({1, 1, 1, 2});
    const BlockReflectGrad g = reflect_blocks_backward(x, ang, d_out);
    const Array ref = matmul(householder_2d(ang[0]), d_out.reshaped({2, 1}));
    CHECK(std::abs(g.d_x[0] - ref[0]) <= 1e-12);
    CHECK(std::abs(g.d_x[1] - ref[1]) <= 1e-12);
    // d/dth of <d_out, H(th) x>.
    const double h = 1e-6;
    Array hi = ang, lo = ang;
    hi[0] += h;
    lo[0] -= h;
    auto f = [&](const Array& a) {
      const Array y = reflect_blocks(x, a);
      return y[0] * d_out[0] + y[1] * d_out[1];
    };
    CHECK(std::abs(g.d_angles[0] - (f(hi) - f(lo)) / (2 * h)) <= 1e-8);
  }
}

TEST_CASE("backward matches finite differences on a small instance") {
  for (bool stop_grad : {true, false}) {
    CAPTURE(stop_grad);
    Rng rng(53);
    const Setup s = small(rng, stop_grad);
    const LossSpec loss;
    const GradBundle g = backward_full(s.q, s.k, s.v, s.p, s.cfg, loss);
    const AttentionTape t = attention_forward(s.q, s.k, s.v, s.p, s.cfg);
    const BlockStats* fq = stop_grad ? &t.fq.stats : nullptr;
    const BlockStats* fk = stop_grad ? &t.fk.stats : nullptr;

    const Array nv = finite_diff(
        [&](const Array& v) { return attention_loss(s.q, s.k, v, s.p, s.cfg, loss, fq, fk); },
        s.v);
    CHECK(gradient_rel_error(g.d_v, nv) <= 1e-5);
    const Array nq = finite_diff(
        [&](const Array& q) { return attention_loss(q, s.k, s.v, s.p, s.cfg, loss, fq, fk); },
        s.q);
    CHECK(gradient_rel_error(g.d_q, nq) <= 1e-5);
    const Array nt = finite_diff(
        [&](const Array& th) {
          MirrorParams p = s.p;
          p.angles = MirrorAngles(th);
          return attention_loss(s.q, s.k, s.v, p, s.cfg, loss, fq, fk);
        },
        s.p.angles.theta());
    CHECK(gradient_rel_error(g.d_theta, nt) <= 1e-5);
  }
}

TEST_CASE("stop-gradient theta gradient equals the frozen-angle gradient") {
  // With the variance held constant the shift is an additive constant, so a
  // forward without modulation at the effective angles has the same slope.
  Rng rng(54);
  Setup s = small(rng, true);
  s.cfg.shared_stats = true;
  const GradBundle g = backward_full(s.q, s.k, s.v, s.p, s.cfg);
  const AttentionTape t = attention_forward(s.q, s.k, s.v, s.p, s.cfg);
  REQUIRE(t.fq.angles == t.fk.angles);
  AttentionConfig frozen = s.cfg;
  frozen.modulation.disable_modulation = true;
  const Array nt = finite_diff(
      [&](const Array& delta) {
        Array eff({2, 2});
        for (std::size_t i = 0; i < 4; ++i) eff[i] = t.fq.angles[i] + delta[i];
        MirrorParams p = s.p;
        p.angles = MirrorAngles(eff);
        return attention_loss(s.q, s.k, s.v, p, frozen, {});
      },
      Array({2, 2}));
  CHECK(gradient_rel_error(g.d_theta, nt) <= 1e-5);
}

TEST_CASE("directional derivatives") {
  Rng rng(55);
  for (int t = 0; t < 10; ++t) {
    const Setup s = small(rng, true);
    const GradBundle g = backward_full(s.q, s.k, s.v, s.p, s.cfg);
    const AttentionTape tape = attention_forward(s.q, s.k, s.v, s.p, s.cfg);
    Array dir = rng.normal_array(s.q.shape());
    const double n = norm2(dir.data());
    for (double& x : dir.data()) x /= n;
    const double h = 1e-5;
    Array qp = s.q, qm = s.q;
    for (std::size_t i = 0; i < dir.size(); ++i) {
      qp[i] += h * dir[i];
      qm[i] -= h * dir[i];
    }
    const double fd = (attention_loss(qp, s.k, s.v, s.p, s.cfg, {}, &tape.fq.stats, &tape.fk.stats) -
                       attention_loss(qm, s.k, s.v, s.p, s.cfg, {}, &tape.fq.stats, &tape.fk.stats)) /
                      (2 * h);
    const double an = dot(g.d_q.data(), dir.data());
    CHECK(std::abs(an - fd) / std::max(std::abs(fd), 1e-3) <= 1e-5);
  }
}

TEST_CASE("gradcheck suite passes with defaults") {
  GradcheckOptions opts;
  const GradcheckReport r = gradcheck_suite(opts);
  CHECK(r.passed());
  CHECK(r.groups.size() == 10);
  for (const GroupResult& g : r.groups) {
    CAPTURE(g.group);
    CHECK(g.worst_rel_error < 1e-5);
  }
}

TEST_CASE("gradcheck catches a corrupted theta gradient") {
  GradcheckOptions opts;
  opts.trials = 5;
  opts.theta_fault = 1e-3;
  const GradcheckReport r = gradcheck_suite(opts);
  CHECK_FALSE(r.passed());
  for (const GroupResult& g : r.groups) CHECK(g.passed == (g.group != "theta"));
  opts.trials = 0;
  CHECK_THROWS_AS(gradcheck_suite(opts), std::invalid_argument);
}
