#include "mirrorla/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mirrorla/numerics.hpp"
#include "mirrorla/rng.hpp"

namespace mirrorla {

double LossSpec::value(const Array& out) const {
  double s = 0.0;
  switch (kind) {
    case LossKind::sum_of_squares:
      for (double v : out.data()) s += v * v;
      break;
    case LossKind::sum:
      for (double v : out.data()) s += v;
      break;
    case LossKind::weighted:
      require_shape(weights, out.shape(), "LossSpec weights");
      for (std::size_t i = 0; i < out.size(); ++i) s += weights[i] * out[i];
      break;
  }
  return s;
}

Array LossSpec::grad(const Array& out) const {
  Array g(out.shape());
  switch (kind) {
    case LossKind::sum_of_squares:
      for (std::size_t i = 0; i < out.size(); ++i) g[i] = 2.0 * out[i];
      break;
    case LossKind::sum:
      g.fill(1.0);
      break;
    case LossKind::weighted:
      require_shape(weights, out.shape(), "LossSpec weights");
      g = weights;
      break;
  }
  return g;
}

namespace {

Array scaled(const Array& x, double s) {
  Array out = x;
  if (s != 1.0)
    for (double& v : out.data()) v *= s;
  return out;
}

}  // namespace

AttentionTape attention_forward(const Array& q, const Array& k, const Array& v,
                                const MirrorParams& params, const AttentionConfig& cfg,
                                const BlockStats* frozen_q, const BlockStats* frozen_k) {
  cfg.validate();
  require_rank(v, 4, "attention_forward v");
  AttentionTape tape;
  tape.scale = cfg.input_scale(params.head_dim());
  tape.q_in = scaled(q, tape.scale);
  tape.k_in = scaled(k, tape.scale);
  tape.v = v;

  const ModulationConfig& mod = cfg.modulation;
  if (cfg.shared_stats) {
    BlockStats shared;
    if (frozen_q) {
      shared = *frozen_q;
    } else {
      const Array hq = split_heads(mod.disable_global ? tape.q_in
                                                      : global_reflect(tape.q_in, params.mirror),
                                   params.heads());
      const Array hk = split_heads(mod.disable_global ? tape.k_in
                                                      : global_reflect(tape.k_in, params.mirror),
                                   params.heads());
      const Array* parts[] = {&hq, &hk};
      shared = block_variance(parts);
    }
    tape.fq = trace_feature_map(tape.q_in, params, mod, &shared);
    tape.fk = trace_feature_map(tape.k_in, params, mod, &shared);
  } else {
    tape.fq = trace_feature_map(tape.q_in, params, mod, frozen_q);
    tape.fk = trace_feature_map(tape.k_in, params, mod, frozen_k);
  }

  const std::size_t B = q.extent(0), H = params.heads(), D = params.head_dim();
  const std::size_t Nq = q.extent(1), Nk = k.extent(1), Dv = v.extent(3);
  require_shape(v, {B, H, Nk, Dv}, "attention_forward v");

  tape.kv = Array({B, H, D, Dv});
  tape.z = Array({B, H, D});
  tape.den = Array({B, H, Nq});
  tape.out = Array({B, H, Nq, Dv});
  for (std::size_t bh = 0; bh < B * H; ++bh) {
    const double* fk = tape.fk.features.raw() + bh * Nk * D;
    const double* fq = tape.fq.features.raw() + bh * Nq * D;
    const double* vb = v.raw() + bh * Nk * Dv;
    double* kv = tape.kv.raw() + bh * D * Dv;
    double* z = tape.z.raw() + bh * D;
    for (std::size_t i = 0; i < Nk; ++i)
      for (std::size_t d = 0; d < D; ++d) {
        z[d] += fk[i * D + d];
        for (std::size_t c = 0; c < Dv; ++c) kv[d * Dv + c] += fk[i * D + d] * vb[i * Dv + c];
      }
    for (std::size_t t = 0; t < Nq; ++t) {
      double den = 0.0;
      double* ot = tape.out.raw() + (bh * Nq + t) * Dv;
      for (std::size_t d = 0; d < D; ++d) {
        const double p = fq[t * D + d];
        den += p * z[d];
        for (std::size_t c = 0; c < Dv; ++c) ot[c] += p * kv[d * Dv + c];
      }
      den += cfg.denom_eps;
      for (std::size_t c = 0; c < Dv; ++c) ot[c] /= den;
      tape.den[bh * Nq + t] = den;
    }
  }
  return tape;
}

BlockReflectGrad reflect_blocks_backward(const Array& x, const Array& angles,
                                         const Array& d_out) {
  require_rank(x, 4, "reflect_blocks_backward x");
  require_shape(d_out, x.shape(), "reflect_blocks_backward d_out");
  const std::size_t B = x.extent(0), H = x.extent(1), N = x.extent(2), D = x.extent(3);
  const std::size_t M = D / 2;
  const bool batched = angles.rank() == 3;
  require_shape(angles, batched ? Shape{B, H, M} : Shape{H, M}, "reflect_blocks_backward angles");

  BlockReflectGrad g{Array(x.shape()), Array(angles.shape())};
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t ai = batched ? (b * H + h) * M + m : h * M + m;
        const double c = std::cos(2.0 * angles[ai]), s = std::sin(2.0 * angles[ai]);
        double d_angle = 0.0;
        for (std::size_t t = 0; t < N; ++t) {
          const std::size_t off = ((b * H + h) * N + t) * D + 2 * m;
          const double y1 = x[off], y2 = x[off + 1];
          const double g1 = d_out[off], g2 = d_out[off + 1];
          // The 2x2 reflection is symmetric, so its transpose is itself.
          g.d_x[off] = g1 * c + g2 * s;
          g.d_x[off + 1] = g1 * s - g2 * c;
          d_angle += g1 * (-2.0 * y1 * s + 2.0 * y2 * c) + g2 * (2.0 * y1 * c + 2.0 * y2 * s);
        }
        g.d_angles[ai] += d_angle;
      }
  return g;
}

namespace {

struct MapGrad {
  Array d_heads;
  Array d_variance;  // [B, H, M]; zero unless the variance is differentiated
};

MapGrad feature_map_backward(const FeatureMapTrace& tr, const Array& d_features,
                             const ModulationConfig& cfg, Array& d_theta) {
  Array d_pre = d_features;
  for (std::size_t i = 0; i < d_pre.size(); ++i)
    if (!(tr.preact[i] > 0.0)) d_pre[i] = 0.0;

  MapGrad g{Array(), Array(tr.stats.variance.shape())};
  if (cfg.disable_reflection) {
    g.d_heads = std::move(d_pre);
    return g;
  }
  BlockReflectGrad rg = reflect_blocks_backward(tr.heads, tr.angles, d_pre);
  g.d_heads = std::move(rg.d_x);

  const std::size_t B = tr.angles.extent(0), HM = tr.angles.extent(1) * tr.angles.extent(2);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < HM; ++j) d_theta[j] += rg.d_angles[b * HM + j];

  if (!cfg.stop_grad_variance && !cfg.disable_modulation) {
    for (std::size_t i = 0; i < g.d_variance.size(); ++i) {
      g.d_variance[i] = rg.d_angles[i] * modulation_shift_slope(tr.stats.variance[i], cfg);
    }
  }
  return g;
}

// d sigma^2 / d y_tm = (y_tm - mean_m) / L over the token-concatenated parts.
void variance_backward(std::span<const Array* const> heads, std::span<Array* const> d_heads,
                       const BlockStats& stats, const Array& d_variance) {
  std::size_t L = 0;
  for (const Array* h : heads) L += h->extent(2);
  for (std::size_t p = 0; p < heads.size(); ++p) {
    const Array& y = *heads[p];
    Array& dy = *d_heads[p];
    const std::size_t B = y.extent(0), H = y.extent(1), N = y.extent(2), D = y.extent(3);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t m = 0; m < D / 2; ++m) {
          const double dv = d_variance(b, h, m) / static_cast<double>(L);
          if (dv == 0.0) continue;
          for (std::size_t t = 0; t < N; ++t) {
            const std::size_t off = ((b * H + h) * N + t) * D + 2 * m;
            dy[off] += dv * (y[off] - stats.mean(b, h, m, 0));
            dy[off + 1] += dv * (y[off + 1] - stats.mean(b, h, m, 1));
          }
        }
  }
}

// Back through y = x - 2 u <x, u> / |u|^2 row by row.
Array global_backward(const Array& x, const Array& d_y, const GlobalMirror& mirror, Array& d_u) {
  const std::size_t W = mirror.width();
  const Array& u = mirror.u();
  const double nn = dot(u.data(), u.data());
  const Array unit = mirror.unit();
  Array d_x = d_y;
  for (std::size_t off = 0; off < x.size(); off += W) {
    const auto xr = x.data().subspan(off, W);
    const auto gr = d_y.data().subspan(off, W);
    global_reflect_row(d_x.data().subspan(off, W), unit.data());
    const double a = dot(xr, u.data());
    const double gu = dot(gr, u.data());
    for (std::size_t i = 0; i < W; ++i) {
      d_u[i] -= 2.0 * (a / nn * gr[i] + gu / nn * xr[i] - 2.0 * gu * a / (nn * nn) * u[i]);
    }
  }
  return d_x;
}

}  // namespace

GradBundle attention_backward(const AttentionTape& tape, const Array& d_out,
                              const MirrorParams& params, const AttentionConfig& cfg) {
  require_shape(d_out, tape.out.shape(), "attention_backward d_out");
  const std::size_t B = tape.out.extent(0), H = tape.out.extent(1), Nq = tape.out.extent(2);
  const std::size_t Dv = tape.out.extent(3), D = params.head_dim(), Nk = tape.v.extent(2);

  GradBundle g;
  g.d_theta = Array(params.angles.theta().shape());
  g.d_uc = Array(params.mirror.u().shape());
  g.d_v = Array(tape.v.shape());
  Array d_fq(tape.fq.features.shape());
  Array d_fk(tape.fk.features.shape());

  std::vector<double> d_kv(D * Dv), d_z(D), d_num(Dv);
  for (std::size_t bh = 0; bh < B * H; ++bh) {
    const double* fq = tape.fq.features.raw() + bh * Nq * D;
    const double* fk = tape.fk.features.raw() + bh * Nk * D;
    const double* kv = tape.kv.raw() + bh * D * Dv;
    const double* z = tape.z.raw() + bh * D;
    const double* vb = tape.v.raw() + bh * Nk * Dv;
    std::fill(d_kv.begin(), d_kv.end(), 0.0);
    std::fill(d_z.begin(), d_z.end(), 0.0);
    for (std::size_t t = 0; t < Nq; ++t) {
      const double den = tape.den[bh * Nq + t];
      const double* go = d_out.raw() + (bh * Nq + t) * Dv;
      const double* ot = tape.out.raw() + (bh * Nq + t) * Dv;
      double d_den = 0.0;
      for (std::size_t c = 0; c < Dv; ++c) {
        d_num[c] = go[c] / den;
        d_den -= go[c] * ot[c] / den;
      }
      double* dq = d_fq.raw() + (bh * Nq + t) * D;
      for (std::size_t d = 0; d < D; ++d) {
        double acc = z[d] * d_den;
        for (std::size_t c = 0; c < Dv; ++c) acc += kv[d * Dv + c] * d_num[c];
        dq[d] = acc;
        const double p = fq[t * D + d];
        d_z[d] += p * d_den;
        for (std::size_t c = 0; c < Dv; ++c) d_kv[d * Dv + c] += p * d_num[c];
      }
    }
    for (std::size_t i = 0; i < Nk; ++i) {
      double* dk = d_fk.raw() + (bh * Nk + i) * D;
      double* dv = g.d_v.raw() + (bh * Nk + i) * Dv;
      for (std::size_t d = 0; d < D; ++d) {
        double acc = d_z[d];
        for (std::size_t c = 0; c < Dv; ++c) {
          acc += d_kv[d * Dv + c] * vb[i * Dv + c];
          dv[c] += fk[i * D + d] * d_kv[d * Dv + c];
        }
        dk[d] = acc;
      }
    }
  }

  const ModulationConfig& mod = cfg.modulation;
  MapGrad gq = feature_map_backward(tape.fq, d_fq, mod, g.d_theta);
  MapGrad gk = feature_map_backward(tape.fk, d_fk, mod, g.d_theta);
  if (!mod.stop_grad_variance && !mod.disable_modulation) {
    if (cfg.shared_stats) {
      Array d_var = gq.d_variance;
      for (std::size_t i = 0; i < d_var.size(); ++i) d_var[i] += gk.d_variance[i];
      const Array* heads[] = {&tape.fq.heads, &tape.fk.heads};
      Array* d_heads[] = {&gq.d_heads, &gk.d_heads};
      variance_backward(heads, d_heads, tape.fq.stats, d_var);
    } else {
      const Array* hq[] = {&tape.fq.heads};
      Array* dq[] = {&gq.d_heads};
      variance_backward(hq, dq, tape.fq.stats, gq.d_variance);
      const Array* hk[] = {&tape.fk.heads};
      Array* dk[] = {&gk.d_heads};
      variance_backward(hk, dk, tape.fk.stats, gk.d_variance);
    }
  }

  Array d_gq = merge_heads(gq.d_heads);
  Array d_gk = merge_heads(gk.d_heads);
  if (!mod.disable_global) {
    d_gq = global_backward(tape.q_in, d_gq, params.mirror, g.d_uc);
    d_gk = global_backward(tape.k_in, d_gk, params.mirror, g.d_uc);
  }
  for (double& x : d_gq.data()) x *= tape.scale;
  for (double& x : d_gk.data()) x *= tape.scale;
  g.d_q = std::move(d_gq);
  g.d_k = std::move(d_gk);
  return g;
}

GradBundle backward_full(const Array& q, const Array& k, const Array& v,
                         const MirrorParams& params, const AttentionConfig& cfg,
                         const LossSpec& loss) {
  const AttentionTape tape = attention_forward(q, k, v, params, cfg);
  GradBundle g = attention_backward(tape, loss.grad(tape.out), params, cfg);
  g.loss = loss.value(tape.out);
  for (const Array* a : {&g.d_theta, &g.d_uc, &g.d_q, &g.d_k, &g.d_v}) {
    if (!all_finite(*a)) throw std::domain_error("backward_full: non-finite gradient");
  }
  if (!std::isfinite(g.loss)) throw std::domain_error("backward_full: non-finite loss");
  return g;
}

double attention_loss(const Array& q, const Array& k, const Array& v, const MirrorParams& params,
                      const AttentionConfig& cfg, const LossSpec& loss,
                      const BlockStats* frozen_q, const BlockStats* frozen_k) {
  return loss.value(attention_forward(q, k, v, params, cfg, frozen_q, frozen_k).out);
}

bool GradcheckReport::passed() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupResult& g) { return g.passed; });
}

double gradient_rel_error(const Array& analytic, const Array& numeric) {
  return max_abs_diff(analytic, numeric) / std::max(max_abs(numeric), 1e-3);
}

namespace {

struct Trial {
  Array q, k, v;
  MirrorParams params;
  AttentionConfig cfg;
};

double min_abs(const Array& a) {
  double m = INFINITY;
  for (double x : a.data()) m = std::min(m, std::abs(x));
  return m;
}

bool acceptable(const Trial& tr, const GradcheckOptions& opts) {
  const AttentionTape tape = attention_forward(tr.q, tr.k, tr.v, tr.params, tr.cfg);
  if (min_abs(tape.fq.preact) < opts.kink_margin) return false;
  if (min_abs(tape.fk.preact) < opts.kink_margin) return false;
  // A row whose features are almost all truncated has a normaliser close to
  // the guard and the loss is nearly discontinuous there.
  for (double d : tape.den.data()) {
    const double raw = d - tr.cfg.denom_eps;
    if (d != tr.cfg.denom_eps && raw < opts.min_denominator) return false;
  }
  if (!tr.cfg.modulation.stop_grad_variance) {
    for (const Array* var : {&tape.fq.stats.variance, &tape.fk.stats.variance})
      for (double s : var->data())
        if (s < opts.min_variance) return false;
  }
  return true;
}

}  // namespace

GradcheckReport gradcheck_suite(const GradcheckOptions& opts) {
  if (opts.trials < 1) throw std::invalid_argument("gradcheck_suite: trials must be >= 1");
  GradcheckReport report;
  report.trials = opts.trials;
  report.tolerance = opts.tolerance;
  const LossSpec loss;

  for (bool stop_grad : {true, false}) {
    const char* names[] = {"theta", "u_c", "q", "k", "v"};
    double worst[5] = {0, 0, 0, 0, 0};
    Rng rng(opts.seed * 2 + (stop_grad ? 0 : 1));

    for (std::size_t trial = 0; trial < opts.trials; ++trial) {
      Trial tr;
      while (true) {
        const std::size_t B = 1 + rng.below(2), H = 1 + rng.below(2), D = 2 * (1 + rng.below(2));
        const std::size_t Nq = 2 + rng.below(4), Nk = 2 + rng.below(4), Dv = 1 + rng.below(3);
        tr.cfg = AttentionConfig{};
        tr.cfg.modulation.stop_grad_variance = stop_grad;
        tr.cfg.shared_stats = rng.below(2) == 1;
        tr.cfg.scale_qk = rng.below(2) == 1;
        tr.params = MirrorParams::random(H, D, rng);
        tr.q = rng.normal_array({B, Nq, H * D});
        tr.k = rng.normal_array({B, Nk, H * D});
        tr.v = rng.normal_array({B, H, Nk, Dv});
        if (acceptable(tr, opts)) break;
        ++report.resamples;
      }

      const AttentionTape base = attention_forward(tr.q, tr.k, tr.v, tr.params, tr.cfg);
      GradBundle g = attention_backward(base, loss.grad(base.out), tr.params, tr.cfg);
      for (double& x : g.d_theta.data()) x += opts.theta_fault;

      // With the stop-gradient the oracle must see the statistics as constants.
      const BlockStats* fq = stop_grad ? &base.fq.stats : nullptr;
      const BlockStats* fk = stop_grad ? &base.fk.stats : nullptr;
      auto eval = [&](const Array& q, const Array& k, const Array& v, const MirrorParams& p) {
        return attention_loss(q, k, v, p, tr.cfg, loss, fq, fk);
      };

      const Array n_theta = finite_diff(
          [&](const Array& th) {
            MirrorParams p = tr.params;
            p.angles = MirrorAngles(th);
            return eval(tr.q, tr.k, tr.v, p);
          },
          tr.params.angles.theta(), opts.step);
      const Array n_u = finite_diff(
          [&](const Array& u) {
            MirrorParams p = tr.params;
            p.mirror.set(u);
            return eval(tr.q, tr.k, tr.v, p);
          },
          tr.params.mirror.u(), opts.step);
      const Array n_q = finite_diff(
          [&](const Array& q) { return eval(q, tr.k, tr.v, tr.params); }, tr.q, opts.step);
      const Array n_k = finite_diff(
          [&](const Array& k) { return eval(tr.q, k, tr.v, tr.params); }, tr.k, opts.step);
      const Array n_v = finite_diff(
          [&](const Array& v) { return eval(tr.q, tr.k, v, tr.params); }, tr.v, opts.step);

      const double errs[5] = {gradient_rel_error(g.d_theta, n_theta),
                              gradient_rel_error(g.d_uc, n_u), gradient_rel_error(g.d_q, n_q),
                              gradient_rel_error(g.d_k, n_k), gradient_rel_error(g.d_v, n_v)};
      for (int i = 0; i < 5; ++i) worst[i] = std::max(worst[i], errs[i]);
    }

    for (int i = 0; i < 5; ++i) {
      report.groups.push_back(
          {names[i], stop_grad, worst[i], worst[i] < opts.tolerance});
    }
  }
  return report;
}

}  // namespace mirrorla
