#include "mirrorla/attention.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mirrorla {

void AttentionConfig::validate() const {
  if (!(denom_eps > 0.0)) throw std::invalid_argument("AttentionConfig: denom_eps must be > 0");
  modulation.validate();
}

double AttentionConfig::input_scale(std::size_t head_dim) const {
  return scale_qk ? std::pow(static_cast<double>(head_dim), -0.25) : 1.0;
}

namespace {

// Two doubles processed elementwise; each lane keeps its own summation order.
typedef double Lanes __attribute__((vector_size(16)));

inline Lanes load_lanes(const double* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store_lanes(double* p, Lanes v) { std::memcpy(p, &v, sizeof v); }

constexpr std::size_t kPanel = 8;
constexpr std::size_t kPanelBlock = 64;
constexpr std::size_t kQueryTile = 32;
constexpr std::size_t kKeyTile = 128;

// Scaled scores of one or two queries against key panels [p0, p1). Each dot
// product is accumulated in order of d.
inline void score_panels(const double* qa, const double* qb, const double* packed,
                         std::size_t D, std::size_t p0, std::size_t p1, double scale,
                         double* sa, double* sb, double& max_a, double& max_b) {
  const Lanes sc = {scale, scale};
  for (std::size_t p = p0; p < p1; ++p) {
    const double* kp = packed + p * D * kPanel;
    Lanes a0{}, a1{}, a2{}, a3{}, b0{}, b1{}, b2{}, b3{};
    if (qb) {
      for (std::size_t d = 0; d < D; ++d) {
        const double* kd = kp + d * kPanel;
        const Lanes k0 = load_lanes(kd), k1 = load_lanes(kd + 2);
        const Lanes k2 = load_lanes(kd + 4), k3 = load_lanes(kd + 6);
        const Lanes qa_d = {qa[d], qa[d]}, qb_d = {qb[d], qb[d]};
        a0 += qa_d * k0;
        a1 += qa_d * k1;
        a2 += qa_d * k2;
        a3 += qa_d * k3;
        b0 += qb_d * k0;
        b1 += qb_d * k1;
        b2 += qb_d * k2;
        b3 += qb_d * k3;
      }
    } else {
      for (std::size_t d = 0; d < D; ++d) {
        const double* kd = kp + d * kPanel;
        const Lanes qa_d = {qa[d], qa[d]};
        a0 += qa_d * load_lanes(kd);
        a1 += qa_d * load_lanes(kd + 2);
        a2 += qa_d * load_lanes(kd + 4);
        a3 += qa_d * load_lanes(kd + 6);
      }
    }
    auto finish = [&](Lanes& x0, Lanes& x1, Lanes& x2, Lanes& x3, double* out, double& mx) {
      x0 *= sc;
      x1 *= sc;
      x2 *= sc;
      x3 *= sc;
      Lanes m = x0 > x1 ? x0 : x1;
      const Lanes m2 = x2 > x3 ? x2 : x3;
      m = m > m2 ? m : m2;
      mx = std::max(mx, std::max(m[0], m[1]));
      double* o = out + p * kPanel;
      store_lanes(o, x0);
      store_lanes(o + 2, x1);
      store_lanes(o + 4, x2);
      store_lanes(o + 6, x3);
    };
    finish(a0, a1, a2, a3, sa, max_a);
    if (qb) finish(b0, b1, b2, b3, sb, max_b);
  }
}

}  // namespace

AttentionOutput softmax_attention(const Array& q, const Array& k, const Array& v) {
  require_rank(q, 4, "softmax_attention q");
  require_rank(k, 4, "softmax_attention k");
  require_rank(v, 4, "softmax_attention v");
  const std::size_t B = q.extent(0), H = q.extent(1), Nq = q.extent(2), D = q.extent(3);
  const std::size_t Nk = k.extent(2), Dv = v.extent(3);
  require_shape(k, {B, H, Nk, D}, "softmax_attention k");
  require_shape(v, {B, H, Nk, Dv}, "softmax_attention v");

  AttentionOutput res{Array({B, H, Nq, Dv}), Array({B, H, Nq}), 0};
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  // Full Nq x Nk score matrix, reused across (b, h). Keys are packed into
  // panels of kPanel rows stored d-major so the score loop vectorises over
  // keys; every dot product is still summed in order of d.
  const std::size_t panels = Nk / kPanel;
  Array scores({Nq, Nk});
  Array packed({std::max<std::size_t>(panels, 1) * D * kPanel});
  double* s = scores.raw();
  double inv_sum[kQueryTile];
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const double* qb = q.raw() + (b * H + h) * Nq * D;
      const double* kb = k.raw() + (b * H + h) * Nk * D;
      const double* vb = v.raw() + (b * H + h) * Nk * Dv;
      double* ob = res.out.raw() + (b * H + h) * Nq * Dv;
      double* pk = packed.raw();
      for (std::size_t p = 0; p < panels; ++p)
        for (std::size_t d = 0; d < D; ++d)
          for (std::size_t j = 0; j < kPanel; ++j)
            pk[(p * D + d) * kPanel + j] = kb[(p * kPanel + j) * D + d];

      for (std::size_t t0 = 0; t0 < Nq; t0 += kQueryTile) {
        const std::size_t t1 = std::min(Nq, t0 + kQueryTile);
        double row_max[kQueryTile];
        std::fill(row_max, row_max + kQueryTile, -std::numeric_limits<double>::infinity());
        // Blocks of panels small enough to stay in cache while the whole
        // query tile passes over them; queries go in pairs to share loads.
        for (std::size_t p0 = 0; p0 < panels; p0 += kPanelBlock) {
          const std::size_t p1 = std::min(panels, p0 + kPanelBlock);
          std::size_t t = t0;
          for (; t + 2 <= t1; t += 2) {
            score_panels(qb + t * D, qb + (t + 1) * D, pk, D, p0, p1, scale, s + t * Nk,
                         s + (t + 1) * Nk, row_max[t - t0], row_max[t + 1 - t0]);
          }
          if (t < t1) {
            double unused = 0.0;
            score_panels(qb + t * D, nullptr, pk, D, p0, p1, scale, s + t * Nk, nullptr,
                         row_max[t - t0], unused);
          }
        }
        for (std::size_t t = t0; t < t1; ++t) {
          const double* qt = qb + t * D;
          double* st = s + t * Nk;
          double mx = row_max[t - t0];
          for (std::size_t i = panels * kPanel; i < Nk; ++i) {
            const double* ki = kb + i * D;
            double acc = 0.0;
            for (std::size_t d = 0; d < D; ++d) acc += qt[d] * ki[d];
            st[i] = acc * scale;
            mx = std::max(mx, st[i]);
          }
          double sum = 0.0;
          for (std::size_t i = 0; i < Nk; ++i) {
            st[i] = std::exp(st[i] - mx);
            sum += st[i];
          }
          inv_sum[t - t0] = 1.0 / sum;
          res.denom[(b * H + h) * Nq + t] = sum;
        }

        // Weighted sum of values, tiled over keys so a block of value rows
        // is reused by the whole query tile. Terms are added in key order.
        for (std::size_t i0 = 0; i0 < Nk; i0 += kKeyTile) {
          const std::size_t i1 = std::min(Nk, i0 + kKeyTile);
          for (std::size_t t = t0; t < t1; ++t) {
            const double* st = s + t * Nk;
            const double inv = inv_sum[t - t0];
            double* ot = ob + t * Dv;
            std::size_t i = i0;
            for (; i + 4 <= i1; i += 4) {
              const double w0 = st[i] * inv, w1 = st[i + 1] * inv;
              const double w2 = st[i + 2] * inv, w3 = st[i + 3] * inv;
              const double* v0 = vb + i * Dv;
              const Lanes l0 = {w0, w0}, l1 = {w1, w1}, l2 = {w2, w2}, l3 = {w3, w3};
              std::size_t c = 0;
              for (; c + 2 <= Dv; c += 2) {
                const Lanes acc = load_lanes(ot + c) + l0 * load_lanes(v0 + c) +
                                  l1 * load_lanes(v0 + Dv + c) + l2 * load_lanes(v0 + 2 * Dv + c) +
                                  l3 * load_lanes(v0 + 3 * Dv + c);
                store_lanes(ot + c, acc);
              }
              for (; c < Dv; ++c) {
                ot[c] = ot[c] + w0 * v0[c] + w1 * v0[Dv + c] + w2 * v0[2 * Dv + c] +
                        w3 * v0[3 * Dv + c];
              }
            }
            for (; i < i1; ++i) {
              const double w = st[i] * inv;
              const double* vi = vb + i * Dv;
              for (std::size_t c = 0; c < Dv; ++c) ot[c] += w * vi[c];
            }
          }
        }
      }
    }
  }
  return res;
}

namespace {

struct LinearShapes {
  std::size_t B, H, D, Nq, Nk, Dv, W;
};

LinearShapes check_linear(const Array& q, const Array& k, const Array& v,
                          const MirrorParams& params, const AttentionConfig& cfg) {
  cfg.validate();
  require_rank(q, 3, "linear attention q");
  require_rank(k, 3, "linear attention k");
  require_rank(v, 4, "linear attention v");
  LinearShapes s{};
  s.B = q.extent(0);
  s.H = params.heads();
  s.D = params.head_dim();
  s.W = params.width();
  s.Nq = q.extent(1);
  s.Nk = k.extent(1);
  s.Dv = v.extent(3);
  require_shape(q, {s.B, s.Nq, s.W}, "linear attention q");
  require_shape(k, {s.B, s.Nk, s.W}, "linear attention k");
  require_shape(v, {s.B, s.H, s.Nk, s.Dv}, "linear attention v");
  return s;
}

Array scaled(const Array& x, double s) {
  if (s == 1.0) return x;
  Array out = x;
  for (double& v : out.data()) v *= s;
  return out;
}

}  // namespace

FeaturePair attention_features(const Array& q, const Array& k, const MirrorParams& params,
                               const AttentionConfig& cfg) {
  const double s = cfg.input_scale(params.head_dim());
  const Array qs = scaled(q, s);
  const Array ks = scaled(k, s);
  if (!cfg.shared_stats) {
    return {trace_feature_map(qs, params, cfg.modulation),
            trace_feature_map(ks, params, cfg.modulation)};
  }
  FeatureMapTrace tq = trace_feature_map(qs, params, cfg.modulation);
  FeatureMapTrace tk = trace_feature_map(ks, params, cfg.modulation);
  const Array* parts[] = {&tq.heads, &tk.heads};
  const BlockStats shared = block_variance(parts);
  return {trace_feature_map(qs, params, cfg.modulation, &shared),
          trace_feature_map(ks, params, cfg.modulation, &shared)};
}

AttentionOutput linear_attention_direct(const Array& q, const Array& k, const Array& v,
                                        const MirrorParams& params, const AttentionConfig& cfg) {
  const LinearShapes s = check_linear(q, k, v, params, cfg);
  const FeaturePair f = attention_features(q, k, params, cfg);

  AttentionOutput res{Array({s.B, s.H, s.Nq, s.Dv}), Array({s.B, s.H, s.Nq}), 0};
  for (std::size_t b = 0; b < s.B; ++b) {
    for (std::size_t h = 0; h < s.H; ++h) {
      const double* fq = f.q.features.raw() + (b * s.H + h) * s.Nq * s.D;
      const double* fk = f.k.features.raw() + (b * s.H + h) * s.Nk * s.D;
      const double* vb = v.raw() + (b * s.H + h) * s.Nk * s.Dv;
      double* ob = res.out.raw() + (b * s.H + h) * s.Nq * s.Dv;

      Array kernel({s.Nq, s.Nk});
      for (std::size_t t = 0; t < s.Nq; ++t)
        for (std::size_t i = 0; i < s.Nk; ++i) {
          double acc = 0.0;
          for (std::size_t d = 0; d < s.D; ++d) acc += fq[t * s.D + d] * fk[i * s.D + d];
          kernel(t, i) = acc;
        }

      for (std::size_t t = 0; t < s.Nq; ++t) {
        double den = 0.0;
        for (std::size_t i = 0; i < s.Nk; ++i) den += kernel(t, i);
        if (den == 0.0) ++res.zero_denominators;
        den += cfg.denom_eps;
        double* ot = ob + t * s.Dv;
        for (std::size_t i = 0; i < s.Nk; ++i) {
          const double w = kernel(t, i);
          for (std::size_t c = 0; c < s.Dv; ++c) ot[c] += w * vb[i * s.Dv + c];
        }
        for (std::size_t c = 0; c < s.Dv; ++c) ot[c] /= den;
        res.denom[(b * s.H + h) * s.Nq + t] = den;
      }
    }
  }
  return res;
}

AttentionOutput linear_attention_reordered(const Array& q, const Array& k, const Array& v,
                                           const MirrorParams& params,
                                           const AttentionConfig& cfg) {
  const LinearShapes s = check_linear(q, k, v, params, cfg);
  const double scale = cfg.input_scale(s.D);

  TokenFeatureMap map_q(params, cfg.modulation, scale);
  TokenFeatureMap map_k(params, cfg.modulation, scale);
  if (cfg.shared_stats) {
    const Array* both[] = {&q, &k};
    const BlockStats shared = map_q.stats(both);
    map_q.prepare(shared);
    map_k.prepare(shared);
  } else {
    const Array* qs[] = {&q};
    const Array* ks[] = {&k};
    map_q.prepare(map_q.stats(qs));
    map_k.prepare(map_k.stats(ks));
  }

  AttentionOutput res{Array({s.B, s.H, s.Nq, s.Dv}), Array({s.B, s.H, s.Nq}), 0};
  Array kv({s.H, s.D, s.Dv});
  Array z({s.H, s.D});
  Array phi({s.W});
  for (std::size_t b = 0; b < s.B; ++b) {
    kv.fill(0.0);
    z.fill(0.0);
    for (std::size_t i = 0; i < s.Nk; ++i) {
      map_k.map(k.data().subspan((b * s.Nk + i) * s.W, s.W), b, phi.data());
      for (std::size_t h = 0; h < s.H; ++h) {
        const double* vi = v.raw() + ((b * s.H + h) * s.Nk + i) * s.Dv;
        for (std::size_t d = 0; d < s.D; ++d) {
          const double p = phi[h * s.D + d];
          z[h * s.D + d] += p;
          if (p == 0.0) continue;
          double* row = kv.raw() + (h * s.D + d) * s.Dv;
          for (std::size_t c = 0; c < s.Dv; ++c) row[c] += p * vi[c];
        }
      }
    }
    for (std::size_t t = 0; t < s.Nq; ++t) {
      map_q.map(q.data().subspan((b * s.Nq + t) * s.W, s.W), b, phi.data());
      for (std::size_t h = 0; h < s.H; ++h) {
        double* ot = res.out.raw() + ((b * s.H + h) * s.Nq + t) * s.Dv;
        double den = 0.0;
        for (std::size_t d = 0; d < s.D; ++d) {
          const double p = phi[h * s.D + d];
          if (p == 0.0) continue;
          den += p * z[h * s.D + d];
          const double* row = kv.raw() + (h * s.D + d) * s.Dv;
          for (std::size_t c = 0; c < s.Dv; ++c) ot[c] += p * row[c];
        }
        if (den == 0.0) ++res.zero_denominators;
        den += cfg.denom_eps;
        for (std::size_t c = 0; c < s.Dv; ++c) ot[c] /= den;
        res.denom[(b * s.H + h) * s.Nq + t] = den;
      }
    }
  }
  return res;
}

double blockwise_kernel(std::span<const double> phi_q, std::span<const double> phi_k) {
  if (phi_q.size() != phi_k.size() || phi_q.size() % 2 != 0) {
    throw ShapeError("blockwise_kernel: features must have equal, even length");
  }
  double total = 0.0;
  for (std::size_t m = 0; m < phi_q.size() / 2; ++m) {
    total += phi_q[2 * m] * phi_k[2 * m] + phi_q[2 * m + 1] * phi_k[2 * m + 1];
  }
  return total;
}

double blockwise_kernel(std::span<const double> q, std::span<const double> k,
                        std::span<const double> angles) {
  if (q.size() != k.size() || q.size() != 2 * angles.size()) {
    throw ShapeError("blockwise_kernel: need |q| = |k| = 2 * |angles|");
  }
  double total = 0.0;
  for (std::size_t m = 0; m < angles.size(); ++m) {
    const double c = std::cos(2.0 * angles[m]), s = std::sin(2.0 * angles[m]);
    double q1 = q[2 * m], q2 = q[2 * m + 1], k1 = k[2 * m], k2 = k[2 * m + 1];
    reflect_pair(q1, q2, c, s);
    reflect_pair(k1, k2, c, s);
    total += std::max(q1, 0.0) * std::max(k1, 0.0) + std::max(q2, 0.0) * std::max(k2, 0.0);
  }
  return total;
}

}  // namespace mirrorla
