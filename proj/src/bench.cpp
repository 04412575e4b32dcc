#include "mirrorla/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>

#include "mirrorla/attention.hpp"
#include "mirrorla/featmap.hpp"
#include "mirrorla/rng.hpp"

namespace mirrorla {

const BenchPoint* BenchResult::find(const std::string& path, std::size_t n) const {
  for (const BenchPoint& p : points)
    if (p.path == path && p.n == n) return &p;
  return nullptr;
}

double BenchResult::memory_ratio(std::size_t n) const {
  const BenchPoint* s = find("softmax", n);
  const BenchPoint* l = find("linear", n);
  if (!s || !l) return 0.0;
  return static_cast<double>(s->peak_bytes) / static_cast<double>(std::max<std::size_t>(l->peak_bytes, 1));
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("loglog_slope: need two or more matching points");
  }
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      throw std::invalid_argument("loglog_slope: values must be positive");
    }
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  if (den <= 0.0) throw std::invalid_argument("loglog_slope: x values must differ");
  return (n * sxy - sx * sy) / den;
}

namespace {

using Clock = std::chrono::steady_clock;

template <class F>
BenchPoint measure(const std::string& path, std::size_t n, std::size_t reps, F&& call) {
  BenchPoint pt;
  pt.path = path;
  pt.n = n;
  {
    // The warmup call doubles as the memory measurement.
    memory::PeakScope scope;
    const AttentionOutput res = call();
    pt.peak_bytes = scope.peak_bytes() - res.out.bytes() - res.denom.bytes();
  }
  std::vector<double> times;
  for (std::size_t r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    const AttentionOutput res = call();
    const auto t1 = Clock::now();
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  const std::size_t m = times.size() / 2;
  pt.median_seconds = times.size() % 2 ? times[m] : 0.5 * (times[m - 1] + times[m]);
  return pt;
}

}  // namespace

BenchResult run_bench(const BenchOptions& opts) {
  if (opts.n_grid.size() < 4) throw std::invalid_argument("bench: need at least 4 N values");
  if (opts.reps < 5) throw std::invalid_argument("bench: need at least 5 repetitions");
  for (std::size_t i = 0; i < opts.n_grid.size(); ++i) {
    if (opts.n_grid[i] < 1 || (i > 0 && opts.n_grid[i] <= opts.n_grid[i - 1])) {
      throw std::invalid_argument("bench: N grid must be strictly increasing and positive");
    }
  }
  for (const std::string& p : opts.paths) {
    if (p != "softmax" && p != "linear") throw std::invalid_argument("bench: unknown path " + p);
  }
  const std::size_t H = opts.heads, D = opts.head_dim;
  Rng rng(opts.seed);
  const MirrorParams params = MirrorParams::random(H, D, rng);
  const AttentionConfig cfg;

  BenchResult res;
  for (std::size_t n : opts.n_grid) {
    const Array q = rng.normal_array({1, n, H * D});
    const Array k = rng.normal_array({1, n, H * D});
    const Array v = rng.normal_array({1, H, n, D});
    for (const std::string& path : opts.paths) {
      if (path == "softmax") {
        const Array qh = split_heads(q, H), kh = split_heads(k, H);
        res.points.push_back(
            measure(path, n, opts.reps, [&] { return softmax_attention(qh, kh, v); }));
      } else {
        res.points.push_back(measure(path, n, opts.reps, [&] {
          return linear_attention_reordered(q, k, v, params, cfg);
        }));
      }
    }
  }
  for (const std::string& path : opts.paths) {
    std::vector<double> xs, ys;
    for (const BenchPoint& p : res.points) {
      if (p.path != path) continue;
      xs.push_back(static_cast<double>(p.n));
      ys.push_back(p.median_seconds);
    }
    (path == "softmax" ? res.slope_softmax : res.slope_linear) = loglog_slope(xs, ys);
  }
  return res;
}

void write_bench_csv(std::ostream& os, const BenchResult& result) {
  os << "kind,path,n,median_seconds,peak_bytes,slope\n";
  os << std::setprecision(9);
  bool soft = false, lin = false;
  for (const BenchPoint& p : result.points) {
    os << "point," << p.path << ',' << p.n << ',' << p.median_seconds << ',' << p.peak_bytes
       << ",\n";
    soft = soft || p.path == "softmax";
    lin = lin || p.path == "linear";
  }
  if (soft) os << "fit,softmax,,,," << result.slope_softmax << '\n';
  if (lin) os << "fit,linear,,,," << result.slope_linear << '\n';
}

}  // namespace mirrorla
