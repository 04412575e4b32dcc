#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace mirrorla {

struct BenchOptions {
  std::vector<std::size_t> n_grid = {512, 1024, 2048, 4096, 8192, 16384};
  std::size_t reps = 5;
  std::size_t heads = 4;
  std::size_t head_dim = 32;
  std::uint64_t seed = 0;
  // Paths to time; "softmax" and/or "linear".
  std::vector<std::string> paths = {"softmax", "linear"};
};

struct BenchPoint {
  std::string path;
  std::size_t n = 0;
  double median_seconds = 0.0;
  // Peak Array bytes allocated inside the call, minus the returned output.
  std::size_t peak_bytes = 0;
};

struct BenchResult {
  std::vector<BenchPoint> points;
  double slope_softmax = 0.0;
  double slope_linear = 0.0;

  const BenchPoint* find(const std::string& path, std::size_t n) const;
  // softmax / linear peak bytes at n; 0 if either point is missing.
  double memory_ratio(std::size_t n) const;
};

// Least-squares slope of log(y) against log(x). Needs >= 2 points with
// positive values.
double loglog_slope(std::span<const double> x, std::span<const double> y);

// Throws std::invalid_argument for fewer than 4 grid points, reps < 5 or a
// grid that is not strictly increasing.
BenchResult run_bench(const BenchOptions& opts);

// Header `kind,path,n,median_seconds,peak_bytes,slope`; one `point` row per
// measurement and one `fit` row per path.
void write_bench_csv(std::ostream& os, const BenchResult& result);

}  // namespace mirrorla
