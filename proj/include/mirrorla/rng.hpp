#pragma once

#include <cstdint>
#include <random>

#include "mirrorla/array.hpp"

namespace mirrorla {

// Seeded generator built on std::mt19937_64, whose output sequence is fixed
// by the C++ standard. Uniform doubles take the top 53 bits of each draw and
// normals use the Box-Muller transform, so the integer stream is identical on
// every platform and the real-valued streams differ at most by libm rounding.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Array normal_array(Shape shape, double stddev = 1.0);
  Array uniform_array(Shape shape, double lo, double hi);

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mirrorla
