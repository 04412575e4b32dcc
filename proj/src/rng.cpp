#include "mirrorla/rng.hpp"

#include <cmath>
#include <numbers>

namespace mirrorla {

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double phase = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(phase);
  has_spare_ = true;
  return r * std::cos(phase);
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

Array Rng::normal_array(Shape shape, double stddev) {
  Array a(std::move(shape));
  for (double& v : a.data()) v = stddev * normal();
  return a;
}

Array Rng::uniform_array(Shape shape, double lo, double hi) {
  Array a(std::move(shape));
  for (double& v : a.data()) v = uniform(lo, hi);
  return a;
}

}  // namespace mirrorla
