#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mirrorla {

struct SuiteResult {
  std::string name;
  std::size_t cases = 0;
  double worst = 0.0;  // largest observed deviation
  double tolerance = 0.0;
  bool passed = false;
};

// Direct vs reordered linear attention over random configurations
// (B <= 2, H <= 4, N <= 64, D, Dv <= 16), max-abs output deviation.
SuiteResult equivalence_suite(std::uint64_t seed, std::size_t configs = 200,
                              double tolerance = 1e-10);

// Block reflection inner products, involution and the 2x2 closed form against
// the general Householder matrix. Returns three results in that order.
std::vector<SuiteResult> isometry_suite(std::uint64_t seed, std::size_t triples = 1000);

// Sorted covariance eigenvalues before and after a random global reflection
// (H * D <= 64).
SuiteResult spectrum_suite(std::uint64_t seed, std::size_t instances = 100,
                           double tolerance = 1e-8);

// Sigma = diag(1, 2, 3, 4) split into two heads of width 2, u = (1, 1, 1, 1).
// Every entry of H Sigma H is a dyadic rational, so the reflected matrix and
// its cross-head mass (exactly 1) are compared with == .
SuiteResult mixing_example();

}  // namespace mirrorla
