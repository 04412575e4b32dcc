#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "mirrorla/array.hpp"

namespace mirrorla {

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

Array identity(std::size_t n);
Array transpose(const Array& a);

// Plain product of rank-2 arrays; each output entry sums over k in order.
Array matmul(const Array& a, const Array& b);

// Sample covariance (divisor n - 1) of the rows of an [n x d] array.
Array covariance(const Array& points);

struct JacobiOptions {
  double symmetry_tol = 1e-10;
  double offdiag_tol = 1e-12;
  int max_sweeps = 100;
};

// Eigenvalues of a symmetric matrix in ascending order, by cyclic Jacobi
// rotations. Throws ShapeError for non-square or non-symmetric input and
// ConvergenceError if the off-diagonal norm does not drop below
// offdiag_tol within max_sweeps.
std::vector<double> sym_eigenvalues(const Array& a, const JacobiOptions& opts = {});

struct PcaResult {
  Array projections;               // [n x k]
  Array components;                // [k x d], orthonormal rows
  std::vector<double> variances;   // eigenvalue of each component
  bool degenerate = false;         // data rank < k
};

// Centers the rows of `points`, extracts the top-k principal directions by
// power iteration with deflation and returns the projections. Each component
// is sign-normalised so its largest-magnitude coordinate is positive.
PcaResult pca_project(const Array& points, std::size_t k, double tol = 1e-10,
                      int max_iters = 10000);

using ScalarFn = std::function<double(const Array&)>;

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
Array finite_diff(const ScalarFn& f, const Array& x, double h = 1e-5);

}  // namespace mirrorla
