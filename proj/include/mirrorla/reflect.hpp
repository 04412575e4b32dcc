#pragma once

#include <span>

#include "mirrorla/array.hpp"

namespace mirrorla {

// Base reflection angles, one per (head, 2D block). Stored in radians with no
// range clamp; the reflection only depends on the angle modulo pi.
class MirrorAngles {
 public:
  MirrorAngles() = default;
  explicit MirrorAngles(Array theta);

  const Array& theta() const { return theta_; }
  Array& theta() { return theta_; }
  std::size_t heads() const { return theta_.extent(0); }
  std::size_t blocks() const { return theta_.extent(1); }

 private:
  Array theta_{{1, 1}};
};

// Cross-head mirror direction u_c over the concatenated H*D feature width.
// Stored unnormalised; every use normalises it.
class GlobalMirror {
 public:
  static constexpr double kMinNorm = 1e-12;

  GlobalMirror() = default;
  explicit GlobalMirror(Array u);

  const Array& u() const { return u_; }
  // Replaces the direction, rejecting degenerate vectors.
  void set(Array u);
  std::size_t width() const { return u_.size(); }
  double norm() const;
  Array unit() const;

 private:
  Array u_{{1}, {1.0}};
};

// H = I - 2 u u^T / |u|^2.
Array householder_matrix(std::span<const double> u);

// [[cos 2t, sin 2t], [sin 2t, -cos 2t]], the reflection with mirror [cos t, sin t].
Array householder_2d(double theta);

// Reflects one 2D block in place with the closed form of householder_2d.
inline void reflect_pair(double& x1, double& x2, double cos2, double sin2) {
  const double a = x1, b = x2;
  x1 = a * cos2 + b * sin2;
  x2 = a * sin2 - b * cos2;
}

// Block-wise reflection of x [B, H, N, D] with effective angles of shape
// [H, D/2] (shared across the batch) or [B, H, D/2]. Block m covers
// coordinates (2m, 2m + 1).
Array reflect_blocks(const Array& x, const Array& angles);

// Row-wise cross-head reflection y = x - 2 u <x, u> / |u|^2 over the last
// axis of x [B, N, H*D] (any leading shape works).
Array global_reflect(const Array& x, const GlobalMirror& mirror);

// Same as above on a single row with a pre-normalised mirror.
void global_reflect_row(std::span<double> row, std::span<const double> unit_mirror);

}  // namespace mirrorla
