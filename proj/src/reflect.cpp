#include "mirrorla/reflect.hpp"

#include <cmath>
#include <stdexcept>

#include "mirrorla/numerics.hpp"

namespace mirrorla {

MirrorAngles::MirrorAngles(Array theta) : theta_(std::move(theta)) {
  require_rank(theta_, 2, "MirrorAngles");
  if (!all_finite(theta_)) throw std::invalid_argument("MirrorAngles: non-finite angle");
}

GlobalMirror::GlobalMirror(Array u) { set(std::move(u)); }

void GlobalMirror::set(Array u) {
  require_rank(u, 1, "GlobalMirror");
  if (!(norm2(u.data()) > kMinNorm)) {
    throw std::invalid_argument("GlobalMirror: mirror direction has (near-)zero norm");
  }
  u_ = std::move(u);
}

double GlobalMirror::norm() const { return norm2(u_.data()); }

Array GlobalMirror::unit() const {
  Array out = u_;
  const double n = norm();
  for (double& v : out.data()) v /= n;
  return out;
}

Array householder_matrix(std::span<const double> u) {
  const double nn = dot(u, u);
  if (!(std::sqrt(nn) > GlobalMirror::kMinNorm)) {
    throw std::invalid_argument("householder_matrix: mirror vector has (near-)zero norm");
  }
  const std::size_t d = u.size();
  Array h = identity(d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) h[i * d + j] -= 2.0 * u[i] * u[j] / nn;
  return h;
}

Array householder_2d(double theta) {
  const double c = std::cos(2.0 * theta), s = std::sin(2.0 * theta);
  return Array({2, 2}, {c, s, s, -c});
}

Array reflect_blocks(const Array& x, const Array& angles) {
  require_rank(x, 4, "reflect_blocks input");
  const std::size_t B = x.extent(0), H = x.extent(1), N = x.extent(2), D = x.extent(3);
  if (D % 2 != 0) throw ShapeError("reflect_blocks: head dimension must be even");
  const std::size_t M = D / 2;
  const bool batched = angles.rank() == 3;
  if (batched) {
    require_shape(angles, {B, H, M}, "reflect_blocks angles");
  } else {
    require_shape(angles, {H, M}, "reflect_blocks angles");
  }

  Array out = x;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const double* theta = angles.raw() + (batched ? (b * H + h) * M : h * M);
      for (std::size_t m = 0; m < M; ++m) {
        const double c = std::cos(2.0 * theta[m]), s = std::sin(2.0 * theta[m]);
        for (std::size_t t = 0; t < N; ++t) {
          double* row = out.raw() + ((b * H + h) * N + t) * D;
          reflect_pair(row[2 * m], row[2 * m + 1], c, s);
        }
      }
    }
  }
  return out;
}

void global_reflect_row(std::span<double> row, std::span<const double> unit_mirror) {
  const double proj = 2.0 * dot(row, unit_mirror);
  for (std::size_t i = 0; i < row.size(); ++i) row[i] -= proj * unit_mirror[i];
}

Array global_reflect(const Array& x, const GlobalMirror& mirror) {
  if (x.rank() < 1) throw ShapeError("global_reflect: input must have rank >= 1");
  const std::size_t width = x.extent(x.rank() - 1);
  if (width != mirror.width()) {
    throw ShapeError("global_reflect: feature width " + std::to_string(width) +
                     " does not match mirror width " + std::to_string(mirror.width()));
  }
  const Array unit = mirror.unit();
  Array out = x;
  for (std::size_t off = 0; off < out.size(); off += width) {
    global_reflect_row(out.data().subspan(off, width), unit.data());
  }
  return out;
}

}  // namespace mirrorla
