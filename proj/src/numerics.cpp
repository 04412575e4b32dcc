#include "mirrorla/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mirrorla/rng.hpp"

namespace mirrorla {

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Array identity(std::size_t n) {
  Array out({n, n});
  for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
  return out;
}

Array transpose(const Array& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.extent(0), c = a.extent(1);
  Array out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

Array matmul(const Array& a, const Array& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t r = a.extent(0), k = a.extent(1), c = b.extent(1);
  if (b.extent(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  Array out({r, c});
  const double* pa = a.raw();
  const double* pb = b.raw();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += pa[i * k + p] * pb[p * c + j];
      out[i * c + j] = s;
    }
  }
  return out;
}

Array covariance(const Array& points) {
  require_rank(points, 2, "covariance");
  const std::size_t n = points.extent(0), d = points.extent(1);
  if (n < 2) throw ShapeError("covariance needs at least two rows");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += points[i * d + j];
  for (double& m : mean) m /= static_cast<double>(n);
  Array cov({d, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = points[i * d + a] - mean[a];
      for (std::size_t b = a; b < d; ++b) cov[a * d + b] += da * (points[i * d + b] - mean[b]);
    }
  }
  const double inv = 1.0 / static_cast<double>(n - 1);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      cov[a * d + b] *= inv;
      cov[b * d + a] = cov[a * d + b];
    }
  }
  return cov;
}

namespace {

double offdiag_norm(const Array& a, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += a[i * n + j] * a[i * n + j];
  return std::sqrt(s);
}

}  // namespace

std::vector<double> sym_eigenvalues(const Array& input, const JacobiOptions& opts) {
  require_rank(input, 2, "sym_eigenvalues");
  const std::size_t n = input.extent(0);
  if (input.extent(1) != n) throw ShapeError("sym_eigenvalues: matrix is not square");
  if (n > 512) throw ShapeError("sym_eigenvalues: n > 512 not supported");

  const double scale = std::max(1.0, max_abs(input));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(input[i * n + j] - input[j * n + i]) > opts.symmetry_tol * scale) {
        throw ShapeError("sym_eigenvalues: matrix is not symmetric at (" + std::to_string(i) +
                         ", " + std::to_string(j) + ")");
      }
    }
  }

  double frob = 0.0;
  for (double v : input.data()) frob += v * v;
  // The threshold is relative to the matrix norm once entries exceed O(1).
  const double threshold = opts.offdiag_tol * std::max(1.0, std::sqrt(frob));

  Array a = input;
  int sweep = 0;
  while (offdiag_norm(a, n) >= threshold) {
    if (sweep++ >= opts.max_sweeps) {
      throw ConvergenceError("sym_eigenvalues: no convergence after " +
                             std::to_string(opts.max_sweeps) + " sweeps");
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double app = a[p * n + p], aqq = a[q * n + q];
        // Rotation angle that annihilates a(p, q); the smaller root keeps it stable.
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = std::copysign(1.0, tau) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        a[p * n + q] = 0.0;
        a[q * n + p] = 0.0;
      }
    }
  }

  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a[i * n + i];
  std::sort(eig.begin(), eig.end());
  return eig;
}

PcaResult pca_project(const Array& points, std::size_t k, double tol, int max_iters) {
  require_rank(points, 2, "pca_project");
  const std::size_t n = points.extent(0), d = points.extent(1);
  if (k < 1 || k > n) throw ShapeError("pca_project: need n >= k >= 1");
  if (k > d) throw ShapeError("pca_project: k exceeds point dimension");

  Array centered = points;
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += points[i * d + j];
    m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered[i * d + j] -= m;
  }

  // Scatter matrix divided by n; its eigenvectors are the principal axes.
  Array cov({d, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a * d + b] += centered[i * d + a] * centered[i * d + b];
  double trace = 0.0;
  for (double& v : cov.data()) v /= static_cast<double>(n);
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];

  PcaResult result;
  result.components = Array({k, d});
  Rng rng(0x9e3779b97f4a7c15ULL);
  std::vector<double> v(d), w(d);

  auto orthogonalize = [&](std::vector<double>& x, std::size_t upto) {
    for (std::size_t c = 0; c < upto; ++c) {
      double proj = 0.0;
      for (std::size_t j = 0; j < d; ++j) proj += x[j] * result.components[c * d + j];
      for (std::size_t j = 0; j < d; ++j) x[j] -= proj * result.components[c * d + j];
    }
  };

  for (std::size_t c = 0; c < k; ++c) {
    for (double& x : v) x = rng.normal();
    orthogonalize(v, c);
    double nv = norm2(v);
    for (double& x : v) x /= nv;

    double lambda = 0.0;
    bool dead = false;
    for (int it = 0; it < max_iters; ++it) {
      for (std::size_t a = 0; a < d; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < d; ++b) s += cov[a * d + b] * v[b];
        w[a] = s;
      }
      orthogonalize(w, c);
      const double nw = norm2(w);
      if (nw <= 1e-14 * std::max(trace, 1e-300)) {
        dead = true;
        break;
      }
      double delta = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        w[j] /= nw;
        delta = std::max(delta, std::abs(w[j] - v[j]));
      }
      // Negative eigenvalues do not occur for a scatter matrix, so no sign flips.
      v.swap(w);
      lambda = nw;
      if (delta < tol) break;
    }
    if (dead || lambda <= 1e-12 * std::max(trace, 1e-300)) {
      result.degenerate = true;
      lambda = 0.0;
      // Keep the basis orthonormal by completing it with any unused direction.
      for (std::size_t e = 0; e < d; ++e) {
        std::fill(v.begin(), v.end(), 0.0);
        v[e] = 1.0;
        orthogonalize(v, c);
        nv = norm2(v);
        if (nv > 1e-6) break;
      }
      for (double& x : v) x /= nv;
    }

    std::size_t big = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[big])) big = j;
    const double sign = v[big] < 0.0 ? -1.0 : 1.0;
    for (std::size_t j = 0; j < d; ++j) result.components[c * d + j] = sign * v[j];
    result.variances.push_back(lambda);

    // Hotelling deflation.
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov[a * d + b] -= lambda * v[a] * v[b];
  }

  result.projections = Array({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += centered[i * d + j] * result.components[c * d + j];
      result.projections[i * k + c] = s;
    }
  return result;
}

Array finite_diff(const ScalarFn& f, const Array& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff: step must be positive");
  Array grad(x.shape());
  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::domain_error("finite_diff: non-finite function value at coordinate " +
                              std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace mirrorla
