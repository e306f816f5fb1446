#include "revflow/linalg.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "revflow/errors.h"

namespace revflow {

template <typename T>
void lu_factor_into(const Tensor<T>& a, LuFactors<T>& out) {
  const std::size_t n = a.shape().n;
  if (!(a.shape() == Shape{n, n, 1, 1})) {
    throw ShapeError("lu_factor: expected a square (n, n, 1, 1) matrix, got " +
                     to_string(a.shape()));
  }
  if (!(out.lu.shape() == a.shape())) out.lu = Tensor<T>(a.shape());
  std::copy_n(a.data(), a.size(), out.lu.data());
  out.n = n;
  out.pivot.resize(n);
  std::iota(out.pivot.begin(), out.pivot.end(), std::size_t{0});
  out.sign = 1;
  out.log_abs_det = 0.0;

  T* m = out.lu.data();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    T best = std::abs(m[k * n + k]);
    for (std::size_t i = k + 1; i < n; ++i) {
      const T v = std::abs(m[i * n + k]);
      if (v > best) {
        best = v;
        p = i;
      }
    }
    if (best == T{0} || !std::isfinite(best)) {
      throw SingularMatrixError("1x1 convolution matrix is singular (pivot " + std::to_string(k) +
                                " is " + std::to_string(best) + ")");
    }
    if (p != k) {
      std::swap_ranges(m + k * n, m + (k + 1) * n, m + p * n);
      std::swap(out.pivot[k], out.pivot[p]);
      out.sign = -out.sign;
    }
    const T diag = m[k * n + k];
    out.log_abs_det += std::log(std::abs(static_cast<double>(diag)));
    for (std::size_t i = k + 1; i < n; ++i) {
      const T l = m[i * n + k] / diag;
      m[i * n + k] = l;
      for (std::size_t j = k + 1; j < n; ++j) m[i * n + j] -= l * m[k * n + j];
    }
  }
  if (out.log_abs_det <= std::log(kMinAbsDet)) {
    throw SingularMatrixError("1x1 convolution matrix is singular: log|det| = " +
                              std::to_string(out.log_abs_det));
  }
}

template <typename T>
Tensor<T> lu_solve_channels(const LuFactors<double>& f, const Tensor<T>& y) {
  const Shape& s = y.shape();
  const std::size_t c = f.n;
  if (s.c != c) {
    throw ShapeError("lu_solve_channels: " + std::to_string(s.c) + " channels for a " +
                     std::to_string(c) + "x" + std::to_string(c) + " system");
  }
  const double* m = f.lu.data();
  const std::size_t plane = s.plane();
  // One sample at a time in double; the result is rounded to T once.
  Tensor<double> work(Shape{1, c, s.h, s.w});
  Tensor<T> x(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < c; ++i) {
      std::copy_n(y.plane(n, f.pivot[i]), plane, work.plane(0, i));
    }
    for (std::size_t i = 1; i < c; ++i) {
      double* xi = work.plane(0, i);
      for (std::size_t j = 0; j < i; ++j) {
        const double l = m[i * c + j];
        const double* xj = work.plane(0, j);
        for (std::size_t p = 0; p < plane; ++p) xi[p] -= l * xj[p];
      }
    }
    for (std::size_t ii = c; ii-- > 0;) {
      double* xi = work.plane(0, ii);
      for (std::size_t j = ii + 1; j < c; ++j) {
        const double u = m[ii * c + j];
        const double* xj = work.plane(0, j);
        for (std::size_t p = 0; p < plane; ++p) xi[p] -= u * xj[p];
      }
      const double d = m[ii * c + ii];
      for (std::size_t p = 0; p < plane; ++p) xi[p] /= d;
    }
    for (std::size_t i = 0; i < c; ++i) {
      const double* src = work.plane(0, i);
      T* dst = x.plane(n, i);
      for (std::size_t p = 0; p < plane; ++p) dst[p] = static_cast<T>(src[p]);
    }
  }
  return x;
}

template <typename T>
Tensor<T> lu_inverse_transpose(const LuFactors<double>& f) {
  const std::size_t c = f.n;
  // Columns of A^{-1} are solutions against the identity; lay them out as the
  // channel axis of a (1, c, c, 1) tensor so lu_solve_channels does the work.
  Tensor<double> eye(Shape{1, c, c, 1});
  for (std::size_t i = 0; i < c; ++i) eye(0, i, i, 0) = 1.0;
  const Tensor<double> inv = lu_solve_channels(f, eye);  // inv(0, i, j, 0) = A^{-1}[i][j]
  Tensor<T> out(Shape{c, c, 1, 1});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = static_cast<T>(inv(0, j, i, 0));
  }
  return out;
}

std::vector<double> random_orthogonal(std::size_t n, Rng& rng) {
  std::vector<double> a(n * n);
  for (double& v : a) v = rng.normal();
  // Orthonormalize columns in place.
  for (std::size_t j = 0; j < n; ++j) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        double proj = 0.0;
        for (std::size_t i = 0; i < n; ++i) proj += a[i * n + k] * a[i * n + j];
        for (std::size_t i = 0; i < n; ++i) a[i * n + j] -= proj * a[i * n + k];
      }
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += a[i * n + j] * a[i * n + j];
    norm = std::sqrt(norm);
    if (norm == 0.0) throw SingularMatrixError("random_orthogonal: rank-deficient draw");
    for (std::size_t i = 0; i < n; ++i) a[i * n + j] /= norm;
  }
  return a;
}

template void lu_factor_into(const Tensor<float>&, LuFactors<float>&);
template void lu_factor_into(const Tensor<double>&, LuFactors<double>&);
template Tensor<float> lu_solve_channels(const LuFactors<double>&, const Tensor<float>&);
template Tensor<double> lu_solve_channels(const LuFactors<double>&, const Tensor<double>&);
template Tensor<float> lu_inverse_transpose(const LuFactors<double>&);
template Tensor<double> lu_inverse_transpose(const LuFactors<double>&);

}  // namespace revflow
