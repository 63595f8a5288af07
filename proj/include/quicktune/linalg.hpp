#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace quicktune {

class SingularKernelError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major square-or-rectangular matrix.
struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double &operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
};

/// In-place lower Cholesky factor of a symmetric matrix. Returns false if a
/// pivot is not strictly positive.
inline bool cholesky_in_place(Matrix &a) {
  const std::size_t n = a.rows;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      const double *ri = &a.data[i * n];
      const double *rj = &a.data[j * n];
      for (std::size_t k = 0; k < j; ++k) s -= ri[k] * rj[k];
      a(i, j) = s / ljj;
    }
    for (std::size_t k = j + 1; k < n; ++k) a(j, k) = 0.0;
  }
  return true;
}

struct CholeskyResult {
  Matrix lower;
  double jitter = 0.0; // extra diagonal that was needed
};

/// Factorizes A, escalating diagonal jitter through 1e-8, 1e-7, ..., 1e-4.
inline CholeskyResult cholesky_with_jitter(const Matrix &a) {
  CholeskyResult r{a, 0.0};
  if (cholesky_in_place(r.lower)) return r;
  for (double jitter = 1e-8; jitter <= 1e-4 * 1.0000001; jitter *= 10.0) {
    r.lower = a;
    for (std::size_t i = 0; i < a.rows; ++i) r.lower(i, i) += jitter;
    if (cholesky_in_place(r.lower)) {
      r.jitter = jitter;
      return r;
    }
  }
  throw SingularKernelError("kernel matrix not positive definite after jitter 1e-4");
}

/// Solves L x = b in place.
inline void forward_substitute(const Matrix &l, std::span<double> b) {
  for (std::size_t i = 0; i < l.rows; ++i) {
    double s = b[i];
    const double *ri = &l.data[i * l.cols];
    for (std::size_t k = 0; k < i; ++k) s -= ri[k] * b[k];
    b[i] = s / ri[i];
  }
}

/// Solves L^T x = b in place.
inline void backward_substitute(const Matrix &l, std::span<double> b) {
  for (std::size_t i = l.rows; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < l.rows; ++k) s -= l(k, i) * b[k];
    b[i] = s / l(i, i);
  }
}

inline std::vector<double> cholesky_solve(const Matrix &l, std::span<const double> b) {
  std::vector<double> x(b.begin(), b.end());
  forward_substitute(l, x);
  backward_substitute(l, x);
  return x;
}

/// A^{-1} from its Cholesky factor.
inline Matrix cholesky_inverse(const Matrix &l) {
  const std::size_t n = l.rows;
  // Linv lower triangular, then A^{-1} = Linv^T Linv.
  Matrix linv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    linv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s -= l(i, k) * linv(k, j);
      linv(i, j) = s / l(i, i);
    }
  }
  Matrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  return inv;
}

inline double cholesky_log_det(const Matrix &l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows; ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

} // namespace quicktune
