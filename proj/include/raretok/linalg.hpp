#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "raretok/error.hpp"
#include "raretok/tensor.hpp"

namespace raretok {

// Row-major f64 matrix used for all in-memory numerics.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_tensor(const Tensor& t) {
    require(t.ndim() == 2, "expected a 2-D tensor, got shape ", shape_string(t.shape()));
    Matrix m(t.extent(0), t.extent(1));
    std::copy(t.data().begin(), t.data().end(), m.data_.begin());
    return m;
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols_, cols_); }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols_, cols_);
  }
  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// A * A^T over rows, scaled.
inline Matrix gram_rows(const Matrix& a, double scale = 1.0) {
  Matrix g(a.rows(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double v = dot(a.row(i), a.row(j)) * scale;
      g(i, j) = v;
      g(j, i) = v;
    }
  }
  return g;
}

struct SymmetricSpectrum {
  std::vector<double> eigenvalues;  // ascending
  std::size_t source_dim = 0;
  Matrix eigenvectors;              // columns, same order; empty unless requested
};

namespace detail {

inline double max_abs(const Matrix& m) {
  double mx = 0.0;
  for (double v : m.data()) mx = std::max(mx, std::abs(v));
  return mx;
}

}  // namespace detail

// Cyclic Jacobi eigensolver for symmetric matrices. Deterministic: the sweep order
// and convergence test depend only on the input values.
inline SymmetricSpectrum sym_eig(const Matrix& input, bool want_vectors = false) {
  require(input.rows() == input.cols(), "sym_eig needs a square matrix, got ", input.rows(), "x",
          input.cols());
  const std::size_t n = input.rows();
  const double scale = detail::max_abs(input);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      require(std::abs(input(i, j) - input(j, i)) <= 1e-6 * scale, "sym_eig input not symmetric at (",
              i, ", ", j, ")");
    }
  }

  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (input(i, j) + input(j, i));
  Matrix v = want_vectors ? Matrix::identity(n) : Matrix();

  auto off_norm2 = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += a(i, j) * a(i, j);
    return s;
  };
  double total2 = 0.0;
  for (double x : a.data()) total2 += x * x;

  for (int sweep = 0; sweep < 100; ++sweep) {
    if (total2 == 0.0 || off_norm2() <= 1e-30 * total2) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p), aqq = a(q, q);
        // Skip rotations that cannot change the diagonal at working precision.
        if (std::abs(apq) < 1e-300 ||
            (std::abs(app) + 1e18 * std::abs(apq) == std::abs(app) &&
             std::abs(aqq) + 1e18 * std::abs(apq) == std::abs(aqq))) {
          a(p, q) = a(q, p) = 0.0;
          continue;
        }
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        if (want_vectors) {
          for (std::size_t k = 0; k < n; ++k) {
            const double vkp = v(k, p), vkq = v(k, q);
            v(k, p) = c * vkp - s * vkq;
            v(k, q) = s * vkp + c * vkq;
          }
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });

  SymmetricSpectrum out;
  out.source_dim = n;
  out.eigenvalues.reserve(n);
  for (auto i : order) out.eigenvalues.push_back(a(i, i));
  if (want_vectors) {
    out.eigenvectors = Matrix(n, n);
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, c) = v(r, order[c]);
  }
  return out;
}

inline SymmetricSpectrum sym_eig(const Tensor& t, bool want_vectors = false) {
  require(t.ndim() == 2 && t.extent(0) == t.extent(1), "sym_eig needs a square matrix, got shape ",
          shape_string(t.shape()));
  return sym_eig(Matrix::from_tensor(t), want_vectors);
}

}  // namespace raretok
