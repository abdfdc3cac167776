#include "misguide/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "misguide/errors.hpp"

namespace misguide {

bool is_symmetric(const Matrix& a, double rel_tol) {
  if (a.rows() != a.cols()) return false;
  double scale = 0.0;
  for (double v : a.values()) scale = std::max(scale, std::abs(v));
  const double tol = rel_tol * std::max(scale, 1e-300);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol) return false;
  return true;
}

Matrix cholesky(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionMismatch("cholesky requires a square matrix");
  if (!is_symmetric(a)) throw std::invalid_argument("cholesky requires a symmetric matrix");
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double pivot = a(j, j) - dot(l.row(j).first(j), l.row(j).first(j));
    if (!(pivot > 0.0)) {
      throw NotPositiveDefinite("non-positive pivot " + std::to_string(pivot) + " at column " +
                                std::to_string(j));
    }
    const double ljj = std::sqrt(pivot);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      l(i, j) = (a(i, j) - dot(l.row(i).first(j), l.row(j).first(j))) / ljj;
    }
  }
  return l;
}

void forward_substitute(const Matrix& l, std::span<double> b) {
  if (l.rows() != b.size()) throw DimensionMismatch("forward substitution length mismatch");
  for (std::size_t i = 0; i < b.size(); ++i) {
    b[i] = (b[i] - dot(l.row(i).first(i), b.first(i))) / l(i, i);
  }
}

void backward_substitute_t(const Matrix& l, std::span<double> y) {
  if (l.rows() != y.size()) throw DimensionMismatch("backward substitution length mismatch");
  const std::size_t n = y.size();
  for (std::size_t ii = n; ii-- > 0;) {
    y[ii] /= l(ii, ii);
    const double yi = y[ii];
    // Column ii of Lᵀ is row ii of L; eliminate it from the rows above.
    auto lrow = l.row(ii);
    for (std::size_t k = 0; k < ii; ++k) y[k] -= lrow[k] * yi;
  }
}

std::vector<double> solve_chol(const Matrix& l, std::span<const double> b) {
  if (l.rows() != l.cols() || b.size() != l.rows()) {
    throw DimensionMismatch("solve_chol: factor is " + std::to_string(l.rows()) + "x" +
                            std::to_string(l.cols()) + ", rhs has " + std::to_string(b.size()));
  }
  std::vector<double> x(b.begin(), b.end());
  forward_substitute(l, x);
  backward_substitute_t(l, x);
  return x;
}

}  // namespace misguide
