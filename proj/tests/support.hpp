#pragma once

// Independent reference implementations used as test oracles.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "misguide/matrix.hpp"
#include "misguide/rng.hpp"

namespace oracle {

using misguide::Matrix;
using misguide::RngStream;

inline Matrix random_matrix(std::size_t r, std::size_t c, RngStream& rng) {
  Matrix m(r, c);
  for (auto& v : m.values()) v = rng.gaussian();
  return m;
}

// A Aᵀ + n I, comfortably SPD.
inline Matrix random_spd(std::size_t n, RngStream& rng, double shift = -1.0) {
  Matrix a = random_matrix(n, n, rng);
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += a(i, k) * a(j, k);
      s(i, j) = acc;
    }
  const double d = shift < 0.0 ? static_cast<double>(n) : shift;
  for (std::size_t i = 0; i < n; ++i) s(i, i) += d;
  return s;
}

// Gauss-Jordan with partial pivoting.
inline Matrix inverse(const Matrix& a) {
  const std::size_t n = a.rows();
  Matrix m = a;
  Matrix inv = Matrix::identity(n);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(m(r, col)) > std::fabs(m(piv, col))) piv = r;
    if (m(piv, col) == 0.0) throw std::runtime_error("singular");
    for (std::size_t k = 0; k < n; ++k) {
      std::swap(m(col, k), m(piv, k));
      std::swap(inv(col, k), inv(piv, k));
    }
    const double d = m(col, col);
    for (std::size_t k = 0; k < n; ++k) {
      m(col, k) /= d;
      inv(col, k) /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = m(r, col);
      for (std::size_t k = 0; k < n; ++k) {
        m(r, k) -= f * m(col, k);
        inv(r, k) -= f * inv(col, k);
      }
    }
  }
  return inv;
}

// Gaussian elimination with partial pivoting on [A | b].
inline std::vector<double> solve(Matrix a, std::vector<double> b) {
  const std::size_t n = a.rows();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a(r, col)) > std::fabs(a(piv, col))) piv = r;
    for (std::size_t k = 0; k < n; ++k) std::swap(a(col, k), a(piv, k));
    std::swap(b[col], b[piv]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a(r, col) / a(col, col);
      for (std::size_t k = col; k < n; ++k) a(r, k) -= f * a(col, k);
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double acc = b[i];
    for (std::size_t k = i + 1; k < n; ++k) acc -= a(i, k) * x[k];
    x[i] = acc / a(i, i);
  }
  return x;
}

// (x - mu)ᵀ S⁻¹ (x - mu) with an explicit inverse.
inline double quad_form(const Matrix& s_inv, const std::vector<double>& x, const std::vector<double>& mu) {
  const std::size_t n = x.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) acc += (x[i] - mu[i]) * s_inv(i, j) * (x[j] - mu[j]);
  return acc;
}

// Mann-Whitney statistic over every (ood, id) pair; exact in halves.
inline double auroc_pairs(const std::vector<double>& ood, const std::vector<double>& id) {
  std::int64_t twice = 0;
  for (double a : ood)
    for (double b : id) twice += a > b ? 2 : (a == b ? 1 : 0);
  return static_cast<double>(twice) / (2.0 * static_cast<double>(ood.size() * id.size()));
}

inline double rel_err(double a, double b) { return std::fabs(a - b) / std::max(1.0, std::max(std::fabs(a), std::fabs(b))); }

// Normal-approximation band for a binomial proportion.
inline double binomial_sigma(double p, std::size_t n) { return std::sqrt(p * (1.0 - p) / static_cast<double>(n)); }

}  // namespace oracle
