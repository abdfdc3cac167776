#pragma once

#include <span>
#include <vector>

#include "misguide/matrix.hpp"

namespace misguide {

/// Cholesky factor L (lower triangular) with L·Lᵀ = a.
/// Throws NotPositiveDefinite when a pivot is not strictly positive, which in
/// practice means the covariance needs ridge regularization.
Matrix cholesky(const Matrix& a);

// Solves L·y = b in place.
void forward_substitute(const Matrix& l, std::span<double> b);
// Solves Lᵀ·x = y in place.
void backward_substitute_t(const Matrix& l, std::span<double> y);

/// Solves (L·Lᵀ)·x = b given the factor from cholesky().
std::vector<double> solve_chol(const Matrix& l, std::span<const double> b);

bool is_symmetric(const Matrix& a, double rel_tol = 1e-9);

}  // namespace misguide
