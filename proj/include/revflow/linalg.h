#pragma once

#include <cstddef>
#include <vector>

#include "revflow/rng.h"
#include "revflow/tensor.h"

namespace revflow {

/// PA = LU with partial pivoting, packed: strict lower triangle holds L
/// (unit diagonal implied), upper triangle holds U.
template <typename T>
struct LuFactors {
  std::size_t n = 0;
  Tensor<T> lu;                      // (n, n, 1, 1)
  std::vector<std::size_t> pivot;    // row i of PA is row pivot[i] of A
  int sign = 1;                      // sign of det P
  double log_abs_det = 0.0;
};

/// Smallest |det| accepted before a matrix counts as singular.
inline constexpr double kMinAbsDet = 1e-30;

/// Factorizes the (n, n, 1, 1) matrix `a` into `out`, reusing out.lu when it
/// already has the right shape. Throws SingularMatrixError on a zero pivot or
/// |det| <= kMinAbsDet.
template <typename T>
void lu_factor_into(const Tensor<T>& a, LuFactors<T>& out);

/// Solves A x = y for every (sample, pixel) position, with the channel axis
/// as the vector. Substitution runs in double on one sample at a time.
template <typename T>
Tensor<T> lu_solve_channels(const LuFactors<double>& f, const Tensor<T>& y);

/// A^{-T} as an (n, n, 1, 1) tensor.
template <typename T>
Tensor<T> lu_inverse_transpose(const LuFactors<double>& f);

/// Row-major orthogonal matrix: the Q of a Gaussian matrix's QR with R's
/// diagonal positive (Gram-Schmidt, applied twice).
std::vector<double> random_orthogonal(std::size_t n, Rng& rng);

}  // namespace revflow
