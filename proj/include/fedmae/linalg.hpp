#pragma once

#include <cstddef>

#include <Eigen/Dense>

namespace fedmae {

using DenseMatrix = Eigen::MatrixXd;

// W = B A^T (A A^T + lambda I)^{-1}, the minimizer of
//   0.5 ||B - W A||_F^2 + 0.5 lambda ||W||_F^2.
// A is [in, N], B is [out, N], W is [out, in]. Solved with a Cholesky
// factorization of the Gram matrix. lambda = 0 with a singular Gram matrix
// throws SingularMatrixError; there is no silent pseudo-inverse.
DenseMatrix linear_solve_ridge(const DenseMatrix& A, const DenseMatrix& B, double lambda);

// Best rank-r factorization W ~= W_g W_h from a truncated SVD, with the
// singular values split evenly between the two factors.
struct LowRankFactors {
  DenseMatrix decoder;  // W_g, [rows, r]
  DenseMatrix encoder;  // W_h, [r, cols]
  double error = 0.0;   // ||W - W_g W_h||_F
};
LowRankFactors low_rank_factorize(const DenseMatrix& W, std::size_t rank);

}  // namespace fedmae
