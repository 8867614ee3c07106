#include "fedmae/linalg.hpp"

#include <cmath>
#include <limits>

#include "fedmae/error.hpp"

namespace fedmae {

DenseMatrix linear_solve_ridge(const DenseMatrix& A, const DenseMatrix& B, double lambda) {
  require(A.cols() == B.cols(), "ridge solve: A and B need the same column count");
  require(A.cols() > 0, "ridge solve: no columns");
  require(lambda >= 0.0 && std::isfinite(lambda), "ridge solve: lambda must be finite and >= 0");

  const Eigen::Index d = A.rows();
  DenseMatrix gram = A * A.transpose();
  gram.diagonal().array() += lambda;
  const DenseMatrix rhs = A * B.transpose();  // (B A^T)^T

  Eigen::LLT<DenseMatrix> llt(gram);
  bool ok = llt.info() == Eigen::Success;
  if (ok && lambda == 0.0) {
    // A Gram matrix that is singular in exact arithmetic usually still
    // factors in floating point, with a pivot near roundoff.
    const double scale = gram.diagonal().cwiseAbs().maxCoeff();
    ok = scale > 0.0 &&
         llt.rcond() > static_cast<double>(d) * std::numeric_limits<double>::epsilon();
  }
  if (!ok) {
    if (lambda == 0.0)
      throw SingularMatrixError("ridge solve: A A^T is singular and lambda = 0");
    throw SingularMatrixError("ridge solve: A A^T + lambda I is not positive definite");
  }
  DenseMatrix wt = llt.solve(rhs);
  DenseMatrix w = wt.transpose();
  if (!w.allFinite()) throw NonFiniteError("ridge solve produced non-finite entries");
  return w;
}

LowRankFactors low_rank_factorize(const DenseMatrix& W, std::size_t rank) {
  const auto max_rank = static_cast<std::size_t>(std::min(W.rows(), W.cols()));
  require(rank >= 1 && rank <= max_rank, "low-rank factorization: rank out of range");
  Eigen::JacobiSVD<DenseMatrix> svd(W, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto r = static_cast<Eigen::Index>(rank);
  Eigen::VectorXd root = svd.singularValues().head(r).cwiseSqrt();
  LowRankFactors out;
  out.decoder = svd.matrixU().leftCols(r) * root.asDiagonal();
  out.encoder = root.asDiagonal() * svd.matrixV().leftCols(r).transpose();
  out.error = (W - out.decoder * out.encoder).norm();
  return out;
}

}  // namespace fedmae
