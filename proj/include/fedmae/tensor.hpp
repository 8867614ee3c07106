#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace fedmae {

// Row-major dense matrix used for token sequences: one row per token.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<Matrix, Eigen::Aligned16>;
using ConstMatrixMap = Eigen::Map<const Matrix, Eigen::Aligned16>;

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense n-d array of doubles. Storage is 16-byte aligned so vectorized
// kernels take the same code path on every call (bitwise determinism).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::span<const double> values);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return {data_.data(), data_.size()}; }
  std::span<const double> values() const { return {data_.data(), data_.size()}; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rows = product of all leading dims, cols = last dim. A 1-d tensor is one row.
  std::size_t rows() const;
  std::size_t cols() const;
  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  void fill(double v);
  void reshape(Shape shape);
  bool all_finite() const;

  static Tensor from_matrix(const Matrix& m);

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

}  // namespace fedmae
