#include "fedmae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedmae/error.hpp"

namespace fedmae {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) require(d > 0, "tensor dims must be positive: " + shape_string(shape_));
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::span<const double> values) : Tensor(std::move(shape)) {
  require(values.size() == data_.size(), "tensor value count does not match shape");
  std::copy(values.begin(), values.end(), data_.begin());
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  return data_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

MatrixMap Tensor::matrix() {
  return MatrixMap(data_.data(), static_cast<Eigen::Index>(rows()),
                   static_cast<Eigen::Index>(cols()));
}

ConstMatrixMap Tensor::matrix() const {
  return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(rows()),
                        static_cast<Eigen::Index>(cols()));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
  require(shape_size(shape) == data_.size(),
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::from_matrix(const Matrix& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  t.matrix() = m;
  return t;
}

}  // namespace fedmae
