#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "hybridscan/errors.hpp"

namespace hybridscan {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape);

/// Dense row-major N-d array. Feature maps use channel-major (C, D, H, W).
///
/// A default-constructed tensor is "undefined" (no shape, no storage); a
/// rank-0 tensor holds exactly one element.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(shape_numel(shape_))) {}

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw UsageError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor constant(Shape shape, Scalar value) {
    Index n = shape_numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, value));
  }

  static Tensor from_values(Shape shape, std::initializer_list<Scalar> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return Tensor(std::move(shape), std::move(a));
  }

  static Tensor scalar(Scalar value) { return constant({}, value); }

  bool defined() const { return data_.size() > 0 && data_.size() == shape_numel(shape_); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }

  /// Product of all extents after the leading one; the "L" of a [C, L] view.
  Index inner_size() const { return rank() == 0 ? 1 : size() / shape_[0]; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  MatrixMap matrix(Index rows, Index cols) { return MatrixMap(data(), rows, cols); }
  ConstMatrixMap matrix(Index rows, Index cols) const { return ConstMatrixMap(data(), rows, cols); }

  /// [dim(0), inner_size()] view.
  MatrixMap as_matrix() { return matrix(shape_.empty() ? 1 : shape_[0], inner_size()); }
  ConstMatrixMap as_matrix() const { return matrix(shape_.empty() ? 1 : shape_[0], inner_size()); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw UsageError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  Shape shape_;
  Array data_;
};

using LabelVolume = Tensor<std::int32_t>;

}  // namespace hybridscan
