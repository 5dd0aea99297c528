#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "conceptflow/errors.hpp"

namespace conceptflow {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
struct Types {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
};

using Matrix = Types<double>::Matrix;
using RowMatrix = Types<double>::RowMatrix;
using Vector = Types<double>::Vector;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major n-d array. The flat storage is an Eigen vector so whole-tensor
// arithmetic stays in Eigen expressions; reshaped matrix views come from as_matrix().
template <typename Scalar>
class BasicTensor {
 public:
  using scalar_type = Scalar;
  using Vector = typename Types<Scalar>::Vector;
  using RowMatrix = typename Types<Scalar>::RowMatrix;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Vector::Zero(shape_size(shape_));
  }

  BasicTensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_size(shape_) != data_.size())
      throw DimensionError("tensor shape " + shape_string(shape_) + " needs " +
                           std::to_string(shape_size(shape_)) + " values, got " +
                           std::to_string(data_.size()));
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor constant(Shape shape, Scalar value) {
    BasicTensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static BasicTensor from_values(Shape shape, std::initializer_list<Scalar> values) {
    Vector v(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar x : values) v[i++] = x;
    return BasicTensor(std::move(shape), std::move(v));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  template <typename... Ix>
  Scalar& operator()(Ix... ix) {
    return data_[offset({static_cast<Index>(ix)...})];
  }
  template <typename... Ix>
  const Scalar& operator()(Ix... ix) const {
    return data_[offset({static_cast<Index>(ix)...})];
  }

  // Row-major view with the leading axis as rows and the rest flattened.
  MatrixMap as_matrix() { return MatrixMap(raw(), dim(0), size() / dim(0)); }
  ConstMatrixMap as_matrix() const { return ConstMatrixMap(raw(), dim(0), size() / dim(0)); }
  MatrixMap as_matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return MatrixMap(raw(), rows, cols);
  }
  ConstMatrixMap as_matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return ConstMatrixMap(raw(), rows, cols);
  }

  BasicTensor reshaped(Shape shape) const { return BasicTensor(std::move(shape), data_); }

  bool all_finite() const { return data_.allFinite(); }

  bool operator==(const BasicTensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    for (Index d : shape)
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape));
  }

  void check_view(Index rows, Index cols) const {
    if (rows * cols != size())
      throw DimensionError("cannot view " + shape_string(shape_) + " as " + std::to_string(rows) + "x" +
                           std::to_string(cols));
  }

  Index offset(std::initializer_list<Index> ix) const {
    Index off = 0;
    std::size_t axis = 0;
    for (Index i : ix) off = off * shape_[axis++] + i;
    return off;
  }

  Shape shape_;
  Vector data_;
};

using Tensor = BasicTensor<double>;

// A gradient has exactly the layout of the tensor it differentiates.
template <typename Scalar>
using BasicGradient = BasicTensor<Scalar>;
using Gradient = Tensor;

template <typename Scalar>
void require_finite(const BasicTensor<Scalar>& t, const char* where) {
  if (!t.all_finite()) throw NumericError(std::string(where) + ": non-finite value produced");
}

template <typename Scalar>
void require_rank(const BasicTensor<Scalar>& t, Index rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + " must have rank " + std::to_string(rank) + ", got shape " +
                         shape_string(t.shape()));
}

}  // namespace conceptflow
