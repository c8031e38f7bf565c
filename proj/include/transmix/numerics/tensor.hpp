#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace transmix {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

/// Raised when operand shapes do not satisfy an op's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces or consumes non-finite values.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void check_shape(const Shape& shape, const char* what) {
  if (shape.empty()) throw ShapeError(std::string(what) + ": empty shape");
  for (Index d : shape) {
    if (d < 1) throw ShapeError(std::string(what) + ": non-positive extent in " + shape_str(shape));
  }
}

/// Dense row-major n-dimensional array with an optional gradient buffer.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor() : shape_{1}, data_(Array::Zero(1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_, "Tensor");
    data_ = Array::Zero(shape_numel(shape_));
  }

  /// Storage left uninitialized, for outputs that are fully overwritten.
  static Tensor uninitialized(Shape shape) {
    check_shape(shape, "Tensor");
    const Index n = shape_numel(shape);
    return Tensor(std::move(shape), Array(n));
  }

  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_, "Tensor");
    if (shape_numel(shape_) != data_.size()) {
      throw ShapeError("Tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " entries");
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), from_list(values)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor filled(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  static Tensor scalar(Scalar value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index numel() const { return data_.size(); }

  Array& data() { return data_; }
  const Array& data() const { return data_; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  Scalar item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
    return data_[0];
  }

  MatrixMap matrix() {
    require_rank2();
    return MatrixMap(data_.data(), shape_[0], shape_[1]);
  }
  ConstMatrixMap matrix() const {
    require_rank2();
    return ConstMatrixMap(data_.data(), shape_[0], shape_[1]);
  }

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (on && grad_.size() != data_.size()) grad_ = Array::Zero(data_.size());
    if (!on) grad_.resize(0);
  }
  Array& grad() { return grad_; }
  const Array& grad() const { return grad_; }
  void zero_grad() {
    if (requires_grad_) grad_.setZero();
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  static Array from_list(std::initializer_list<Scalar> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) a[i++] = v;
    return a;
  }

  void require_rank2() const {
    if (shape_.size() != 2) throw ShapeError("matrix view needs rank 2, got " + shape_str(shape_));
  }

  Shape shape_;
  Array data_;
  bool requires_grad_ = false;
  Array grad_;
};

using TensorD = Tensor<double>;

}  // namespace transmix
