#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <utility>

#include "crackmamba/common.hpp"

namespace crackmamba {

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) {
    check_arg(d > 0, "tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense N-dimensional array, row-major, flat Eigen storage.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap =
      Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(shape_numel(shape_))) {}
  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : shape_(std::move(shape)), data_(shape_numel(shape_)) {
    check_arg(static_cast<Index>(values.size()) == data_.size(),
              "initializer length does not match shape " + shape_str(shape_));
    Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  bool empty() const { return shape_.empty(); }
  Index size() const { return data_.size(); }
  int rank() const { return static_cast<int>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  Index dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  template <typename... Is>
  Scalar& operator()(Is... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Is>
  Scalar operator()(Is... idx) const {
    return data_[offset(idx...)];
  }

  /// Same data, new shape metadata (element count must match).
  Tensor reshaped(Shape shape) const {
    check_arg(shape_numel(shape) == size(), "reshape " + shape_str(shape_) + " -> " +
                                                shape_str(shape) + ": element count differs");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  MatrixMap matrix(Index rows, Index cols) {
    check_arg(rows * cols == size(), "matrix view size mismatch");
    return MatrixMap(data_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_arg(rows * cols == size(), "matrix view size mismatch");
    return ConstMatrixMap(data_.data(), rows, cols);
  }

  bool all_finite() const {
    for (Index i = 0; i < data_.size(); ++i)
      if (!std::isfinite(static_cast<double>(data_[i]))) return false;
    return true;
  }

 private:
  template <typename... Is>
  Index offset(Is... idx) const {
    constexpr int n = sizeof...(Is);
    const Index ids[n] = {static_cast<Index>(idx)...};
    Index off = 0;
    for (int i = 0; i < n; ++i) off = off * shape_[static_cast<std::size_t>(i)] + ids[i];
    return off;
  }

  Shape shape_;
  Array data_;
};

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const std::string& op) {
  check_arg(a.same_shape(b),
            op + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace crackmamba
