#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <string>

namespace lunardem {

/// NCHW shape. Vectors and per-sample features use H = W = 1.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t size() const { return std::int64_t{n} * c * h * w; }
  std::int64_t plane() const { return std::int64_t{h} * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense 4-D tensor in NCHW order backed by a contiguous Eigen vector.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(shape), data_(Vector::Zero(shape.size())) {}
  Tensor(int n, int c, int h, int w) : Tensor(Shape{n, c, h, w}) {}

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(shape);
    t.data_.setConstant(value);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::int64_t size() const { return shape_.size(); }
  bool empty() const { return shape_.size() == 0; }

  Vector& vec() { return data_; }
  const Vector& vec() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator()(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  Scalar operator()(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

  std::int64_t index(int n, int c, int h, int w) const {
    return ((std::int64_t{n} * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  Scalar* channel(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const Scalar* channel(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  /// Sample n viewed as a [C, H*W] row-major matrix.
  Eigen::Map<RowMatrix<Scalar>> sample(int n) {
    return {channel(n, 0), shape_.c, static_cast<Eigen::Index>(shape_.plane())};
  }
  Eigen::Map<const RowMatrix<Scalar>> sample(int n) const {
    return {channel(n, 0), shape_.c, static_cast<Eigen::Index>(shape_.plane())};
  }

  /// Channel plane (n, c) viewed as an [H, W] row-major matrix.
  Eigen::Map<RowMatrix<Scalar>> image(int n, int c) { return {channel(n, c), shape_.h, shape_.w}; }
  Eigen::Map<const RowMatrix<Scalar>> image(int n, int c) const {
    return {channel(n, c), shape_.h, shape_.w};
  }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.vec() = data_.template cast<Other>();
    return out;
  }

 private:
  Shape shape_{};
  Vector data_;
};

}  // namespace lunardem
