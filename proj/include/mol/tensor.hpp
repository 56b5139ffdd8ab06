#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mol/errors.hpp"

namespace mol {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using ColVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

// Dense row-major tensor. Any rank >= 1 is allowed; arithmetic treats it as a
// matrix of shape [prod(leading dims), last dim].
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_ = ColVector<Scalar>::Constant(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, ColVector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_numel(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  static Tensor from_rows(std::initializer_list<std::initializer_list<Scalar>> rows) {
    const Index r = static_cast<Index>(rows.size());
    const Index c = r ? static_cast<Index>(rows.begin()->size()) : 0;
    Tensor t(Shape{r, c});
    Index i = 0;
    for (const auto& row : rows) {
      if (static_cast<Index>(row.size()) != c) throw DimensionError("ragged rows in from_rows");
      for (Scalar v : row) t.data_(i++) = v;
    }
    return t;
  }

  static Tensor from_vector(std::initializer_list<Scalar> values) {
    Tensor t(Shape{static_cast<Index>(values.size())});
    Index i = 0;
    for (Scalar v : values) t.data_(i++) = v;
    return t;
  }

  static Tensor from_vector(const std::vector<Scalar>& values) {
    Tensor t(Shape{static_cast<Index>(values.size())});
    for (std::size_t i = 0; i < values.size(); ++i) t.data_(static_cast<Index>(i)) = values[i];
    return t;
  }

  template <typename Matrix>
  static Tensor from_matrix(const Eigen::MatrixBase<Matrix>& m) {
    Tensor t(Shape{m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, Scalar stddev = Scalar(1)) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (Index i = 0; i < t.numel(); ++i) t.data_(i) = static_cast<Scalar>(dist(rng));
    return t;
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, Rng& rng, Scalar lo, Scalar hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (Index i = 0; i < t.numel(); ++i) t.data_(i) = static_cast<Scalar>(dist(rng));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index numel() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  // Matrix view: rows = product of leading dims, cols = last dim.
  Index rows() const { return shape_.empty() ? 0 : numel() / shape_.back(); }
  Index cols() const { return shape_.empty() ? 0 : shape_.back(); }

  MatrixMap matrix() { return MatrixMap(data_.data(), rows(), cols()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data_.data(), rows(), cols()); }

  ColVector<Scalar>& data() { return data_; }
  const ColVector<Scalar>& data() const { return data_; }

  Scalar& operator[](Index i) { return data_(i); }
  Scalar operator[](Index i) const { return data_(i); }
  Scalar& at(Index r, Index c) { return data_(r * cols() + c); }
  Scalar at(Index r, Index c) const { return data_(r * cols() + c); }
  Scalar item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape_));
    return data_(0);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  Tensor transposed() const {
    if (rank() != 2) throw DimensionError("transpose needs rank 2, got " + shape_str(shape_));
    Tensor t(Shape{cols(), rows()});
    t.matrix() = matrix().transpose();
    return t;
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (Index d : shape) {
      if (d < 1) throw DimensionError("tensor dimension sizes must be >= 1, got " + shape_str(shape));
    }
  }

  Shape shape_;
  ColVector<Scalar> data_;
};

using Tensord = Tensor<double>;

template <typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  return (a.data() - b.data()).cwiseAbs().maxCoeff();
}

}  // namespace mol
