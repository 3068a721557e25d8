#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "setgen/error.hpp"

namespace setgen {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major n-dimensional array (slowest axis first) backed by an
/// Eigen column vector.
template <typename Scalar>
class NdArray {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using value_type = Scalar;

  NdArray() = default;

  explicit NdArray(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(Storage::Constant(shape_size(shape_), fill)) {
    validate();
  }

  NdArray(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }

  static NdArray zeros(Shape shape) { return NdArray(std::move(shape), Scalar(0)); }
  static NdArray ones(Shape shape) { return NdArray(std::move(shape), Scalar(1)); }
  static NdArray from(Shape shape, std::initializer_list<Scalar> values) {
    Storage data(static_cast<Index>(values.size()));
    Index i = 0;
    for (Scalar v : values) data[i++] = v;
    return NdArray(std::move(shape), std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.size() == 0; }

  Storage& data() noexcept { return data_; }
  const Storage& data() const noexcept { return data_; }
  Scalar* ptr() noexcept { return data_.data(); }
  const Scalar* ptr() const noexcept { return data_.data(); }
  std::span<Scalar> span() noexcept { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const noexcept {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Elements per slab of `axis` (product of the trailing dims).
  Index stride(Index axis) const {
    Index s = 1;
    for (Index a = rank() - 1; a > axis; --a) s *= shape_[static_cast<std::size_t>(a)];
    return s;
  }

  NdArray reshaped(Shape shape) const {
    if (shape_size(shape) != size())
      throw ShapeError("reshape", "size", shape_string(shape_) + " -> " + shape_string(shape));
    return NdArray(std::move(shape), data_);
  }

  template <typename Other>
  NdArray<Other> cast() const {
    return NdArray<Other>(shape_, data_.template cast<Other>());
  }

  bool operator==(const NdArray& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  void validate() const {
    for (Index d : shape_)
      if (d <= 0) throw ShapeError("NdArray", "shape", "non-positive extent in " + shape_string(shape_));
    if (shape_size(shape_) != data_.size())
      throw ShapeError("NdArray", "size",
                       shape_string(shape_) + " holds " + std::to_string(shape_size(shape_)) +
                           " elements, data has " + std::to_string(data_.size()));
  }

  Shape shape_;
  Storage data_;
};

using Array = NdArray<double>;
using LabelArray = NdArray<int>;

/// Bitwise equality of values and shape (NaN payloads included).
template <typename Scalar>
bool bitwise_equal(const NdArray<Scalar>& a, const NdArray<Scalar>& b) {
  if (a.shape() != b.shape()) return false;
  return std::equal(a.span().begin(), a.span().end(), b.span().begin(),
                    [](Scalar x, Scalar y) { return std::memcmp(&x, &y, sizeof(Scalar)) == 0; });
}

}  // namespace setgen
