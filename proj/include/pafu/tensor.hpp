#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pafu/error.hpp"

namespace pafu {

/// Up to four extents, read as N,C,H,W. Lower-rank shapes are right-aligned:
/// a rank-2 shape {m,k} is viewed as {1,1,m,k}.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;

  Shape(std::initializer_list<std::size_t> extents)
      : Shape(std::span<const std::size_t>(extents.begin(), extents.size())) {}

  explicit Shape(std::span<const std::size_t> extents) : rank_(extents.size()) {
    if (extents.empty() || extents.size() > kMaxRank) {
      throw DimensionError("shape rank must be in [1,4], got " + std::to_string(extents.size()));
    }
    const std::size_t off = kMaxRank - extents.size();
    for (std::size_t i = 0; i < extents.size(); ++i) {
      if (extents[i] == 0) throw DimensionError("shape extents must be >= 1");
      dims_[off + i] = extents[i];
    }
  }

  std::size_t rank() const { return rank_; }
  bool empty() const { return rank_ == 0; }

  /// Extent `i` of the declared rank.
  std::size_t operator[](std::size_t i) const { return dims_[kMaxRank - rank_ + i]; }

  std::size_t n() const { return dims_[0]; }
  std::size_t c() const { return dims_[1]; }
  std::size_t h() const { return dims_[2]; }
  std::size_t w() const { return dims_[3]; }

  const std::array<std::size_t, 4>& dims4() const { return dims_; }

  std::vector<std::size_t> extents() const {
    return {dims_.begin() + static_cast<std::ptrdiff_t>(kMaxRank - rank_), dims_.end()};
  }

  std::size_t numel() const {
    if (rank_ == 0) return 0;
    return dims_[0] * dims_[1] * dims_[2] * dims_[3];
  }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < rank_; ++i) os << (i ? "," : "") << (*this)[i];
    os << ']';
    return os.str();
  }

  // Rank-insensitive: {2,3} == {1,2,3}.
  friend bool operator==(const Shape& a, const Shape& b) {
    return a.empty() == b.empty() && a.dims_ == b.dims_;
  }

 private:
  std::array<std::size_t, 4> dims_{1, 1, 1, 1};
  std::size_t rank_ = 0;
};

/// Dense row-major N,C,H,W array. A default-constructed tensor is the empty
/// sentinel (no shape, no data); every other tensor has all extents >= 1.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(shape), data_(shape.numel(), fill) {}

  BasicTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.str());
    }
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(shape, T{0}); }
  static BasicTensor ones(Shape shape) { return BasicTensor(shape, T{1}); }
  static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  std::size_t n() const { return shape_.n(); }
  std::size_t c() const { return shape_.c(); }
  std::size_t h() const { return shape_.h(); }
  std::size_t w() const { return shape_.w(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_.c() + c) * shape_.h() + h) * shape_.w() + w;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  /// Same data, new extents. Element count must agree.
  BasicTensor reshaped(Shape shape) const {
    if (shape.numel() != data_.size()) {
      throw DimensionError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return BasicTensor(shape, data_);
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return BasicTensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Sample `n` of a batch as a 1xCxHxW tensor.
  BasicTensor slice_batch(std::size_t n) const {
    const std::size_t per = shape_.c() * shape_.h() * shape_.w();
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(n * per),
                       data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * per));
    return BasicTensor(Shape{1, shape_.c(), shape_.h(), shape_.w()}, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

/// Stack 1xCxHxW tensors along the batch axis.
template <typename T>
BasicTensor<T> stack_batch(const std::vector<BasicTensor<T>>& items) {
  if (items.empty()) throw DimensionError("stack_batch: no items");
  const Shape& s = items.front().shape();
  std::vector<T> out;
  out.reserve(items.size() * s.numel());
  for (const auto& t : items) {
    if (!(t.shape() == s)) throw DimensionError("stack_batch: shape mismatch");
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return BasicTensor<T>(Shape{items.size() * s.n(), s.c(), s.h(), s.w()}, std::move(out));
}

}  // namespace pafu
