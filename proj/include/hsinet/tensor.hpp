#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsinet {

// Bad tensor geometry or a violated operation precondition.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid argument value (non-finite data, bad hyperparameter).
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed external data: files, containers, annotation records.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  std::int64_t n = 1;
  std::int64_t c = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  constexpr std::size_t numel() const {
    return static_cast<std::size_t>(n * c * h * w);
  }
  constexpr std::size_t plane() const { return static_cast<std::size_t>(h * w); }
  constexpr bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::ostringstream os;
    os << n << "x" << c << "x" << h << "x" << w;
    return os.str();
  }
};

/// Dense rank-4 array in n,c,h,w row-major order.
///
/// A tensor is either materialized (data().size() == shape().numel()) or
/// shape-only. Shape-only tensors carry geometry through a traced forward
/// pass without allocating storage; the complexity analyzer relies on them.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(checked(shape)), data_(shape.numel(), fill) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(checked(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor shape_only(Shape shape) {
    Tensor t;
    t.shape_ = checked(shape);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return shape_.numel(); }
  bool materialized() const { return !data_.empty() || shape_.numel() == 0; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }

  std::size_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return static_cast<std::size_t>(((n * shape_.c + c) * shape_.h + h) * shape_.w + w);
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[index(n, c, h, w)];
  }
  const T& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[index(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Pointer to the h*w plane of (n, c).
  T* plane(std::int64_t n, std::int64_t c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(std::int64_t n, std::int64_t c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    if (!materialized()) return Tensor<U>::shape_only(shape_);
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor reshaped(Shape s) const {
    if (s.numel() != shape_.numel()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    }
    Tensor t = *this;
    t.shape_ = s;
    return t;
  }

 private:
  static Shape checked(Shape s) {
    if (!s.valid()) throw ShapeError("every tensor dimension must be >= 1, got " + s.str());
    return s;
  }

  Shape shape_{};
  std::vector<T> data_;
};

}  // namespace hsinet
