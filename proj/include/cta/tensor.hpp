#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cta {

// NCHW shape. All tensors in this project are dense and row-major.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t sample_size() const {
    return static_cast<std::size_t>(c) * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(shape.size(), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw std::invalid_argument("tensor data size does not match shape " +
                                  shape_.str());
    }
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
                     shape_.w + x];
  }
  const T& at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
                     shape_.w + x];
  }

  std::span<T> sample(int n) {
    return {data_.data() + n * shape_.sample_size(), shape_.sample_size()};
  }
  std::span<const T> sample(int n) const {
    return {data_.data() + n * shape_.sample_size(), shape_.sample_size()};
  }

  // Copies samples [first, first + count) into a new tensor.
  Tensor slice(int first, int count) const {
    Shape s = shape_;
    s.n = count;
    Tensor out(s);
    std::copy_n(data_.begin() + first * shape_.sample_size(), s.size(),
                out.data_.begin());
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// Stacks equally shaped single-sample tensors along n.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw std::invalid_argument("stack: empty input");
  Shape s = items[0].shape();
  int total = 0;
  for (const auto& t : items) {
    if (t.c() != s.c || t.h() != s.h || t.w() != s.w) {
      throw std::invalid_argument("stack: shape mismatch " + t.shape().str() +
                                  " vs " + s.str());
    }
    total += t.n();
  }
  s.n = total;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& t : items) {
    std::copy(t.vec().begin(), t.vec().end(), out.vec().begin() + off);
    off += t.size();
  }
  return out;
}

inline void require_shape(const Shape& got, const Shape& want, const char* what) {
  if (!(got == want)) {
    throw std::invalid_argument(std::string(what) + ": expected shape " +
                                want.str() + ", got " + got.str());
  }
}

}  // namespace cta
