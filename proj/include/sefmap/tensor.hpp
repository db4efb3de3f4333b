// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sefmap/errors.hpp"

namespace sefmap {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

/// Cache-line aligned allocation.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. Every tensor doubles as a matrix view whose column
/// count is the last extent and whose row count is everything before it, so an
/// HxWxC grid is an (H*W)xC matrix of per-cell vectors.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() = default;

  explicit Tensor(Shape shape, Real fill = Real(0))
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, const std::vector<Real>& data)
      : Tensor(std::move(shape), AlignedVector<Real>(data.begin(), data.end())) {}

  Tensor(Shape shape, AlignedVector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ConfigError("tensor shape " + shape_str(shape_) + " holds " +
                        std::to_string(shape_size(shape_)) + " values, got " +
                        std::to_string(data_.size()));
    }
  }

  static Tensor scalar(Real v) { return Tensor(Shape{1, 1}, std::vector<Real>{v}); }

  static Tensor vector(std::initializer_list<Real> values) {
    return Tensor(Shape{values.size()}, std::vector<Real>(values));
  }

  /// Row-major matrix from nested initializer lists.
  static Tensor matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    std::vector<Real> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& row : rows) {
      if (row.size() != cols) throw ConfigError("ragged matrix initializer");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const noexcept {
    std::size_t c = cols();
    return c == 0 ? 0 : data_.size() / c;
  }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }
  AlignedVector<Real>& storage() noexcept { return data_; }
  const AlignedVector<Real>& storage() const noexcept { return data_; }

  Real& operator[](std::size_t i) noexcept { return data_[i]; }
  const Real& operator[](std::size_t i) const noexcept { return data_[i]; }
  Real& at(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  const Real& at(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  std::span<Real> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
  std::span<const Real> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols(), cols()};
  }

  Real item() const {
    if (data_.size() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ConfigError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, AlignedVector<Other>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_{};
  AlignedVector<Real> data_{};
};

/// Learnable array with its gradient accumulator.
template <typename Real>
struct Param {
  std::string id;
  Tensor<Real> value;
  Tensor<Real> grad;

  Param(std::string name, Tensor<Real> init)
      : id(std::move(name)), value(std::move(init)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() == value.shape()) {
      grad.fill(Real(0));
    } else {
      grad = Tensor<Real>(value.shape());
    }
  }
};

}  // namespace sefmap
