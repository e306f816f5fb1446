#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <ostream>
#include <span>
#include <string>

#include "revflow/memory_meter.h"
#include "revflow/rng.h"

namespace revflow {

/// NCHW extent of a tensor. Row-major storage, `w` varies fastest.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  /// Element count. Throws ShapeError on a zero dim or an overflowing product.
  std::size_t numel() const;
  std::size_t plane() const noexcept { return h * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);
std::ostream& operator<<(std::ostream& os, const Shape& s);

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::F32; }
template <>
constexpr DType dtype_of<double>() { return DType::F64; }

const char* dtype_name(DType d);

/// Dense 4-D array. Owns its payload; construction and destruction report the
/// payload bytes to MemoryMeter::global(), so a BudgetExceeded can surface
/// from any constructor or copy.
///
/// A default-constructed (or moved-from) tensor is empty: no payload, no shape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  /// Zero-filled.
  explicit Tensor(const Shape& shape);
  Tensor(const Shape& shape, T fill);

  Tensor(const Tensor& other);
  Tensor& operator=(const Tensor& other);
  Tensor(Tensor&& other) noexcept;
  Tensor& operator=(Tensor&& other) noexcept;
  ~Tensor() = default;

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor full(const Shape& shape, T value) { return Tensor(shape, value); }
  /// i.i.d. standard normal entries, drawn in storage order.
  static Tensor randn(const Shape& shape, Rng& rng);
  /// Copies `values` (must hold exactly shape.numel() entries).
  static Tensor from_values(const Shape& shape, std::span<const T> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return size_; }
  std::size_t bytes() const noexcept { return size_ * sizeof(T); }
  bool empty() const noexcept { return size_ == 0; }

  T* data() noexcept { return data_.get(); }
  const T* data() const noexcept { return data_.get(); }
  std::span<T> values() noexcept { return {data_.get(), size_}; }
  std::span<const T> values() const noexcept { return {data_.get(), size_}; }

  /// Start of the (n, c) spatial plane.
  T* plane(std::size_t n, std::size_t c) noexcept {
    return data_.get() + (n * shape_.c + c) * shape_.plane();
  }
  const T* plane(std::size_t n, std::size_t c) const noexcept {
    return data_.get() + (n * shape_.c + c) * shape_.plane();
  }

  T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

 private:
  struct MeteredDelete {
    std::size_t bytes = 0;
    void operator()(T* p) const noexcept;
  };

  void allocate(const Shape& shape);

  Shape shape_{};
  std::size_t size_ = 0;
  std::unique_ptr<T[], MeteredDelete> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace revflow
