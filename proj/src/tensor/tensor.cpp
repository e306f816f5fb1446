#include "revflow/tensor.h"

#include <algorithm>
#include <limits>
#include <sstream>

#include "revflow/errors.h"

namespace revflow {

std::size_t Shape::numel() const {
  if (n == 0 || c == 0 || h == 0 || w == 0) {
    throw ShapeError("tensor shape " + to_string(*this) + " has a zero dimension");
  }
  constexpr std::size_t kMax = std::numeric_limits<std::size_t>::max() / sizeof(double);
  std::size_t total = 1;
  for (std::size_t d : {n, c, h, w}) {
    if (total > kMax / d) {
      throw ShapeError("tensor shape " + to_string(*this) + " overflows the element count");
    }
    total *= d;
  }
  return total;
}

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s;
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape& s) {
  return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

template <typename T>
void Tensor<T>::MeteredDelete::operator()(T* p) const noexcept {
  delete[] p;
  MemoryMeter::global().on_release(bytes);
}

template <typename T>
void Tensor<T>::allocate(const Shape& shape) {
  const std::size_t count = shape.numel();
  const std::size_t bytes = count * sizeof(T);
  // Report first: a budget refusal must happen before the real allocation.
  MemoryMeter::global().on_allocate(bytes);
  T* raw = nullptr;
  try {
    raw = new T[count];
  } catch (...) {
    MemoryMeter::global().on_release(bytes);
    throw;
  }
  data_ = std::unique_ptr<T[], MeteredDelete>(raw, MeteredDelete{bytes});
  shape_ = shape;
  size_ = count;
}

template <typename T>
Tensor<T>::Tensor(const Shape& shape) {
  allocate(shape);
  std::fill_n(data_.get(), size_, T{0});
}

template <typename T>
Tensor<T>::Tensor(const Shape& shape, T fill) {
  allocate(shape);
  std::fill_n(data_.get(), size_, fill);
}

template <typename T>
Tensor<T>::Tensor(const Tensor& other) {
  if (other.empty()) return;
  allocate(other.shape_);
  std::copy_n(other.data_.get(), size_, data_.get());
}

template <typename T>
Tensor<T>& Tensor<T>::operator=(const Tensor& other) {
  if (this != &other) {
    Tensor copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
Tensor<T>::Tensor(Tensor&& other) noexcept
    : shape_(other.shape_), size_(other.size_), data_(std::move(other.data_)) {
  other.shape_ = Shape{};
  other.size_ = 0;
}

template <typename T>
Tensor<T>& Tensor<T>::operator=(Tensor&& other) noexcept {
  if (this != &other) {
    data_ = std::move(other.data_);
    shape_ = other.shape_;
    size_ = other.size_;
    other.shape_ = Shape{};
    other.size_ = 0;
  }
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::randn(const Shape& shape, Rng& rng) {
  Tensor t;
  t.allocate(shape);
  for (std::size_t i = 0; i < t.size_; ++i) t.data_[i] = static_cast<T>(rng.normal());
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_values(const Shape& shape, std::span<const T> values) {
  if (values.size() != shape.numel()) {
    throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  }
  Tensor t;
  t.allocate(shape);
  std::copy(values.begin(), values.end(), t.data_.get());
  return t;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace revflow
