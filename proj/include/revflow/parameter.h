#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "revflow/tensor.h"

namespace revflow {

/// A trainable buffer with its gradient. `version` increases whenever the
/// value is mutated, which lets caches (LU factors) and the flow's
/// stale-bundle check notice updates.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  std::uint64_t version = 0;

  Parameter() = default;
  Parameter(std::string name_, Tensor<T> value_)
      : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

  void zero_grad() {
    for (T& g : grad.values()) g = T{0};
  }
  void touch() noexcept { ++version; }
  std::size_t bytes() const noexcept { return value.bytes() + grad.bytes(); }
};

}  // namespace revflow
