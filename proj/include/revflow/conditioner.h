#pragma once

#include <cstddef>
#include <vector>

#include "revflow/parameter.h"
#include "revflow/rng.h"
#include "revflow/tensor.h"

namespace revflow {

/// conv3x3 -> ReLU -> conv3x3, producing a coupling layer's scale/shift field.
///
/// conv1 is He-initialized (std = sqrt(2 / (9 c_in))), conv2 starts at exactly
/// zero so the owning coupling is the identity map. Backward passes recompute
/// the hidden activation from the input instead of keeping it.
template <typename T>
class Conditioner {
 public:
  static constexpr std::size_t kDefaultHidden = 64;

  Conditioner(std::size_t c_in, std::size_t c_out, std::size_t hidden, Rng& rng);

  std::size_t in_channels() const noexcept { return c_in_; }
  std::size_t out_channels() const noexcept { return c_out_; }
  std::size_t hidden() const noexcept { return hidden_; }

  Tensor<T> forward(const Tensor<T>& x1) const;

  /// relu(conv1(x1)).
  Tensor<T> hidden_activation(const Tensor<T>& x1) const;
  Tensor<T> forward_from_hidden(const Tensor<T>& hidden) const;

  /// Returns dL/dx1 and adds parameter gradients. `x1` must be the input of
  /// the matching forward; the hidden activation is rebuilt from it.
  Tensor<T> backward(const Tensor<T>& x1, const Tensor<T>& dy);
  /// Same, with the hidden activation supplied by the caller (consumed).
  Tensor<T> backward_from_hidden(const Tensor<T>& x1, Tensor<T> hidden, const Tensor<T>& dy);

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;

 private:
  void check_input(const Tensor<T>& x1, const char* op) const;

  std::size_t c_in_;
  std::size_t c_out_;
  std::size_t hidden_;
  Parameter<T> w1_;
  Parameter<T> b1_;
  Parameter<T> w2_;
  Parameter<T> b2_;
};

extern template class Conditioner<float>;
extern template class Conditioner<double>;

}  // namespace revflow
