#pragma once

#include <cstddef>
#include <utility>

#include "revflow/tensor.h"

namespace revflow {

/// Elementwise unary kernel applied by map().
struct Unary {
  enum class Kind { Exp, Tanh, Relu, Neg, Recip, Scale, Add };
  Kind kind;
  double arg = 0.0;

  static Unary exp() { return {Kind::Exp}; }
  static Unary tanh() { return {Kind::Tanh}; }
  static Unary relu() { return {Kind::Relu}; }
  static Unary neg() { return {Kind::Neg}; }
  static Unary recip() { return {Kind::Recip}; }
  static Unary scale(double a) { return {Kind::Scale, a}; }
  static Unary add(double a) { return {Kind::Add, a}; }
};

enum class Binary { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> map(const Tensor<T>& t, Unary kernel);
/// Reuses the argument's buffer.
template <typename T>
Tensor<T> map(Tensor<T>&& t, Unary kernel);

/// Shapes must match exactly (no broadcasting).
template <typename T>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, Binary kernel);

/// Channels [0, k) and [k, c). Requires 1 <= k < c.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> channel_split(const Tensor<T>& t, std::size_t k);
/// Copy of channels [begin, end).
template <typename T>
Tensor<T> channel_slice(const Tensor<T>& t, std::size_t begin, std::size_t end);
/// Inverse of channel_split. n, h, w must agree.
template <typename T>
Tensor<T> channel_concat(const Tensor<T>& a, const Tensor<T>& b);

/// Shape-preserving 3x3 cross-correlation (zero padding 1, stride 1).
/// weight: (c_out, c_in, 3, 3); bias: (1, c_out, 1, 1).
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct Conv3x3Grads {
  Tensor<T> dx;
  Tensor<T> dweight;
  Tensor<T> dbias;
};

template <typename T>
Conv3x3Grads<T> conv3x3_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy);

/// dL/dx of conv3x3 given upstream dy. Bias does not enter.
template <typename T>
Tensor<T> conv3x3_input_grad(const Tensor<T>& weight, const Tensor<T>& dy);

/// dweight += sum x (*) dy, dbias += sum dy. Sums run in double, fixed order.
template <typename T>
void conv3x3_param_grad_accumulate(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dweight,
                                   Tensor<T>& dbias);

/// Backward through conv3x3 followed by the ReLU that produced `activation`:
/// returns (W^T dy) masked by activation > 0, written into activation's buffer.
/// Each (n, c) plane is accumulated in a one-plane scratch tensor, so the
/// hidden-sized working set is a single tensor.
template <typename T>
Tensor<T> conv3x3_input_grad_relu(Tensor<T>&& activation, const Tensor<T>& weight,
                                  const Tensor<T>& dy);

/// y[n, :, h, w] = W x[n, :, h, w]. W has shape (c, c, 1, 1), row i = output channel i.
template <typename T>
Tensor<T> pixel_matmul(const Tensor<T>& x, const Tensor<T>& w);

/// Left-to-right reductions accumulated in double.
template <typename T>
double sum(const Tensor<T>& t);
template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
double squared_norm(const Tensor<T>& t);
template <typename T>
double max_abs(const Tensor<T>& t);
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise conversion between dtypes.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

}  // namespace revflow
