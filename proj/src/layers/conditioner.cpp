#include "revflow/conditioner.h"

#include <cmath>
#include <utility>

#include "revflow/errors.h"
#include "revflow/kernels.h"

namespace revflow {

template <typename T>
Conditioner<T>::Conditioner(std::size_t c_in, std::size_t c_out, std::size_t hidden, Rng& rng)
    : c_in_(c_in),
      c_out_(c_out),
      hidden_(hidden),
      w1_("conv1.weight", Tensor<T>::randn(Shape{hidden, c_in, 3, 3}, rng)),
      b1_("conv1.bias", Tensor<T>(Shape{1, hidden, 1, 1})),
      w2_("conv2.weight", Tensor<T>(Shape{c_out, hidden, 3, 3})),
      b2_("conv2.bias", Tensor<T>(Shape{1, c_out, 1, 1})) {
  const T std_dev = static_cast<T>(std::sqrt(2.0 / (9.0 * static_cast<double>(c_in))));
  for (T& v : w1_.value.values()) v *= std_dev;
}

template <typename T>
void Conditioner<T>::check_input(const Tensor<T>& x1, const char* op) const {
  if (x1.shape().c != c_in_) {
    throw ShapeError(std::string("conditioner ") + op + ": expected " + std::to_string(c_in_) +
                     " channels, got " + to_string(x1.shape()));
  }
}

template <typename T>
Tensor<T> Conditioner<T>::hidden_activation(const Tensor<T>& x1) const {
  check_input(x1, "forward");
  return map(conv3x3(x1, w1_.value, b1_.value), Unary::relu());
}

template <typename T>
Tensor<T> Conditioner<T>::forward_from_hidden(const Tensor<T>& hidden) const {
  return conv3x3(hidden, w2_.value, b2_.value);
}

template <typename T>
Tensor<T> Conditioner<T>::forward(const Tensor<T>& x1) const {
  return forward_from_hidden(hidden_activation(x1));
}

template <typename T>
Tensor<T> Conditioner<T>::backward(const Tensor<T>& x1, const Tensor<T>& dy) {
  return backward_from_hidden(x1, hidden_activation(x1), dy);
}

template <typename T>
Tensor<T> Conditioner<T>::backward_from_hidden(const Tensor<T>& x1, Tensor<T> hidden,
                                               const Tensor<T>& dy) {
  check_input(x1, "backward");
  const Shape expected{x1.shape().n, c_out_, x1.shape().h, x1.shape().w};
  if (!(dy.shape() == expected)) {
    throw ShapeError("conditioner backward: dy is " + to_string(dy.shape()) + ", expected " +
                     to_string(expected));
  }
  conv3x3_param_grad_accumulate(hidden, dy, w2_.grad, b2_.grad);
  // The ReLU derivative is read from the post-activation sign, then the
  // hidden buffer is overwritten with the pre-activation gradient.
  const Tensor<T> dpre = conv3x3_input_grad_relu(std::move(hidden), w2_.value, dy);
  conv3x3_param_grad_accumulate(x1, dpre, w1_.grad, b1_.grad);
  return conv3x3_input_grad(w1_.value, dpre);
}

template <typename T>
std::vector<Parameter<T>*> Conditioner<T>::parameters() {
  return {&w1_, &b1_, &w2_, &b2_};
}

template <typename T>
std::vector<const Parameter<T>*> Conditioner<T>::parameters() const {
  return {&w1_, &b1_, &w2_, &b2_};
}

template class Conditioner<float>;
template class Conditioner<double>;

}  // namespace revflow
