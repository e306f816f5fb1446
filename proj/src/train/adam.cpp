#include <cmath>

#include "revflow/errors.h"
#include "revflow/train.h"

namespace revflow {

template <typename T>
bool Adam<T>::step(std::span<Parameter<T>* const> params) {
  bool finite = true;
  for (const Parameter<T>* p : params) {
    for (T g : p->grad.values()) {
      if (!std::isfinite(static_cast<double>(g))) {
        finite = false;
        break;
      }
    }
    if (!finite) break;
  }
  if (!finite) {
    for (Parameter<T>* p : params) p->zero_grad();
    return false;
  }

  if (m_.empty()) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Parameter<T>* p : params) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  if (m_.size() != params.size()) {
    throw ShapeError("adam: parameter list changed between steps");
  }

  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<T>& p = *params[k];
    if (!(m_[k].shape() == p.value.shape())) {
      throw ShapeError("adam: moment buffer does not match parameter " + p.name);
    }
    T* value = p.value.data();
    T* grad = p.grad.data();
    T* m = m_[k].data();
    T* v = v_[k].data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = grad[i];
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      value[i] = static_cast<T>(value[i] - config_.lr * (mi / c1) / (std::sqrt(vi / c2) + config_.eps));
      grad[i] = T{0};
    }
    p.touch();
  }
  return true;
}

template <typename T>
std::size_t Adam<T>::state_bytes() const {
  std::size_t total = 0;
  for (const auto& t : m_) total += t.bytes();
  for (const auto& t : v_) total += t.bytes();
  return total;
}

template <typename T>
double grad_norm(std::span<Parameter<T>* const> params) {
  double sq = 0.0;
  for (const Parameter<T>* p : params) {
    for (T g : p->grad.values()) sq += static_cast<double>(g) * g;
  }
  return std::sqrt(sq);
}

template <typename T>
void scale_grads(std::span<Parameter<T>* const> params, double factor) {
  for (Parameter<T>* p : params) {
    for (T& g : p->grad.values()) g = static_cast<T>(g * factor);
  }
}

template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  const double norm = grad_norm(params);
  if (std::isfinite(norm) && norm > max_norm) scale_grads(params, max_norm / norm);
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double grad_norm(std::span<Parameter<float>* const>);
template double grad_norm(std::span<Parameter<double>* const>);
template void scale_grads(std::span<Parameter<float>* const>, double);
template void scale_grads(std::span<Parameter<double>* const>, double);
template double clip_grad_norm(std::span<Parameter<float>* const>, double);
template double clip_grad_norm(std::span<Parameter<double>* const>, double);

}  // namespace revflow
