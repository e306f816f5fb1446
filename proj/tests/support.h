#pragma once

#include <cstddef>
#include <vector>

#include "revflow/layers.h"
#include "revflow/memory_meter.h"
#include "revflow/tensor.h"

namespace revflow::test {

/// Fails the enclosing test if live bytes differ from construction time when
/// the guard goes out of scope.
class MeterBalance {
 public:
  MeterBalance() : before_(MemoryMeter::global().live()) {}
  std::size_t before() const { return before_; }
  std::size_t leaked() const { return MemoryMeter::global().live() - before_; }

 private:
  std::size_t before_;
};

template <typename T>
std::vector<double> to_vec(const Tensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

template <typename T>
std::vector<double> grads_of(InvertibleLayer<T>& layer) {
  std::vector<double> out;
  for (Parameter<T>* p : layer.parameters()) {
    out.insert(out.end(), p->grad.values().begin(), p->grad.values().end());
  }
  return out;
}

}  // namespace revflow::test
