#include <cmath>
#include <numbers>

#include "revflow/errors.h"
#include "revflow/train.h"

namespace revflow {

namespace {

template <typename T>
std::vector<double> per_sample_nll(const LatentBundle<T>& bundle) {
  const std::size_t n = bundle.batch();
  if (n == 0 || bundle.logdet.size() != n) {
    throw ShapeError("nll: bundle has no samples or a mismatched logdet vector");
  }
  std::vector<double> sq(n, 0.0);
  std::size_t dims = 0;
  for (const Tensor<T>& part : bundle.parts) {
    if (part.shape().n != n) throw ShapeError("nll: latent parts disagree on batch size");
    const std::size_t per = part.size() / n;
    dims += per;
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = part.data() + s * per;
      double acc = 0.0;
      for (std::size_t i = 0; i < per; ++i) acc += static_cast<double>(p[i]) * p[i];
      sq[s] += acc;
    }
  }
  const double constant = 0.5 * static_cast<double>(dims) * std::log(2.0 * std::numbers::pi);
  std::vector<double> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    out[s] = 0.5 * sq[s] + constant - static_cast<double>(bundle.logdet[s]);
    if (!std::isfinite(out[s])) {
      throw DivergenceError("non-finite negative log-likelihood for sample " + std::to_string(s));
    }
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<double> nll_values(const LatentBundle<T>& bundle) {
  return per_sample_nll(bundle);
}

template <typename T>
NllResult<T> nll(const LatentBundle<T>& bundle) {
  NllResult<T> r;
  r.per_sample = per_sample_nll(bundle);
  double total = 0.0;
  for (double v : r.per_sample) total += v;
  r.mean = total / static_cast<double>(r.per_sample.size());
  r.dz = bundle.parts;
  r.dlogdet.assign(r.per_sample.size(), T{-1});
  return r;
}

template NllResult<float> nll(const LatentBundle<float>&);
template NllResult<double> nll(const LatentBundle<double>&);
template std::vector<double> nll_values(const LatentBundle<float>&);
template std::vector<double> nll_values(const LatentBundle<double>&);

}  // namespace revflow
