#include "revflow/layers.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "revflow/errors.h"
#include "revflow/fault.h"
#include "revflow/kernels.h"

namespace revflow {

// ---------------------------------------------------------------------------
// InvertibleLayer

template <typename T>
void InvertibleLayer<T>::check_dlogdet(std::span<const T> dlogdet, std::size_t batch) const {
  if (dlogdet.size() != batch) {
    throw ShapeError(std::string(kind()) + " backward: dlogdet has " +
                     std::to_string(dlogdet.size()) + " entries for batch " +
                     std::to_string(batch));
  }
}

template <typename T>
LayerBackward<T> InvertibleLayer<T>::backward(const Tensor<T>& dy, const Tensor<T>& y,
                                              std::span<const T> dlogdet) {
  if (!(dy.shape() == y.shape())) {
    throw ShapeError(std::string(kind()) + " backward: dy " + to_string(dy.shape()) +
                     " does not match y " + to_string(y.shape()));
  }
  check_dlogdet(dlogdet, y.shape().n);
  LayerBackward<T> out;
  out.x = inverse(y);
  out.dx = gradient_at(dy, out.x, dlogdet);
  return out;
}

template <typename T>
LayerForward<T> InvertibleLayer<T>::forward_saving(const Tensor<T>& x,
                                                   SavedActivations<T>& saved) {
  LayerForward<T> out = forward(x);
  saved.tensors.push_back(x);
  return out;
}

template <typename T>
Tensor<T> InvertibleLayer<T>::backward_saved(const Tensor<T>& dy, SavedActivations<T>&& saved,
                                             std::span<const T> dlogdet) {
  if (saved.tensors.empty()) {
    throw std::logic_error(std::string(kind()) + ": no saved input for backward");
  }
  check_dlogdet(dlogdet, dy.shape().n);
  return gradient_at(dy, saved.tensors.front(), dlogdet);
}

template <typename T>
std::vector<const Parameter<T>*> InvertibleLayer<T>::parameters() const {
  auto mutable_params = const_cast<InvertibleLayer*>(this)->parameters();
  return {mutable_params.begin(), mutable_params.end()};
}

// ---------------------------------------------------------------------------
// ActNorm

template <typename T>
ActNorm<T>::ActNorm(std::size_t channels)
    : channels_(channels),
      scale_("scale", Tensor<T>(Shape{1, channels, 1, 1}, T{1})),
      bias_("bias", Tensor<T>(Shape{1, channels, 1, 1})) {}

template <typename T>
void ActNorm<T>::check_input(const Shape& s) const {
  if (s.c != channels_) {
    throw ShapeError("actnorm: expected " + std::to_string(channels_) + " channels, got " +
                     to_string(s));
  }
}

template <typename T>
Shape ActNorm<T>::output_shape(const Shape& in) const {
  check_input(in);
  return in;
}

template <typename T>
std::vector<T> ActNorm<T>::logdet(const Shape& s) const {
  double total = 0.0;
  for (std::size_t c = 0; c < channels_; ++c) {
    total += std::log(std::abs(static_cast<double>(scale_.value[c])));
  }
  total *= static_cast<double>(s.plane());
  return std::vector<T>(s.n, static_cast<T>(total));
}

template <typename T>
void ActNorm<T>::initialize_from(const Tensor<T>& x) {
  const Shape& s = x.shape();
  check_input(s);
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n * plane);
  for (std::size_t c = 0; c < channels_; ++c) {
    double mean = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) mean += static_cast<double>(p[i]);
    }
    mean /= count;
    double var = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(p[i]) - mean;
        var += d * d;
      }
    }
    var /= count;
    const double sd = std::sqrt(var);
    if (!(sd > 0.0) || !std::isfinite(sd)) {
      throw DegenerateDataError("actnorm init: channel " + std::to_string(c) +
                                " has zero variance");
    }
    scale_.value[c] = static_cast<T>(1.0 / sd);
    bias_.value[c] = static_cast<T>(-mean / sd);
  }
  scale_.touch();
  bias_.touch();
  initialized_ = true;
}

template <typename T>
void ActNorm<T>::set(std::span<const T> scale, std::span<const T> bias) {
  if (scale.size() != channels_ || bias.size() != channels_) {
    throw ShapeError("actnorm set: expected " + std::to_string(channels_) + " values each");
  }
  std::copy(scale.begin(), scale.end(), scale_.value.data());
  std::copy(bias.begin(), bias.end(), bias_.value.data());
  scale_.touch();
  bias_.touch();
  initialized_ = true;
}

template <typename T>
LayerForward<T> ActNorm<T>::forward(const Tensor<T>& x) {
  check_input(x.shape());
  if (!initialized_) initialize_from(x);
  const Shape& s = x.shape();
  Tensor<T> y(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const double a = scale_.value[c];
      const double b = bias_.value[c];
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) out[i] = static_cast<T>(a * in[i] + b);
    }
  }
  return {std::move(y), logdet(s)};
}

template <typename T>
LayerForward<T> ActNorm<T>::forward_saving(const Tensor<T>& x, SavedActivations<T>& saved) {
  LayerForward<T> out = forward(x);
  saved.tensors.push_back(x);
  return out;
}

template <typename T>
Tensor<T> ActNorm<T>::inverse(const Tensor<T>& y) const {
  check_input(y.shape());
  if (!initialized_) throw std::logic_error("actnorm: inverse before initialization");
  const Shape& s = y.shape();
  Tensor<T> x(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < channels_; ++c) {
      const double a = scale_.value[c];
      const double b = bias_.value[c];
      const T* in = y.plane(n, c);
      T* out = x.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) out[i] = static_cast<T>((in[i] - b) / a);
    }
  }
  return x;
}

template <typename T>
Tensor<T> ActNorm<T>::gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                                  std::span<const T> dlogdet) {
  const Shape& s = x.shape();
  check_input(s);
  if (!(dy.shape() == s)) throw ShapeError("actnorm backward: dy/x shape mismatch");
  double dlogdet_total = 0.0;
  for (T v : dlogdet) dlogdet_total += static_cast<double>(v);
  const double plane = static_cast<double>(s.plane());

  Tensor<T> dx(s);
  for (std::size_t c = 0; c < channels_; ++c) {
    const T a = scale_.value[c];
    double ds = 0.0;
    double db = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* g = dy.plane(n, c);
      const T* in = x.plane(n, c);
      T* out = dx.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        out[i] = a * g[i];
        ds += static_cast<double>(g[i]) * static_cast<double>(in[i]);
        db += static_cast<double>(g[i]);
      }
    }
    ds += dlogdet_total * plane / static_cast<double>(a);
    if (fault::active(fault::Site::ActNormBiasGradSign)) db = -db;
    scale_.grad[c] += static_cast<T>(ds);
    bias_.grad[c] += static_cast<T>(db);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Inv1x1Conv

template <typename T>
Inv1x1Conv<T>::Inv1x1Conv(std::size_t channels, Rng& rng)
    : channels_(channels), weight_("weight", Tensor<T>(Shape{channels, channels, 1, 1})) {
  const std::vector<double> q = random_orthogonal(channels, rng);
  for (std::size_t i = 0; i < q.size(); ++i) weight_.value[i] = static_cast<T>(q[i]);
  factors();
}

template <typename T>
void Inv1x1Conv<T>::check_input(const Shape& s) const {
  if (s.c != channels_) {
    throw ShapeError("inv1x1: expected " + std::to_string(channels_) + " channels, got " +
                     to_string(s));
  }
}

template <typename T>
Shape Inv1x1Conv<T>::output_shape(const Shape& in) const {
  check_input(in);
  return in;
}

template <typename T>
const LuFactors<double>& Inv1x1Conv<T>::factors() const {
  std::lock_guard<std::mutex> lock(lu_mutex_);
  if (!lu_valid_ || lu_version_ != weight_.version) {
    lu_valid_ = false;
    lu_factor_into(cast<double>(weight_.value), lu_);
    lu_version_ = weight_.version;
    lu_valid_ = true;
  }
  return lu_;
}

template <typename T>
double Inv1x1Conv<T>::log_abs_det() const {
  return factors().log_abs_det;
}

template <typename T>
void Inv1x1Conv<T>::set_weight(std::span<const T> w) {
  if (w.size() != channels_ * channels_) {
    throw ShapeError("inv1x1 set_weight: expected " + std::to_string(channels_ * channels_) +
                     " entries");
  }
  std::copy(w.begin(), w.end(), weight_.value.data());
  weight_.touch();
}

template <typename T>
LayerForward<T> Inv1x1Conv<T>::forward(const Tensor<T>& x) {
  check_input(x.shape());
  const double ld = log_abs_det() * static_cast<double>(x.shape().plane());
  return {pixel_matmul(x, weight_.value), std::vector<T>(x.shape().n, static_cast<T>(ld))};
}

template <typename T>
Tensor<T> Inv1x1Conv<T>::inverse(const Tensor<T>& y) const {
  check_input(y.shape());
  return lu_solve_channels(factors(), y);
}

template <typename T>
Tensor<T> Inv1x1Conv<T>::gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                                     std::span<const T> dlogdet) {
  const Shape& s = x.shape();
  check_input(s);
  if (!(dy.shape() == s)) throw ShapeError("inv1x1 backward: dy/x shape mismatch");
  const std::size_t c = channels_;

  Tensor<T> wt(Shape{c, c, 1, 1});
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) wt[i * c + j] = weight_.value[j * c + i];
  }
  Tensor<T> dx = pixel_matmul(dy, wt);

  double dlogdet_total = 0.0;
  for (T v : dlogdet) dlogdet_total += static_cast<double>(v);
  const Tensor<T> inv_t = lu_inverse_transpose<T>(factors());
  const double logdet_weight = dlogdet_total * static_cast<double>(s.plane());
  const double sign = fault::active(fault::Site::Inv1x1WeightGradSign) ? -1.0 : 1.0;

  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* g = dy.plane(n, i);
        const T* in = x.plane(n, j);
        for (std::size_t p = 0; p < s.plane(); ++p) {
          acc += static_cast<double>(g[p]) * static_cast<double>(in[p]);
        }
      }
      acc += logdet_weight * static_cast<double>(inv_t[i * c + j]);
      weight_.grad[i * c + j] += static_cast<T>(sign * acc);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Couplings

template <typename T>
CouplingBase<T>::CouplingBase(std::size_t channels, std::size_t cond_out, std::size_t hidden,
                              Rng& rng)
    : channels_(channels), split_(channels / 2), net_(channels / 2, cond_out, hidden, rng) {}

template <typename T>
void CouplingBase<T>::check_input(const Shape& s) const {
  if (s.c != channels_) {
    throw ShapeError(std::string(this->kind()) + ": expected " + std::to_string(channels_) +
                     " channels, got " + to_string(s));
  }
}

template <typename T>
Shape CouplingBase<T>::output_shape(const Shape& in) const {
  check_input(in);
  return in;
}

namespace {

std::size_t checked_coupling_channels(std::size_t channels, bool require_even) {
  if (channels < 2) throw ShapeError("coupling layers need at least 2 channels");
  if (require_even && channels % 2 != 0) {
    throw ShapeError("affine coupling needs an even channel count, got " +
                     std::to_string(channels));
  }
  return channels;
}

template <typename T>
void copy_channels(const Tensor<T>& src, Tensor<T>& dst, std::size_t begin, std::size_t end) {
  const Shape& s = src.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(src.plane(n, begin), (end - begin) * s.plane(), dst.plane(n, begin));
  }
}

template <typename T>
void add_channels(Tensor<T>& dst, const Tensor<T>& part, std::size_t begin) {
  const Shape& s = part.shape();
  for (std::size_t n = 0; n < s.n; ++n) {
    T* d = dst.plane(n, begin);
    const T* p = part.plane(n, 0);
    for (std::size_t i = 0; i < s.c * s.plane(); ++i) d[i] += p[i];
  }
}

}  // namespace

template <typename T>
AffineCoupling<T>::AffineCoupling(std::size_t channels, std::size_t hidden, Rng& rng)
    : CouplingBase<T>(checked_coupling_channels(channels, true), channels, hidden, rng) {}

namespace {

// y and logdet from x given the conditioner output h = net(x1). Each output
// is computed in double and rounded once, which keeps f32 round trips tight.
template <typename T>
LayerForward<T> affine_apply(const Tensor<T>& x, const Tensor<T>& h, std::size_t k, T alpha) {
  const Shape& s = x.shape();
  const std::size_t m = s.c - k;
  Tensor<T> y(s);
  copy_channels(x, y, 0, k);
  std::vector<T> logdet(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    double ld = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const T* r = h.plane(n, j);
      const T* t = h.plane(n, m + j);
      const T* in = x.plane(n, k + j);
      T* out = y.plane(n, k + j);
      for (std::size_t p = 0; p < s.plane(); ++p) {
        const T sc = alpha * std::tanh(r[p] / alpha);
        out[p] = static_cast<T>(std::exp(static_cast<double>(sc)) * in[p] + t[p]);
        ld += static_cast<double>(sc);
      }
    }
    logdet[n] = static_cast<T>(ld);
  }
  return {std::move(y), std::move(logdet)};
}

}  // namespace

template <typename T>
LayerForward<T> AffineCoupling<T>::forward(const Tensor<T>& x) {
  this->check_input(x.shape());
  const std::size_t k = this->split_;
  const Tensor<T> h = this->net_.forward(channel_slice(x, 0, k));
  return affine_apply(x, h, k, static_cast<T>(kClamp));
}

template <typename T>
LayerForward<T> AffineCoupling<T>::forward_saving(const Tensor<T>& x,
                                                  SavedActivations<T>& saved) {
  this->check_input(x.shape());
  const std::size_t k = this->split_;
  Tensor<T> x1 = channel_slice(x, 0, k);
  Tensor<T> hidden = this->net_.hidden_activation(x1);
  Tensor<T> h = this->net_.forward_from_hidden(hidden);
  LayerForward<T> out = affine_apply(x, h, k, static_cast<T>(kClamp));
  saved.tensors.push_back(x);
  saved.tensors.push_back(std::move(hidden));
  saved.tensors.push_back(std::move(h));
  return out;
}

namespace {

// Shared gradient core of the affine coupling. Given the layer input x, the
// conditioner output h = (r, t) and upstream dy, writes dx for the
// transformed channels into `dx` and returns dL/dh.
template <typename T>
Tensor<T> affine_local_grads(const Tensor<T>& dy, const Tensor<T>& x, const Tensor<T>& h,
                             std::span<const T> dlogdet, std::size_t k, T alpha, Tensor<T>& dx) {
  const Shape& s = x.shape();
  const std::size_t m = s.c - k;
  Tensor<T> dh(h.shape());
  const bool flip_shift = fault::active(fault::Site::CouplingShiftGradSign);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T dld = dlogdet[n];
    for (std::size_t j = 0; j < m; ++j) {
      const T* r = h.plane(n, j);
      const T* g = dy.plane(n, k + j);
      const T* in = x.plane(n, k + j);
      T* dxo = dx.plane(n, k + j);
      T* dr = dh.plane(n, j);
      T* dt = dh.plane(n, m + j);
      for (std::size_t p = 0; p < s.plane(); ++p) {
        const T th = std::tanh(r[p] / alpha);
        const T e = std::exp(alpha * th);
        dxo[p] = g[p] * e;
        const T ds = g[p] * in[p] * e + dld;
        dr[p] = ds * (T{1} - th * th);
        dt[p] = flip_shift ? -g[p] : g[p];
      }
    }
  }
  return dh;
}

}  // namespace

namespace {

// x from y given the conditioner output h = net(y1).
template <typename T>
Tensor<T> affine_reconstruct(const Tensor<T>& y, const Tensor<T>& h, std::size_t k, T alpha) {
  const Shape& s = y.shape();
  const std::size_t m = s.c - k;
  Tensor<T> x(s);
  copy_channels(y, x, 0, k);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t j = 0; j < m; ++j) {
      const T* r = h.plane(n, j);
      const T* t = h.plane(n, m + j);
      const T* in = y.plane(n, k + j);
      T* out = x.plane(n, k + j);
      for (std::size_t p = 0; p < s.plane(); ++p) {
        const T sc = alpha * std::tanh(r[p] / alpha);
        out[p] = static_cast<T>((static_cast<double>(in[p]) - t[p]) /
                                std::exp(static_cast<double>(sc)));
      }
    }
  }
  return x;
}

}  // namespace

template <typename T>
Tensor<T> AffineCoupling<T>::inverse(const Tensor<T>& y) const {
  this->check_input(y.shape());
  const std::size_t k = this->split_;
  const Tensor<T> h = this->net_.forward(channel_slice(y, 0, k));
  return affine_reconstruct(y, h, k, static_cast<T>(kClamp));
}

template <typename T>
LayerBackward<T> AffineCoupling<T>::backward(const Tensor<T>& dy, const Tensor<T>& y,
                                             std::span<const T> dlogdet) {
  this->check_input(y.shape());
  if (!(dy.shape() == y.shape())) throw ShapeError("affine coupling backward: dy/y mismatch");
  this->check_dlogdet(dlogdet, y.shape().n);
  const std::size_t k = this->split_;
  const T alpha = static_cast<T>(kClamp);
  // y1 == x1, so one conditioner evaluation serves both the inversion and the
  // local gradients; cond backward rebuilds its hidden activation itself.
  const Tensor<T> x1 = channel_slice(y, 0, k);
  LayerBackward<T> out;
  out.dx = Tensor<T>(y.shape());
  Tensor<T> dh;
  {
    const Tensor<T> h = this->net_.forward(x1);
    out.x = affine_reconstruct(y, h, k, alpha);
    dh = affine_local_grads(dy, out.x, h, dlogdet, k, alpha, out.dx);
  }
  copy_channels(dy, out.dx, 0, k);
  add_channels(out.dx, this->net_.backward(x1, dh), 0);
  return out;
}

template <typename T>
Tensor<T> AffineCoupling<T>::gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                                         std::span<const T> dlogdet) {
  const std::size_t k = this->split_;
  const Tensor<T> x1 = channel_slice(x, 0, k);
  Tensor<T> dx(x.shape());
  Tensor<T> dh = [&] {
    const Tensor<T> h = this->net_.forward(x1);
    return affine_local_grads(dy, x, h, dlogdet, k, static_cast<T>(kClamp), dx);
  }();
  copy_channels(dy, dx, 0, k);
  add_channels(dx, this->net_.backward(x1, dh), 0);
  return dx;
}

template <typename T>
Tensor<T> AffineCoupling<T>::backward_saved(const Tensor<T>& dy, SavedActivations<T>&& saved,
                                            std::span<const T> dlogdet) {
  if (saved.tensors.size() != 3) throw std::logic_error("affine coupling: bad saved activations");
  this->check_dlogdet(dlogdet, dy.shape().n);
  const std::size_t k = this->split_;
  const Tensor<T>& x = saved.tensors[0];
  Tensor<T> dx(x.shape());
  Tensor<T> dh =
      affine_local_grads(dy, x, saved.tensors[2], dlogdet, k, static_cast<T>(kClamp), dx);
  copy_channels(dy, dx, 0, k);
  add_channels(dx,
               this->net_.backward_from_hidden(channel_slice(x, 0, k), std::move(saved.tensors[1]),
                                               dh),
               0);
  return dx;
}

template <typename T>
AdditiveCoupling<T>::AdditiveCoupling(std::size_t channels, std::size_t hidden, Rng& rng)
    : CouplingBase<T>(checked_coupling_channels(channels, false), channels - channels / 2, hidden,
                      rng) {}

template <typename T>
LayerForward<T> AdditiveCoupling<T>::forward(const Tensor<T>& x) {
  this->check_input(x.shape());
  const Shape& s = x.shape();
  const std::size_t k = this->split_;
  const Tensor<T> t = this->net_.forward(channel_slice(x, 0, k));
  Tensor<T> y = x;
  add_channels(y, t, k);
  return {std::move(y), std::vector<T>(s.n, T{0})};
}

template <typename T>
Tensor<T> AdditiveCoupling<T>::inverse(const Tensor<T>& y) const {
  this->check_input(y.shape());
  const Shape& s = y.shape();
  const std::size_t k = this->split_;
  const Tensor<T> t = this->net_.forward(channel_slice(y, 0, k));
  Tensor<T> x = y;
  for (std::size_t n = 0; n < s.n; ++n) {
    T* d = x.plane(n, k);
    const T* p = t.plane(n, 0);
    for (std::size_t i = 0; i < t.shape().c * s.plane(); ++i) d[i] -= p[i];
  }
  return x;
}

template <typename T>
LayerBackward<T> AdditiveCoupling<T>::backward(const Tensor<T>& dy, const Tensor<T>& y,
                                               std::span<const T> dlogdet) {
  this->check_input(y.shape());
  if (!(dy.shape() == y.shape())) throw ShapeError("additive coupling backward: dy/y mismatch");
  this->check_dlogdet(dlogdet, y.shape().n);
  LayerBackward<T> out;
  out.x = inverse(y);
  out.dx = gradient_at(dy, out.x, dlogdet);
  return out;
}

template <typename T>
Tensor<T> AdditiveCoupling<T>::gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                                           std::span<const T> /*dlogdet*/) {
  const std::size_t k = this->split_;
  Tensor<T> dt = channel_slice(dy, k, dy.shape().c);
  if (fault::active(fault::Site::CouplingShiftGradSign)) dt = map(std::move(dt), Unary::neg());
  Tensor<T> dx = dy;
  add_channels(dx, this->net_.backward(channel_slice(x, 0, k), dt), 0);
  return dx;
}

template <typename T>
LayerForward<T> AdditiveCoupling<T>::forward_saving(const Tensor<T>& x,
                                                    SavedActivations<T>& saved) {
  this->check_input(x.shape());
  Tensor<T> x1 = channel_slice(x, 0, this->split_);
  Tensor<T> hidden = this->net_.hidden_activation(x1);
  Tensor<T> y = x;
  add_channels(y, this->net_.forward_from_hidden(hidden), this->split_);
  LayerForward<T> out{std::move(y), std::vector<T>(x.shape().n, T{0})};
  saved.tensors.push_back(std::move(x1));
  saved.tensors.push_back(std::move(hidden));
  return out;
}

template <typename T>
Tensor<T> AdditiveCoupling<T>::backward_saved(const Tensor<T>& dy, SavedActivations<T>&& saved,
                                              std::span<const T> dlogdet) {
  if (saved.tensors.size() != 2) throw std::logic_error("additive coupling: bad saved activations");
  this->check_dlogdet(dlogdet, dy.shape().n);
  const std::size_t k = this->split_;
  Tensor<T> dt = channel_slice(dy, k, dy.shape().c);
  if (fault::active(fault::Site::CouplingShiftGradSign)) dt = map(std::move(dt), Unary::neg());
  Tensor<T> dx = dy;
  add_channels(dx,
               this->net_.backward_from_hidden(saved.tensors[0], std::move(saved.tensors[1]), dt),
               0);
  return dx;
}

// ---------------------------------------------------------------------------
// Haar

template <typename T>
Tensor<T> haar_forward(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("haar: spatial dims must be even, got " + to_string(s));
  }
  const std::size_t oh = s.h / 2;
  const std::size_t ow = s.w / 2;
  Tensor<T> y(Shape{s.n, 4 * s.c, oh, ow});
  const T half = T{0.5};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* in = x.plane(n, c);
      T* a = y.plane(n, c);
      T* hh = y.plane(n, s.c + c);
      T* v = y.plane(n, 2 * s.c + c);
      T* d = y.plane(n, 3 * s.c + c);
      for (std::size_t i = 0; i < oh; ++i) {
        const T* r0 = in + 2 * i * s.w;
        const T* r1 = r0 + s.w;
        for (std::size_t j = 0; j < ow; ++j) {
          const T x00 = r0[2 * j];
          const T x01 = r0[2 * j + 1];
          const T x10 = r1[2 * j];
          const T x11 = r1[2 * j + 1];
          const std::size_t o = i * ow + j;
          a[o] = (x00 + x01 + x10 + x11) * half;
          hh[o] = (x00 - x01 + x10 - x11) * half;
          v[o] = (x00 + x01 - x10 - x11) * half;
          d[o] = (x00 - x01 - x10 + x11) * half;
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> haar_inverse(const Tensor<T>& y) {
  const Shape& s = y.shape();
  if (s.c % 4 != 0) {
    throw ShapeError("haar inverse: channel count must be a multiple of 4, got " + to_string(s));
  }
  const std::size_t c_in = s.c / 4;
  Tensor<T> x(Shape{s.n, c_in, 2 * s.h, 2 * s.w});
  const std::size_t w_out = 2 * s.w;
  const T half = T{0.5};
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < c_in; ++c) {
      const T* a = y.plane(n, c);
      const T* hh = y.plane(n, c_in + c);
      const T* v = y.plane(n, 2 * c_in + c);
      const T* d = y.plane(n, 3 * c_in + c);
      T* out = x.plane(n, c);
      for (std::size_t i = 0; i < s.h; ++i) {
        T* r0 = out + 2 * i * w_out;
        T* r1 = r0 + w_out;
        for (std::size_t j = 0; j < s.w; ++j) {
          const std::size_t o = i * s.w + j;
          r0[2 * j] = (a[o] + hh[o] + v[o] + d[o]) * half;
          r0[2 * j + 1] = (a[o] - hh[o] + v[o] - d[o]) * half;
          r1[2 * j] = (a[o] + hh[o] - v[o] - d[o]) * half;
          r1[2 * j + 1] = (a[o] - hh[o] - v[o] + d[o]) * half;
        }
      }
    }
  }
  return x;
}

template <typename T>
Shape HaarSqueeze<T>::output_shape(const Shape& in) const {
  if (in.h % 2 != 0 || in.w % 2 != 0) {
    throw ShapeError("haar: spatial dims must be even, got " + to_string(in));
  }
  return {in.n, 4 * in.c, in.h / 2, in.w / 2};
}

template <typename T>
LayerForward<T> HaarSqueeze<T>::forward(const Tensor<T>& x) {
  return {haar_forward(x), std::vector<T>(x.shape().n, T{0})};
}

template <typename T>
Tensor<T> HaarSqueeze<T>::inverse(const Tensor<T>& y) const {
  return haar_inverse(y);
}

template <typename T>
LayerBackward<T> HaarSqueeze<T>::backward(const Tensor<T>& dy, const Tensor<T>& y,
                                          std::span<const T> dlogdet) {
  if (!(dy.shape() == y.shape())) throw ShapeError("haar backward: dy/y mismatch");
  this->check_dlogdet(dlogdet, y.shape().n);
  // Orthonormal: the adjoint is the inverse.
  return {haar_inverse(dy), haar_inverse(y)};
}

template <typename T>
LayerForward<T> HaarSqueeze<T>::forward_saving(const Tensor<T>& x, SavedActivations<T>&) {
  return forward(x);
}

template <typename T>
Tensor<T> HaarSqueeze<T>::backward_saved(const Tensor<T>& dy, SavedActivations<T>&&,
                                         std::span<const T> dlogdet) {
  this->check_dlogdet(dlogdet, dy.shape().n);
  return haar_inverse(dy);
}

template <typename T>
Tensor<T> HaarSqueeze<T>::gradient_at(const Tensor<T>& dy, const Tensor<T>&,
                                      std::span<const T>) {
  return haar_inverse(dy);
}

// ---------------------------------------------------------------------------
// FactorOut

template <typename T>
FactorOut<T>::FactorOut(std::size_t channels) : channels_(channels), split_(channels / 2) {
  if (channels < 2) throw ShapeError("factor-out needs at least 2 channels");
}

template <typename T>
Shape FactorOut<T>::kept_shape(const Shape& in) const {
  return {in.n, split_, in.h, in.w};
}

template <typename T>
Shape FactorOut<T>::exit_shape(const Shape& in) const {
  return {in.n, in.c - split_, in.h, in.w};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> FactorOut<T>::split(const Tensor<T>& x) const {
  if (x.shape().c != channels_) {
    throw ShapeError("factor-out: expected " + std::to_string(channels_) + " channels, got " +
                     to_string(x.shape()));
  }
  return channel_split(x, split_);
}

template <typename T>
Tensor<T> FactorOut<T>::merge(const Tensor<T>& kept, const Tensor<T>& exited) const {
  if (kept.shape().c != split_ || exited.shape().c != channels_ - split_) {
    throw ShapeError("factor-out merge: got " + to_string(kept.shape()) + " and " +
                     to_string(exited.shape()));
  }
  return channel_concat(kept, exited);
}

#define REVFLOW_INSTANTIATE_LAYERS(T)                                  \
  template class InvertibleLayer<T>;                                   \
  template class ActNorm<T>;                                           \
  template class Inv1x1Conv<T>;                                        \
  template class CouplingBase<T>;                                      \
  template class AffineCoupling<T>;                                    \
  template class AdditiveCoupling<T>;                                  \
  template class HaarSqueeze<T>;                                       \
  template class FactorOut<T>;                                         \
  template Tensor<T> haar_forward(const Tensor<T>&);                   \
  template Tensor<T> haar_inverse(const Tensor<T>&);

REVFLOW_INSTANTIATE_LAYERS(float)
REVFLOW_INSTANTIATE_LAYERS(double)

}  // namespace revflow
