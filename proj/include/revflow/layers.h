#pragma once

#include <cstddef>
#include <mutex>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "revflow/conditioner.h"
#include "revflow/linalg.h"
#include "revflow/parameter.h"
#include "revflow/tensor.h"

namespace revflow {

template <typename T>
struct LayerForward {
  Tensor<T> y;
  std::vector<T> logdet;  // one entry per sample
};

template <typename T>
struct LayerBackward {
  Tensor<T> dx;
  Tensor<T> x;  // input reconstructed from the output
};

/// Activations kept for one layer by the store-all engine.
template <typename T>
struct SavedActivations {
  std::vector<Tensor<T>> tensors;

  std::size_t bytes() const {
    std::size_t b = 0;
    for (const auto& t : tensors) b += t.bytes();
    return b;
  }
};

/// Contract shared by every invertible layer.
///
/// forward(x) -> (y, logdet); inverse(y) -> x;
/// backward(dy, y, dlogdet) -> (dx, x): rebuilds x from the OUTPUT y, then
/// adds parameter gradients of L = <dy, y> + sum_n dlogdet_n * logdet_n.
template <typename T>
class InvertibleLayer {
 public:
  virtual ~InvertibleLayer() = default;

  virtual std::string_view kind() const = 0;
  virtual Shape output_shape(const Shape& in) const = 0;

  virtual LayerForward<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> inverse(const Tensor<T>& y) const = 0;

  /// Recompute-mode backward: the layer input is never needed.
  virtual LayerBackward<T> backward(const Tensor<T>& dy, const Tensor<T>& y,
                                    std::span<const T> dlogdet);

  /// Store-all forward: records what an autodiff tape would keep.
  virtual LayerForward<T> forward_saving(const Tensor<T>& x, SavedActivations<T>& saved);
  virtual Tensor<T> backward_saved(const Tensor<T>& dy, SavedActivations<T>&& saved,
                                   std::span<const T> dlogdet);

  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  std::vector<const Parameter<T>*> parameters() const;

  /// Long-lived non-parameter payload owned by the layer.
  virtual std::size_t cache_bytes() const { return 0; }

 protected:
  /// dL/dx at a known input x; adds parameter gradients.
  virtual Tensor<T> gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                                std::span<const T> dlogdet) = 0;

  void check_dlogdet(std::span<const T> dlogdet, std::size_t batch) const;
};

/// Per-channel affine map y = s * x + b with data-dependent initialization on
/// the first forward call.
template <typename T>
class ActNorm final : public InvertibleLayer<T> {
 public:
  explicit ActNorm(std::size_t channels);

  std::string_view kind() const override { return "actnorm"; }
  Shape output_shape(const Shape& in) const override;

  LayerForward<T> forward(const Tensor<T>& x) override;
  Tensor<T> inverse(const Tensor<T>& y) const override;
  LayerForward<T> forward_saving(const Tensor<T>& x, SavedActivations<T>& saved) override;

  /// Sets s = 1/std_c, b = -mean_c/std_c from x. Throws DegenerateDataError
  /// when a channel has zero variance.
  void initialize_from(const Tensor<T>& x);
  /// Presets the parameters and marks the layer initialized.
  void set(std::span<const T> scale, std::span<const T> bias);
  bool initialized() const noexcept { return initialized_; }
  void set_initialized(bool v) noexcept { initialized_ = v; }

  const Tensor<T>& scale() const noexcept { return scale_.value; }
  const Tensor<T>& bias() const noexcept { return bias_.value; }

  std::vector<Parameter<T>*> parameters() override { return {&scale_, &bias_}; }

 protected:
  Tensor<T> gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                        std::span<const T> dlogdet) override;

 private:
  void check_input(const Shape& s) const;
  std::vector<T> logdet(const Shape& s) const;

  std::size_t channels_;
  Parameter<T> scale_;
  Parameter<T> bias_;
  bool initialized_ = false;
};

/// GLOW invertible 1x1 convolution: per-pixel multiply by a dense c x c matrix.
/// W is stored directly and LU-factorized in double on demand; the
/// factorization is cached until W's version changes.
template <typename T>
class Inv1x1Conv final : public InvertibleLayer<T> {
 public:
  /// W starts as the orthogonal factor of a Gaussian matrix's QR decomposition.
  Inv1x1Conv(std::size_t channels, Rng& rng);

  std::string_view kind() const override { return "inv1x1"; }
  Shape output_shape(const Shape& in) const override;

  LayerForward<T> forward(const Tensor<T>& x) override;
  Tensor<T> inverse(const Tensor<T>& y) const override;

  /// Replaces W (shape (c, c, 1, 1)).
  void set_weight(std::span<const T> w);
  const Tensor<T>& weight() const noexcept { return weight_.value; }
  /// log|det W|; throws SingularMatrixError when |det W| <= 1e-30.
  double log_abs_det() const;

  std::vector<Parameter<T>*> parameters() override { return {&weight_}; }
  std::size_t cache_bytes() const override { return lu_.lu.bytes(); }

 protected:
  Tensor<T> gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                        std::span<const T> dlogdet) override;

 private:
  void check_input(const Shape& s) const;
  const LuFactors<double>& factors() const;

  std::size_t channels_;
  Parameter<T> weight_;
  mutable std::mutex lu_mutex_;
  mutable LuFactors<double> lu_;
  mutable std::uint64_t lu_version_ = 0;
  mutable bool lu_valid_ = false;
};

/// Shared machinery of the two coupling variants: channels [0, k) pass
/// through and condition the transform of channels [k, c).
template <typename T>
class CouplingBase : public InvertibleLayer<T> {
 public:
  Shape output_shape(const Shape& in) const override;
  std::size_t split() const noexcept { return split_; }
  Conditioner<T>& conditioner() noexcept { return net_; }
  const Conditioner<T>& conditioner() const noexcept { return net_; }
  std::vector<Parameter<T>*> parameters() override { return net_.parameters(); }

 protected:
  CouplingBase(std::size_t channels, std::size_t cond_out, std::size_t hidden, Rng& rng);
  void check_input(const Shape& s) const;

  std::size_t channels_;
  std::size_t split_;
  Conditioner<T> net_;
};

/// y2 = exp(s) * x2 + t with s = alpha * tanh(r / alpha), (r, t) = net(x1).
template <typename T>
class AffineCoupling final : public CouplingBase<T> {
 public:
  static constexpr double kClamp = 2.0;

  AffineCoupling(std::size_t channels, std::size_t hidden, Rng& rng);

  std::string_view kind() const override { return "affine_coupling"; }

  LayerForward<T> forward(const Tensor<T>& x) override;
  Tensor<T> inverse(const Tensor<T>& y) const override;
  LayerBackward<T> backward(const Tensor<T>& dy, const Tensor<T>& y,
                            std::span<const T> dlogdet) override;
  LayerForward<T> forward_saving(const Tensor<T>& x, SavedActivations<T>& saved) override;
  Tensor<T> backward_saved(const Tensor<T>& dy, SavedActivations<T>&& saved,
                           std::span<const T> dlogdet) override;

 protected:
  Tensor<T> gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                        std::span<const T> dlogdet) override;
};

/// y2 = x2 + t(x1); volume preserving.
template <typename T>
class AdditiveCoupling final : public CouplingBase<T> {
 public:
  AdditiveCoupling(std::size_t channels, std::size_t hidden, Rng& rng);

  std::string_view kind() const override { return "additive_coupling"; }

  LayerForward<T> forward(const Tensor<T>& x) override;
  Tensor<T> inverse(const Tensor<T>& y) const override;
  LayerBackward<T> backward(const Tensor<T>& dy, const Tensor<T>& y,
                            std::span<const T> dlogdet) override;
  LayerForward<T> forward_saving(const Tensor<T>& x, SavedActivations<T>& saved) override;
  Tensor<T> backward_saved(const Tensor<T>& dy, SavedActivations<T>&& saved,
                           std::span<const T> dlogdet) override;

 protected:
  Tensor<T> gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                        std::span<const T> dlogdet) override;
};

/// Orthonormal 2x2 Haar transform used as the squeeze of each scale.
///
/// Output channels are grouped by subband: [a | h | v | d], each block
/// holding every input channel in order, at half the spatial resolution.
template <typename T>
class HaarSqueeze final : public InvertibleLayer<T> {
 public:
  std::string_view kind() const override { return "haar"; }
  Shape output_shape(const Shape& in) const override;

  LayerForward<T> forward(const Tensor<T>& x) override;
  Tensor<T> inverse(const Tensor<T>& y) const override;
  LayerBackward<T> backward(const Tensor<T>& dy, const Tensor<T>& y,
                            std::span<const T> dlogdet) override;
  LayerForward<T> forward_saving(const Tensor<T>& x, SavedActivations<T>& saved) override;
  Tensor<T> backward_saved(const Tensor<T>& dy, SavedActivations<T>&& saved,
                           std::span<const T> dlogdet) override;

 protected:
  Tensor<T> gradient_at(const Tensor<T>& dy, const Tensor<T>& x,
                        std::span<const T> dlogdet) override;
};

template <typename T>
Tensor<T> haar_forward(const Tensor<T>& x);
template <typename T>
Tensor<T> haar_inverse(const Tensor<T>& y);

/// Multiscale split: channels [0, k) continue through the flow, [k, c) exit
/// to the latent representation. k = c / 2. Volume preserving.
template <typename T>
class FactorOut {
 public:
  explicit FactorOut(std::size_t channels);

  std::size_t channels() const noexcept { return channels_; }
  Shape kept_shape(const Shape& in) const;
  Shape exit_shape(const Shape& in) const;

  std::pair<Tensor<T>, Tensor<T>> split(const Tensor<T>& x) const;
  Tensor<T> merge(const Tensor<T>& kept, const Tensor<T>& exited) const;

 private:
  std::size_t channels_;
  std::size_t split_;
};

#define REVFLOW_EXTERN_LAYERS(T)              \
  extern template class InvertibleLayer<T>;   \
  extern template class ActNorm<T>;           \
  extern template class Inv1x1Conv<T>;        \
  extern template class CouplingBase<T>;      \
  extern template class AffineCoupling<T>;    \
  extern template class AdditiveCoupling<T>;  \
  extern template class HaarSqueeze<T>;       \
  extern template class FactorOut<T>;

REVFLOW_EXTERN_LAYERS(float)
REVFLOW_EXTERN_LAYERS(double)
#undef REVFLOW_EXTERN_LAYERS

}  // namespace revflow
