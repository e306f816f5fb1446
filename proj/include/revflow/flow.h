#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "revflow/layers.h"
#include "revflow/rng.h"
#include "revflow/tensor.h"

namespace revflow {

enum class CouplingKind { Affine, Additive };

std::string_view to_string(CouplingKind kind);
/// "affine" | "additive"; throws std::invalid_argument otherwise.
CouplingKind parse_coupling(std::string_view name);

/// Architecture of a multiscale flow.
///
/// Each scale is [HaarSqueeze, K x (ActNorm, Inv1x1Conv, Coupling), FactorOut]
/// and the last scale drops the FactorOut. With scales == 0 the flow is just
/// the K steps at the input resolution (used for 2-D toy data).
struct FlowConfig {
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t scales = 2;
  std::size_t steps = 4;
  CouplingKind coupling = CouplingKind::Affine;
  std::size_t hidden = 64;

  /// Throws std::invalid_argument on an inconsistent architecture.
  void validate() const;

  friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

/// Output of a whole-model forward pass.
template <typename T>
struct LatentBundle {
  /// Factored-out parts in scale order, then the final tensor.
  std::vector<Tensor<T>> parts;
  /// Per-sample total log-determinant.
  std::vector<T> logdet;
  /// Model generation at the time of the forward pass.
  std::uint64_t generation = 0;

  std::size_t batch() const { return parts.empty() ? 0 : parts.front().shape().n; }
  std::size_t numel() const;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Parameter<T>* param;
};

template <typename T>
class FlowModel {
 public:
  /// One entry of the flat layer list. Exactly one of the members is set.
  struct Stage {
    std::unique_ptr<InvertibleLayer<T>> layer;
    std::optional<FactorOut<T>> factor;
  };

  FlowModel(const FlowConfig& config, Rng& rng);

  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;
  FlowModel(FlowModel&&) noexcept = default;
  FlowModel& operator=(FlowModel&&) noexcept = default;

  const FlowConfig& config() const noexcept { return config_; }
  Shape input_shape(std::size_t batch) const;
  std::vector<Shape> latent_shapes(std::size_t batch) const;
  /// Latent elements per sample; equals the input elements per sample.
  std::size_t latent_dims() const;

  std::vector<Stage>& stages() noexcept { return stages_; }
  const std::vector<Stage>& stages() const noexcept { return stages_; }

  /// Parameters named "layer{i}.{param}", i indexing stages().
  std::vector<NamedParameter<T>> named_parameters();
  std::vector<Parameter<T>*> parameters();

  /// Indices of ActNorm stages.
  std::vector<std::size_t> actnorm_stages() const;
  bool initialized() const;

  void zero_grad();
  /// Bytes of parameter values, gradients and layer caches.
  std::size_t parameter_bytes() const;
  /// Sum of parameter versions: changes whenever any parameter is mutated.
  std::uint64_t generation() const;

 private:
  FlowConfig config_;
  std::vector<Stage> stages_;
};

/// Runs every layer, releasing each activation once the next layer has it.
template <typename T>
LatentBundle<T> model_forward(FlowModel<T>& model, const Tensor<T>& x);

/// Inverse map from a bundle (logdet ignored). Throws ShapeError on a wrong
/// part count or part shape.
template <typename T>
Tensor<T> model_inverse(const FlowModel<T>& model, const LatentBundle<T>& bundle);

/// Recompute-mode gradient: walks the layers in reverse keeping only the
/// current (y, dy) boundary, reconstructing each layer's input by inversion.
/// Consumes the bundle and dz. Parameter gradients are accumulated. Throws
/// StaleBundleError if parameters changed after the forward pass.
template <typename T>
Tensor<T> model_grad_recompute(FlowModel<T>& model, LatentBundle<T> bundle,
                               std::vector<Tensor<T>> dz, std::span<const T> dlogdet);

/// Activations an autodiff tape would hold, one entry per stage.
template <typename T>
struct Tape {
  std::vector<SavedActivations<T>> saved;
  std::uint64_t generation = 0;
  std::size_t bytes() const;
};

template <typename T>
struct Recording {
  LatentBundle<T> bundle;
  Tape<T> tape;
};

/// Store-all forward: like model_forward but keeps every activation needed
/// by backward.
template <typename T>
Recording<T> model_forward_recording(FlowModel<T>& model, const Tensor<T>& x);

/// Store-all backward from a tape, freeing each entry once used.
template <typename T>
Tensor<T> model_grad_from_tape(FlowModel<T>& model, Tape<T> tape, std::vector<Tensor<T>> dz,
                               std::span<const T> dlogdet);

/// Store-all gradient in one call: recording forward on x, then backward.
template <typename T>
Tensor<T> model_grad_store(FlowModel<T>& model, const Tensor<T>& x, std::vector<Tensor<T>> dz,
                           std::span<const T> dlogdet);

/// Draws every latent part i.i.d. standard normal and inverts.
template <typename T>
Tensor<T> sample(const FlowModel<T>& model, std::size_t n, Rng& rng);

extern template class FlowModel<float>;
extern template class FlowModel<double>;

}  // namespace revflow
