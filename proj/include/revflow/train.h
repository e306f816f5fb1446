#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "revflow/flow.h"
#include "revflow/parameter.h"
#include "revflow/rng.h"
#include "revflow/tensor.h"

namespace revflow {

/// Negative log-likelihood in nats under a standard normal base density.
template <typename T>
struct NllResult {
  std::vector<double> per_sample;
  double mean = 0.0;
  /// d nll_n / d z: equal to z.
  std::vector<Tensor<T>> dz;
  /// d nll_n / d logdet_n: all -1.
  std::vector<T> dlogdet;
};

/// nll_n = 0.5 |z_n|^2 + 0.5 D log(2 pi) - logdet_n, D = latent dims per sample.
/// Throws DivergenceError if any latent or logdet value is non-finite.
template <typename T>
NllResult<T> nll(const LatentBundle<T>& bundle);

/// Per-sample NLL only; no gradient buffers.
template <typename T>
std::vector<double> nll_values(const LatentBundle<T>& bundle);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Moment buffers are created on the first step and
/// matched to parameters by position.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one update and zeroes the gradients. If any gradient entry is
  /// non-finite the update is skipped (t unchanged), gradients are zeroed and
  /// false is returned.
  bool step(std::span<Parameter<T>* const> params);

  std::uint64_t t() const noexcept { return t_; }
  void set_t(std::uint64_t t) noexcept { t_ = t; }
  const AdamConfig& config() const noexcept { return config_; }
  std::size_t state_bytes() const;

 private:
  AdamConfig config_;
  std::uint64_t t_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

/// Global L2 norm of all gradients, accumulated in a fixed order.
template <typename T>
double grad_norm(std::span<Parameter<T>* const> params);

/// Rescales gradients so their global norm is at most max_norm. Returns the
/// norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm);

template <typename T>
void scale_grads(std::span<Parameter<T>* const> params, double factor);

/// Names accepted by generate_toy besides "blobs{S}".
std::span<const std::string_view> toy_dataset_names();

/// Image edge length for "blobs{S}", nullopt for any other name.
std::optional<std::size_t> blobs_size(std::string_view name);

/// True for the 2-D point datasets.
bool is_point_dataset(std::string_view name);

/// Deterministic synthetic data.
///
/// two_moons, eight_gaussians, checkerboard -> (n, 2, 1, 1), standardized to
/// zero mean and unit variance using the generators' analytic moments unless
/// `standardize` is false. blobs{S} -> (n, 3, S, S) smooth colored blobs plus
/// noise. Throws std::invalid_argument on an unknown name.
template <typename T>
Tensor<T> generate_toy(std::string_view name, std::size_t n, Rng& rng, bool standardize = true);

enum class Engine { Recompute, Store };

std::string_view to_string(Engine engine);
Engine parse_engine(std::string_view name);

struct TrainConfig {
  std::string dataset;
  std::size_t batch = 8;
  /// Image edge length; ignored by the point datasets. Defaults to the S in blobs{S}.
  std::size_t size = 0;
  std::size_t scales = 2;
  std::size_t steps = 4;
  CouplingKind coupling = CouplingKind::Affine;
  std::size_t hidden = 64;
  double lr = 1e-3;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
  double clip = 10.0;
  Engine engine = Engine::Recompute;
  /// Held-out samples for the initial/final NLL report; 0 picks 512 for
  /// point datasets and 4 batches for images.
  std::size_t eval_size = 0;
  /// Record wall-clock time in the metrics; off makes metrics bit-reproducible.
  bool timing = true;
  std::filesystem::path checkpoint_path;
  std::filesystem::path metrics_path;

  /// Throws std::invalid_argument on an invalid combination.
  void validate() const;
  /// Flow architecture implied by the dataset (point datasets force scales = 0).
  FlowConfig flow_config() const;
};

struct MetricsRow {
  std::size_t iter = 0;
  double nll = 0.0;
  double grad_norm = 0.0;
  std::size_t peak_bytes = 0;
  double wall_ms = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "iter,nll,grad_norm,peak_bytes,wall_ms";

std::string format_metrics_row(const MetricsRow& row);

struct TrainResult {
  std::vector<MetricsRow> metrics;
  /// Eval-set mean NLL after the first forward pass (actnorm initialized) and
  /// before any update; NaN when no iteration ran.
  double initial_eval_nll = 0.0;
  double final_eval_nll = 0.0;
  std::size_t skipped_steps = 0;
};

/// Builds the model, runs `iterations` Adam steps on fresh batches, writes the
/// metrics CSV and the checkpoint when their paths are set. Throws
/// DivergenceError on a non-finite loss.
template <typename T>
TrainResult train_loop(const TrainConfig& config,
                       const std::function<void(const MetricsRow&)>& on_row = {});

/// Mean NLL of `data` evaluated in chunks of `chunk` samples.
template <typename T>
double evaluate_nll(FlowModel<T>& model, const Tensor<T>& data, std::size_t chunk);

}  // namespace revflow
