#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "revflow/checkpoint.h"
#include "revflow/errors.h"
#include "revflow/kernels.h"
#include "revflow/memory_meter.h"
#include "revflow/train.h"

namespace revflow {

namespace {

// Independent streams for data and the held-out set, derived from the run seed.
constexpr std::uint64_t kDataStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kEvalStream = 0xd1b54a32d192ed03ULL;

constexpr std::size_t kPointEvalSize = 512;
constexpr std::size_t kImageEvalBatches = 4;

}  // namespace

std::string_view to_string(Engine engine) {
  return engine == Engine::Recompute ? "recompute" : "store";
}

Engine parse_engine(std::string_view name) {
  if (name == "recompute") return Engine::Recompute;
  if (name == "store") return Engine::Store;
  throw std::invalid_argument("unknown engine '" + std::string(name) +
                              "' (expected recompute or store)");
}

void TrainConfig::validate() const {
  if (dataset.empty()) throw std::invalid_argument("dataset is required");
  const bool point = is_point_dataset(dataset);
  const auto image = blobs_size(dataset);
  if (!point && !image) throw std::invalid_argument("unknown dataset '" + dataset + "'");
  if (batch == 0) throw std::invalid_argument("batch must be >= 1");
  if (point && batch < 2) {
    throw std::invalid_argument("point datasets need batch >= 2 for actnorm initialization");
  }
  if (image && size != 0 && size != *image) {
    throw std::invalid_argument("size " + std::to_string(size) + " conflicts with dataset " +
                                dataset);
  }
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be positive");
  if (!(clip > 0.0)) throw std::invalid_argument("clip must be positive");
  flow_config().validate();
}

FlowConfig TrainConfig::flow_config() const {
  FlowConfig f;
  f.steps = steps;
  f.coupling = coupling;
  f.hidden = hidden;
  if (is_point_dataset(dataset)) {
    f.channels = 2;
    f.height = 1;
    f.width = 1;
    f.scales = 0;
  } else {
    const std::size_t s = blobs_size(dataset).value_or(size);
    f.channels = 3;
    f.height = s;
    f.width = s;
    f.scales = scales;
  }
  return f;
}

std::string format_metrics_row(const MetricsRow& row) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%zu,%.3f", row.iter, row.nll, row.grad_norm,
                row.peak_bytes, row.wall_ms);
  return buf;
}

template <typename T>
double evaluate_nll(FlowModel<T>& model, const Tensor<T>& data, std::size_t chunk) {
  const Shape& s = data.shape();
  if (chunk == 0) chunk = s.n;
  const std::size_t per = s.c * s.h * s.w;
  double total = 0.0;
  for (std::size_t start = 0; start < s.n; start += chunk) {
    const std::size_t m = std::min(chunk, s.n - start);
    const Tensor<T> x = Tensor<T>::from_values(
        Shape{m, s.c, s.h, s.w}, data.values().subspan(start * per, m * per));
    for (double v : nll_values(model_forward(model, x))) total += v;
  }
  return total / static_cast<double>(s.n);
}

template <typename T>
TrainResult train_loop(const TrainConfig& config,
                       const std::function<void(const MetricsRow&)>& on_row) {
  config.validate();
  Rng model_rng(config.seed);
  FlowModel<T> model(config.flow_config(), model_rng);
  Adam<T> adam(AdamConfig{config.lr});
  Rng data_rng(config.seed ^ kDataStream);
  Rng eval_rng(config.seed ^ kEvalStream);

  const bool point = is_point_dataset(config.dataset);
  std::size_t eval_n = config.eval_size;
  if (eval_n == 0) eval_n = point ? kPointEvalSize : kImageEvalBatches * config.batch;
  const Tensor<T> eval = generate_toy<T>(config.dataset, eval_n, eval_rng);

  std::ofstream metrics;
  if (!config.metrics_path.empty()) {
    if (config.metrics_path.has_parent_path()) {
      std::filesystem::create_directories(config.metrics_path.parent_path());
    }
    metrics.open(config.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write " + config.metrics_path.string());
    metrics << kMetricsHeader << '\n';
  }

  TrainResult result;
  result.initial_eval_nll = std::numeric_limits<double>::quiet_NaN();
  result.final_eval_nll = std::numeric_limits<double>::quiet_NaN();
  const std::vector<Parameter<T>*> params = model.parameters();
  MemoryMeter& meter = MemoryMeter::global();

  for (std::size_t it = 0; it < config.iterations; ++it) {
    const Tensor<T> x = generate_toy<T>(config.dataset, config.batch, data_rng);
    const std::size_t base = meter.live();
    meter.reset_peak();
    const auto t0 = std::chrono::steady_clock::now();

    double mean_nll = 0.0;
    try {
      if (config.engine == Engine::Recompute) {
        LatentBundle<T> bundle = model_forward(model, x);
        NllResult<T> r = nll(bundle);
        mean_nll = r.mean;
        model_grad_recompute(model, std::move(bundle), std::move(r.dz),
                             std::span<const T>(r.dlogdet));
      } else {
        Recording<T> rec = model_forward_recording(model, x);
        NllResult<T> r = nll(rec.bundle);
        mean_nll = r.mean;
        rec.bundle.parts.clear();
        model_grad_from_tape(model, std::move(rec.tape), std::move(r.dz),
                             std::span<const T>(r.dlogdet));
      }
    } catch (const DivergenceError& e) {
      throw DivergenceError("training diverged at iteration " + std::to_string(it) + ": " +
                            e.what());
    }
    const std::size_t peak = meter.peak() - base;

    scale_grads<T>(params, 1.0 / static_cast<double>(config.batch));
    const double norm = clip_grad_norm<T>(params, config.clip);
    if (it == 0) result.initial_eval_nll = evaluate_nll(model, eval, config.batch);
    if (!adam.step(params)) ++result.skipped_steps;

    MetricsRow row;
    row.iter = it;
    row.nll = mean_nll;
    row.grad_norm = norm;
    row.peak_bytes = peak;
    if (config.timing) {
      row.wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    if (metrics.is_open()) metrics << format_metrics_row(row) << '\n' << std::flush;
    if (on_row) on_row(row);
    result.metrics.push_back(row);
  }

  if (config.iterations > 0) {
    result.final_eval_nll = evaluate_nll(model, eval, config.batch);
    if (!std::isfinite(result.final_eval_nll)) {
      throw DivergenceError("final evaluation produced a non-finite NLL");
    }
  }

  if (!config.checkpoint_path.empty()) {
    if (config.checkpoint_path.has_parent_path()) {
      std::filesystem::create_directories(config.checkpoint_path.parent_path());
    }
    CheckpointInfo info;
    info.optimizer = adam.config();
    info.step = adam.t();
    info.seed = config.seed;
    info.dataset = config.dataset;
    save_checkpoint(config.checkpoint_path, model, info);
  }
  return result;
}

template double evaluate_nll(FlowModel<float>&, const Tensor<float>&, std::size_t);
template double evaluate_nll(FlowModel<double>&, const Tensor<double>&, std::size_t);
template TrainResult train_loop<float>(const TrainConfig&,
                                       const std::function<void(const MetricsRow&)>&);
template TrainResult train_loop<double>(const TrainConfig&,
                                        const std::function<void(const MetricsRow&)>&);

}  // namespace revflow
