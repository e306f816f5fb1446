#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "revflow/flow.h"
#include "revflow/train.h"

namespace revflow {

enum class BenchStatus { Ok, Oom };

std::string_view to_string(BenchStatus status);

struct BenchRecord {
  Engine mode = Engine::Recompute;
  std::size_t depth = 0;
  std::size_t size = 0;
  std::size_t batch = 0;
  /// Maximum metered bytes owned by the step: parameters, gradients, layer
  /// caches, the input batch and every temporary.
  std::size_t peak_bytes = 0;
  /// Resident model bytes (parameters, gradients, caches).
  std::size_t param_bytes = 0;
  double wall_ms = 0.0;
  BenchStatus status = BenchStatus::Ok;

  std::size_t activation_bytes() const { return peak_bytes - param_bytes; }
};

inline constexpr std::string_view kBenchHeader =
    "mode,depth,size,batch,peak_bytes,param_bytes,wall_ms,status";

/// One forward pass plus one gradient computation (no parameter update) with
/// the given engine. When `budget` is set, the step may hold at most that
/// many bytes (counted as peak_bytes); exceeding it unwinds and yields
/// status oom. Gradients are zeroed before returning.
template <typename T>
BenchRecord measure_step(FlowModel<T>& model, const Tensor<T>& x, Engine engine,
                         std::optional<std::size_t> budget = std::nullopt, bool timing = true);

struct BenchOptions {
  std::size_t channels = 3;
  std::size_t batch = 8;
  std::size_t scales = 2;
  std::size_t hidden = 64;
  CouplingKind coupling = CouplingKind::Affine;
  std::uint64_t seed = 0;
  bool timing = true;
};

/// Both engines at a fixed input size across depths (recompute rows first).
template <typename T>
std::vector<BenchRecord> sweep_depth(const BenchOptions& options,
                                     const std::vector<std::size_t>& depths = {2, 4, 8, 16, 32},
                                     std::size_t size = 64);

/// Budget for sweep_size: none, a fixed byte count, or `factor` times the
/// recompute peak at the largest size (measured in a calibration pass).
struct BudgetSpec {
  std::optional<std::size_t> bytes;
  std::optional<double> auto_factor;
};

template <typename T>
std::vector<BenchRecord> sweep_size(const BenchOptions& options,
                                    const std::vector<std::size_t>& sizes = {16, 32, 64, 128},
                                    std::size_t depth = 8, const BudgetSpec& budget = {});

struct DepthLaw {
  double recompute_ratio = 0.0;
  double store_ratio = 0.0;
  bool pass = false;
};

/// Activation-byte ratios between the deepest and shallowest ok rows.
/// Pass: recompute in [0.95, 1.10] and store >= 2.
DepthLaw depth_law(const std::vector<BenchRecord>& records);

struct SizeLaw {
  /// Recompute activation ratio between consecutive sizes.
  std::vector<double> ratios;
  bool ratios_pass = false;
  /// Recompute finished at the largest size while store hit the budget.
  bool oom_contrast = false;
};

/// Pass: every ratio is (pixel ratio) x [0.75, 1.25].
SizeLaw size_law(const std::vector<BenchRecord>& records);

/// "depth-law ratio: 1.00x PASS"
std::string depth_summary(const DepthLaw& law);
std::string size_summary(const SizeLaw& law);

void write_bench_csv(std::ostream& os, const std::vector<BenchRecord>& records);
void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRecord>& records);

/// Whitespace-separated data with one block per engine (`index 0` recompute,
/// `index 1` store); x is depth or size, y is activation MiB. oom rows are
/// written as comments.
void write_gnuplot(const std::filesystem::path& path, const std::vector<BenchRecord>& records,
                   bool by_depth);

}  // namespace revflow
