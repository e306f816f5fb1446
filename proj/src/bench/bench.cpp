#include "revflow/bench.h"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "revflow/memory_meter.h"

namespace revflow {

std::string_view to_string(BenchStatus status) {
  return status == BenchStatus::Ok ? "ok" : "oom";
}

template <typename T>
BenchRecord measure_step(FlowModel<T>& model, const Tensor<T>& x, Engine engine,
                         std::optional<std::size_t> budget, bool timing) {
  MemoryMeter& meter = MemoryMeter::global();
  BenchRecord rec;
  rec.mode = engine;
  rec.depth = model.config().steps;
  rec.size = x.shape().h;
  rec.batch = x.shape().n;
  rec.param_bytes = model.parameter_bytes();

  // Bytes held by the caller beyond the model and the input.
  const std::size_t owned = rec.param_bytes + x.bytes();
  const std::size_t live_before = meter.live();
  const std::size_t foreign = live_before > owned ? live_before - owned : 0;

  model.zero_grad();
  meter.reset_peak();
  const auto t0 = std::chrono::steady_clock::now();
  try {
    std::optional<ScopedMemoryLimit> limit;
    if (budget) limit.emplace(foreign + *budget);
    const std::vector<T> dlogdet(x.shape().n, T{-1});
    if (engine == Engine::Recompute) {
      LatentBundle<T> bundle = model_forward(model, x);
      std::vector<Tensor<T>> dz = bundle.parts;
      model_grad_recompute(model, std::move(bundle), std::move(dz), std::span<const T>(dlogdet));
    } else {
      Recording<T> r = model_forward_recording(model, x);
      std::vector<Tensor<T>> dz = std::move(r.bundle.parts);
      model_grad_from_tape(model, std::move(r.tape), std::move(dz), std::span<const T>(dlogdet));
    }
  } catch (const BudgetExceeded&) {
    rec.status = BenchStatus::Oom;
  }
  if (timing) {
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  rec.peak_bytes = meter.peak() - foreign;
  model.zero_grad();
  return rec;
}

namespace {

template <typename T>
BenchRecord run_config(const BenchOptions& o, std::size_t depth, std::size_t size, Engine engine,
                       std::optional<std::size_t> budget) {
  FlowConfig cfg;
  cfg.channels = o.channels;
  cfg.height = size;
  cfg.width = size;
  cfg.scales = o.scales;
  cfg.steps = depth;
  cfg.coupling = o.coupling;
  cfg.hidden = o.hidden;
  Rng rng(o.seed);
  FlowModel<T> model(cfg, rng);
  const Tensor<T> x = o.channels == 3
                          ? generate_toy<T>("blobs" + std::to_string(size), o.batch, rng)
                          : Tensor<T>::randn(model.input_shape(o.batch), rng);
  return measure_step(model, x, engine, budget, o.timing);
}

const BenchRecord* find(const std::vector<BenchRecord>& records, Engine mode, bool deepest,
                        bool by_depth) {
  const BenchRecord* best = nullptr;
  for (const auto& r : records) {
    if (r.mode != mode || r.status != BenchStatus::Ok) continue;
    const std::size_t key = by_depth ? r.depth : r.size;
    if (best == nullptr) {
      best = &r;
      continue;
    }
    const std::size_t best_key = by_depth ? best->depth : best->size;
    if (deepest ? key > best_key : key < best_key) best = &r;
  }
  return best;
}

}  // namespace

template <typename T>
std::vector<BenchRecord> sweep_depth(const BenchOptions& options,
                                     const std::vector<std::size_t>& depths, std::size_t size) {
  std::vector<BenchRecord> out;
  for (Engine e : {Engine::Recompute, Engine::Store}) {
    for (std::size_t k : depths) out.push_back(run_config<T>(options, k, size, e, std::nullopt));
  }
  return out;
}

template <typename T>
std::vector<BenchRecord> sweep_size(const BenchOptions& options,
                                    const std::vector<std::size_t>& sizes, std::size_t depth,
                                    const BudgetSpec& budget) {
  if (sizes.empty()) return {};
  std::optional<std::size_t> limit = budget.bytes;
  if (!limit && budget.auto_factor) {
    const std::size_t largest = *std::max_element(sizes.begin(), sizes.end());
    const BenchRecord calib =
        run_config<T>(options, depth, largest, Engine::Recompute, std::nullopt);
    limit = static_cast<std::size_t>(*budget.auto_factor * static_cast<double>(calib.peak_bytes));
  }
  std::vector<BenchRecord> out;
  for (Engine e : {Engine::Recompute, Engine::Store}) {
    for (std::size_t s : sizes) out.push_back(run_config<T>(options, depth, s, e, limit));
  }
  return out;
}

DepthLaw depth_law(const std::vector<BenchRecord>& records) {
  DepthLaw law;
  auto ratio = [&](Engine mode) {
    const BenchRecord* lo = find(records, mode, false, true);
    const BenchRecord* hi = find(records, mode, true, true);
    if (lo == nullptr || hi == nullptr || lo == hi) return 0.0;
    return static_cast<double>(hi->activation_bytes()) /
           static_cast<double>(lo->activation_bytes());
  };
  law.recompute_ratio = ratio(Engine::Recompute);
  law.store_ratio = ratio(Engine::Store);
  law.pass = law.recompute_ratio >= 0.95 && law.recompute_ratio <= 1.10 && law.store_ratio >= 2.0;
  return law;
}

SizeLaw size_law(const std::vector<BenchRecord>& records) {
  SizeLaw law;
  std::vector<const BenchRecord*> rec;
  for (const auto& r : records) {
    if (r.mode == Engine::Recompute && r.status == BenchStatus::Ok) rec.push_back(&r);
  }
  std::sort(rec.begin(), rec.end(),
            [](const BenchRecord* a, const BenchRecord* b) { return a->size < b->size; });
  law.ratios_pass = rec.size() >= 2;
  for (std::size_t i = 1; i < rec.size(); ++i) {
    const double r = static_cast<double>(rec[i]->activation_bytes()) /
                     static_cast<double>(rec[i - 1]->activation_bytes());
    const double pixels = static_cast<double>(rec[i]->size * rec[i]->size) /
                          static_cast<double>(rec[i - 1]->size * rec[i - 1]->size);
    law.ratios.push_back(r);
    if (r < 0.75 * pixels || r > 1.25 * pixels) law.ratios_pass = false;
  }

  std::size_t largest = 0;
  for (const auto& r : records) largest = std::max(largest, r.size);
  bool recompute_ok = false;
  bool store_oom = false;
  for (const auto& r : records) {
    if (r.size != largest) continue;
    if (r.mode == Engine::Recompute && r.status == BenchStatus::Ok) recompute_ok = true;
    if (r.mode == Engine::Store && r.status == BenchStatus::Oom) store_oom = true;
  }
  law.oom_contrast = recompute_ok && store_oom;
  return law;
}

std::string depth_summary(const DepthLaw& law) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "depth-law ratio: %.2fx %s", law.recompute_ratio,
                law.pass ? "PASS" : "FAIL");
  return buf;
}

std::string size_summary(const SizeLaw& law) {
  std::string s = "size-law ratios:";
  char buf[32];
  for (double r : law.ratios) {
    std::snprintf(buf, sizeof buf, " %.2fx", r);
    s += buf;
  }
  s += law.ratios_pass ? " PASS" : " FAIL";
  s += law.oom_contrast ? " (store oom at largest size)" : "";
  return s;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRecord>& records) {
  os << kBenchHeader << '\n';
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.3f", r.wall_ms);
    os << to_string(r.mode) << ',' << r.depth << ',' << r.size << ',' << r.batch << ','
       << r.peak_bytes << ',' << r.param_bytes << ',' << buf << ',' << to_string(r.status) << '\n';
  }
}

void write_bench_csv(const std::filesystem::path& path, const std::vector<BenchRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_bench_csv(os, records);
}

void write_gnuplot(const std::filesystem::path& path, const std::vector<BenchRecord>& records,
                   bool by_depth) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  bool first = true;
  for (Engine e : {Engine::Recompute, Engine::Store}) {
    if (!first) os << "\n\n";
    first = false;
    os << "# " << to_string(e) << '\n' << "# " << (by_depth ? "depth" : "size")
       << " activation_mib peak_mib\n";
    for (const auto& r : records) {
      if (r.mode != e) continue;
      const double act = static_cast<double>(r.activation_bytes()) / (1024.0 * 1024.0);
      const double peak = static_cast<double>(r.peak_bytes) / (1024.0 * 1024.0);
      if (r.status == BenchStatus::Oom) os << "# oom ";
      os << (by_depth ? r.depth : r.size) << ' ' << act << ' ' << peak << '\n';
    }
  }
}

#define REVFLOW_INSTANTIATE_BENCH(T)                                                          \
  template BenchRecord measure_step(FlowModel<T>&, const Tensor<T>&, Engine,                   \
                                    std::optional<std::size_t>, bool);                        \
  template std::vector<BenchRecord> sweep_depth<T>(const BenchOptions&,                        \
                                                   const std::vector<std::size_t>&, std::size_t); \
  template std::vector<BenchRecord> sweep_size<T>(const BenchOptions&,                         \
                                                  const std::vector<std::size_t>&, std::size_t, \
                                                  const BudgetSpec&);

REVFLOW_INSTANTIATE_BENCH(float)
REVFLOW_INSTANTIATE_BENCH(double)

}  // namespace revflow
