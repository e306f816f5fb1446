// revflow command-line tool: train | sample | bench | verify.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "revflow/bench.h"
#include "revflow/checkpoint.h"
#include "revflow/errors.h"
#include "revflow/fault.h"
#include "revflow/flow.h"
#include "revflow/image_io.h"
#include "revflow/nft_io.h"
#include "revflow/train.h"
#include "revflow/verify.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace revflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// JSON config files. Each command declares the keys it accepts; a key whose
// flag was given on the command line keeps the flag's value.

struct ConfigKey {
  CLI::Option* option;
  std::function<void(const json&)> set;
};

using ConfigKeys = std::map<std::string, ConfigKey>;

void apply_config(const std::string& path, const ConfigKeys& keys) {
  if (path.empty()) return;
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  const json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw UsageError("config file " + path + " is not a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    const auto it = keys.find(key);
    if (it == keys.end()) throw UsageError("unknown config key '" + key + "' in " + path);
    if (it->second.option != nullptr && it->second.option->count() > 0) continue;
    try {
      it->second.set(value);
    } catch (const json::exception& e) {
      throw UsageError("config key '" + key + "': " + e.what());
    }
  }
}

template <typename V>
ConfigKey key(CLI::Option* option, V& target) {
  return {option, [&target](const json& v) { target = v.get<V>(); }};
}

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("REVFLOW_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(raw, &used);
    if (used != std::string(raw).size()) throw std::invalid_argument(raw);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("REVFLOW_SEED is not an unsigned integer: ") + raw);
  }
}

// Flag, then config file, then REVFLOW_SEED, then 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& explicit_seed) {
  if (explicit_seed) return *explicit_seed;
  return env_seed().value_or(0);
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw UsageError("dtype must be f32 or f64, got '" + s + "'");
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string dataset;
  std::size_t batch = 8;
  std::size_t size = 0;
  std::size_t scales = 2;
  std::size_t steps = 4;
  std::string coupling = "affine";
  std::size_t hidden = 64;
  double lr = 1e-3;
  std::size_t iters = 1000;
  std::optional<std::uint64_t> seed;
  double clip = 10.0;
  std::string engine = "recompute";
  std::size_t eval_size = 0;
  std::string dtype = "f32";
  std::string out = ".";
  bool timing = true;
  std::size_t log_every = 0;
  bool quiet = false;
};

template <typename T>
int run_train(const TrainConfig& cfg, const TrainArgs& args) {
  const std::size_t every = args.log_every > 0 ? args.log_every : std::max<std::size_t>(1, cfg.iterations / 10);
  auto on_row = [&](const MetricsRow& row) {
    if (args.quiet || ((row.iter + 1) % every != 0 && row.iter != 0)) return;
    std::printf("iter %6zu  nll %10.4f  grad_norm %9.4f  step_peak %zu B\n", row.iter, row.nll,
                row.grad_norm, row.peak_bytes);
  };
  const TrainResult r = train_loop<T>(cfg, on_row);
  if (cfg.iterations > 0) {
    std::printf("eval nll: initial %.4f  final %.4f  (change %+.4f nats)\n", r.initial_eval_nll,
                r.final_eval_nll, r.final_eval_nll - r.initial_eval_nll);
  }
  if (r.skipped_steps > 0) {
    std::printf("skipped %zu updates with non-finite gradients\n", r.skipped_steps);
  }
  std::printf("checkpoint: %s\nmetrics: %s\n", cfg.checkpoint_path.string().c_str(),
              cfg.metrics_path.string().c_str());
  return kExitOk;
}

int cmd_train(CLI::App& sub, TrainArgs& a) {
  ConfigKeys keys{
      {"dataset", key(sub.get_option("--dataset"), a.dataset)},
      {"batch", key(sub.get_option("--batch"), a.batch)},
      {"size", key(sub.get_option("--size"), a.size)},
      {"scales", key(sub.get_option("--scales"), a.scales)},
      {"steps", key(sub.get_option("--steps"), a.steps)},
      {"coupling", key(sub.get_option("--coupling"), a.coupling)},
      {"hidden", key(sub.get_option("--hidden"), a.hidden)},
      {"lr", key(sub.get_option("--lr"), a.lr)},
      {"iters", key(sub.get_option("--iters"), a.iters)},
      {"seed", {sub.get_option("--seed"), [&](const json& v) { a.seed = v.get<std::uint64_t>(); }}},
      {"clip", key(sub.get_option("--clip"), a.clip)},
      {"engine", key(sub.get_option("--engine"), a.engine)},
      {"eval_size", key(sub.get_option("--eval-size"), a.eval_size)},
      {"dtype", key(sub.get_option("--dtype"), a.dtype)},
      {"out", key(sub.get_option("--out"), a.out)},
      {"timing", key(sub.get_option("--timing"), a.timing)},
  };
  apply_config(a.config, keys);
  if (a.dataset.empty()) throw UsageError("--dataset is required");

  TrainConfig cfg;
  cfg.dataset = a.dataset;
  cfg.batch = a.batch;
  cfg.size = a.size;
  cfg.scales = a.scales;
  cfg.steps = a.steps;
  cfg.hidden = a.hidden;
  cfg.lr = a.lr;
  cfg.iterations = a.iters;
  cfg.clip = a.clip;
  cfg.eval_size = a.eval_size;
  cfg.timing = a.timing;
  cfg.seed = resolve_seed(a.seed);
  try {
    cfg.coupling = parse_coupling(a.coupling);
    cfg.engine = parse_engine(a.engine);
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const DType dtype = parse_dtype(a.dtype);
  const fs::path out(a.out);
  fs::create_directories(out);
  cfg.checkpoint_path = out / "checkpoint.nfc";
  cfg.metrics_path = out / "metrics.csv";
  return dtype == DType::F32 ? run_train<float>(cfg, a) : run_train<double>(cfg, a);
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
  std::string config;
  std::string ckpt;
  std::size_t n = 16;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string grid;
};

template <typename T>
int run_sample(const SampleArgs& a, std::uint64_t seed) {
  LoadedCheckpoint<T> loaded = load_checkpoint<T>(a.ckpt);
  Rng rng(seed);
  const Tensor<T> x = sample(loaded.model, a.n, rng);
  const fs::path dir = fs::path(a.ckpt).parent_path();
  const fs::path out = a.out.empty() ? dir / "samples.nft" : fs::path(a.out);
  write_nft(out, x);
  std::printf("samples: %s %s\n", out.string().c_str(), to_string(x.shape()).c_str());
  if (is_image_shape(x.shape())) {
    const fs::path grid = a.grid.empty()
                              ? dir / (x.shape().c == 1 ? "samples.pgm" : "samples.ppm")
                              : fs::path(a.grid);
    write_image_grid(grid, x);
    std::printf("grid: %s\n", grid.string().c_str());
  }
  return kExitOk;
}

int cmd_sample(CLI::App& sub, SampleArgs& a) {
  ConfigKeys keys{
      {"ckpt", key(sub.get_option("--ckpt"), a.ckpt)},
      {"n", key(sub.get_option("--n"), a.n)},
      {"seed", {sub.get_option("--seed"), [&](const json& v) { a.seed = v.get<std::uint64_t>(); }}},
      {"out", key(sub.get_option("--out"), a.out)},
      {"grid", key(sub.get_option("--grid"), a.grid)},
  };
  apply_config(a.config, keys);
  if (a.ckpt.empty()) throw UsageError("--ckpt is required");
  if (a.n == 0) throw UsageError("--n must be positive");
  const std::uint64_t seed = resolve_seed(a.seed);
  const CheckpointInfo info = read_checkpoint_info(a.ckpt);
  return info.dtype == DType::F32 ? run_sample<float>(a, seed) : run_sample<double>(a, seed);
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  std::string config;
  std::string sweep = "both";
  std::string budget = "none";
  std::string out = ".";
  bool gnuplot = false;
  std::string dtype = "f32";
  std::size_t batch = 8;
  std::size_t hidden = 64;
  std::size_t scales = 2;
  std::optional<std::uint64_t> seed;
  bool timing = true;
  std::vector<std::size_t> depths{2, 4, 8, 16, 32};
  std::vector<std::size_t> sizes{16, 32, 64, 128};
  std::size_t depth_size = 64;
  std::size_t size_depth = 8;
};

BudgetSpec parse_budget(const std::string& s) {
  BudgetSpec b;
  if (s == "none") return b;
  if (s == "auto") {
    b.auto_factor = 1.2;
    return b;
  }
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    b.bytes = v;
  } catch (const std::exception&) {
    throw UsageError("--budget must be auto, none or a byte count, got '" + s + "'");
  }
  return b;
}

template <typename T>
int run_bench(const BenchArgs& a, const BenchOptions& o, const BudgetSpec& budget) {
  const fs::path out(a.out);
  fs::create_directories(out);
  if (a.sweep == "depth" || a.sweep == "both") {
    const auto records = sweep_depth<T>(o, a.depths, a.depth_size);
    write_bench_csv(out / "bench_depth.csv", records);
    if (a.gnuplot) write_gnuplot(out / "bench_depth.dat", records, true);
    const DepthLaw law = depth_law(records);
    std::printf("wrote %s (%zu rows)\n", (out / "bench_depth.csv").string().c_str(), records.size());
    std::printf("store-mode growth: %.2fx\n", law.store_ratio);
    std::printf("%s\n", depth_summary(law).c_str());
  }
  if (a.sweep == "size" || a.sweep == "both") {
    const auto records = sweep_size<T>(o, a.sizes, a.size_depth, budget);
    write_bench_csv(out / "bench_size.csv", records);
    if (a.gnuplot) write_gnuplot(out / "bench_size.dat", records, false);
    std::size_t oom = 0;
    for (const auto& r : records) oom += r.status == BenchStatus::Oom ? 1 : 0;
    std::printf("wrote %s (%zu rows, %zu oom)\n", (out / "bench_size.csv").string().c_str(),
                records.size(), oom);
    std::printf("%s\n", size_summary(size_law(records)).c_str());
  }
  return kExitOk;
}

int cmd_bench(CLI::App& sub, BenchArgs& a) {
  ConfigKeys keys{
      {"sweep", key(sub.get_option("--sweep"), a.sweep)},
      {"budget", key(sub.get_option("--budget"), a.budget)},
      {"out", key(sub.get_option("--out"), a.out)},
      {"gnuplot", key(sub.get_option("--gnuplot"), a.gnuplot)},
      {"dtype", key(sub.get_option("--dtype"), a.dtype)},
      {"batch", key(sub.get_option("--batch"), a.batch)},
      {"hidden", key(sub.get_option("--hidden"), a.hidden)},
      {"scales", key(sub.get_option("--scales"), a.scales)},
      {"seed", {sub.get_option("--seed"), [&](const json& v) { a.seed = v.get<std::uint64_t>(); }}},
      {"timing", key(sub.get_option("--timing"), a.timing)},
      {"depths", key(sub.get_option("--depths"), a.depths)},
      {"sizes", key(sub.get_option("--sizes"), a.sizes)},
      {"depth_size", key(sub.get_option("--depth-size"), a.depth_size)},
      {"size_depth", key(sub.get_option("--size-depth"), a.size_depth)},
  };
  apply_config(a.config, keys);
  if (a.sweep != "depth" && a.sweep != "size" && a.sweep != "both") {
    throw UsageError("--sweep must be depth, size or both");
  }
  BenchOptions o;
  o.batch = a.batch;
  o.hidden = a.hidden;
  o.scales = a.scales;
  o.seed = resolve_seed(a.seed);
  o.timing = a.timing;
  if (o.batch == 0 || o.hidden == 0) throw UsageError("--batch and --hidden must be positive");
  const BudgetSpec budget = parse_budget(a.budget);
  // Reject impossible shapes before running anything.
  try {
    for (std::size_t s : a.sizes) {
      FlowConfig{o.channels, s, s, o.scales, a.size_depth, o.coupling, o.hidden}.validate();
    }
    FlowConfig{o.channels, a.depth_size, a.depth_size, o.scales, 1, o.coupling, o.hidden}.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return parse_dtype(a.dtype) == DType::F32 ? run_bench<float>(a, o, budget)
                                            : run_bench<double>(a, o, budget);
}

// ---------------------------------------------------------------------------
// verify

struct VerifyArgs {
  std::string config;
  std::string only;
  std::string fault;
  std::optional<std::uint64_t> seed;
};

int cmd_verify(CLI::App& sub, VerifyArgs& a) {
  ConfigKeys keys{
      {"only", key(sub.get_option("--only"), a.only)},
      {"inject_fault", key(sub.get_option("--inject-fault"), a.fault)},
      {"seed", {sub.get_option("--seed"), [&](const json& v) { a.seed = v.get<std::uint64_t>(); }}},
  };
  apply_config(a.config, keys);
  VerifyOptions options;
  options.only = a.only;
  options.seed = resolve_seed(a.seed);
  if (!options.only.empty()) {
    const auto groups = verify_groups();
    if (std::find(groups.begin(), groups.end(), options.only) == groups.end()) {
      std::string known;
      for (auto g : groups) known += (known.empty() ? "" : ", ") + std::string(g);
      throw UsageError("unknown group '" + options.only + "' (known: " + known + ")");
    }
  }
  std::optional<fault::ScopedFault> injected;
  if (!a.fault.empty()) {
    const fault::Site site = fault::parse(a.fault.c_str());
    if (site == fault::Site::None) {
      throw UsageError("unknown fault site '" + a.fault +
                       "' (known: actnorm-bias, coupling-shift, inv1x1-weight)");
    }
    injected.emplace(site);
    std::printf("fault injected: %s\n", a.fault.c_str());
  }
  const auto results = run_verify(options);
  print_verify_table(std::cout, results);
  return all_passed(results) ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"revflow: memory-frugal normalizing flows"};
  app.require_subcommand(1);

  TrainArgs train;
  CLI::App* t = app.add_subcommand("train", "Train a flow and write checkpoint.nfc + metrics.csv");
  t->add_option("--config", train.config, "JSON file with option values (flags win)");
  t->add_option("--dataset", train.dataset,
                "two_moons | eight_gaussians | checkerboard | blobs<S>");
  t->add_option("--batch", train.batch, "Batch size")->capture_default_str();
  t->add_option("--size", train.size, "Image edge length (defaults to the S of blobs<S>)");
  t->add_option("--scales", train.scales, "Scales L (ignored for 2-D datasets)")->capture_default_str();
  t->add_option("--steps", train.steps, "Flow steps K per scale")->capture_default_str();
  t->add_option("--coupling", train.coupling, "affine | additive")->capture_default_str();
  t->add_option("--hidden", train.hidden, "Conditioner hidden width")->capture_default_str();
  t->add_option("--lr", train.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--iters", train.iters, "Training iterations")->capture_default_str();
  t->add_option("--seed", train.seed, "Seed (default: $REVFLOW_SEED or 0)");
  t->add_option("--clip", train.clip, "Global gradient-norm clip")->capture_default_str();
  t->add_option("--engine", train.engine, "recompute | store")->capture_default_str();
  t->add_option("--eval-size", train.eval_size, "Held-out samples for the NLL report (0 = auto)");
  t->add_option("--dtype", train.dtype, "f32 | f64")->capture_default_str();
  t->add_option("--out", train.out, "Output directory")->capture_default_str();
  t->add_flag("--timing,!--no-timing", train.timing, "Record wall-clock ms in metrics.csv");
  t->add_option("--log-every", train.log_every, "Progress line interval (0 = iters/10)");
  t->add_flag("--quiet", train.quiet, "No progress lines");

  SampleArgs sample_args;
  CLI::App* s = app.add_subcommand("sample", "Draw samples from a checkpoint");
  s->add_option("--config", sample_args.config, "JSON file with option values (flags win)");
  s->add_option("--ckpt", sample_args.ckpt, "Checkpoint (.nfc)");
  s->add_option("--n", sample_args.n, "Number of samples")->capture_default_str();
  s->add_option("--seed", sample_args.seed, "Seed (default: $REVFLOW_SEED or 0)");
  s->add_option("--out", sample_args.out, "Samples file (default: samples.nft beside the checkpoint)");
  s->add_option("--grid", sample_args.grid, "PGM/PPM grid path for image models");

  BenchArgs bench;
  CLI::App* b = app.add_subcommand("bench", "Memory benchmarks: depth and input-size sweeps");
  b->add_option("--config", bench.config, "JSON file with option values (flags win)");
  b->add_option("--sweep", bench.sweep, "depth | size | both")->capture_default_str();
  b->add_option("--budget", bench.budget, "Size-sweep byte budget: none | auto | <bytes>")
      ->capture_default_str();
  b->add_option("--out", bench.out, "Output directory")->capture_default_str();
  b->add_flag("--gnuplot", bench.gnuplot, "Also write gnuplot data files");
  b->add_option("--dtype", bench.dtype, "f32 | f64")->capture_default_str();
  b->add_option("--batch", bench.batch, "Batch size")->capture_default_str();
  b->add_option("--hidden", bench.hidden, "Conditioner hidden width")->capture_default_str();
  b->add_option("--scales", bench.scales, "Scales L")->capture_default_str();
  b->add_option("--seed", bench.seed, "Seed (default: $REVFLOW_SEED or 0)");
  b->add_flag("--timing,!--no-timing", bench.timing, "Record wall-clock ms");
  b->add_option("--depths", bench.depths, "Depths K for the depth sweep")->delimiter(',');
  b->add_option("--sizes", bench.sizes, "Input sizes S for the size sweep")->delimiter(',');
  b->add_option("--depth-size", bench.depth_size, "Input size used by the depth sweep")
      ->capture_default_str();
  b->add_option("--size-depth", bench.size_depth, "Depth used by the size sweep")
      ->capture_default_str();

  VerifyArgs verify;
  CLI::App* v = app.add_subcommand("verify", "Run the 64-bit oracle suite");
  v->add_option("--config", verify.config, "JSON file with option values (flags win)");
  v->add_option("--only", verify.only, "Run one group only");
  v->add_option("--inject-fault", verify.fault,
                "Corrupt one gradient: actnorm-bias | coupling-shift | inv1x1-weight");
  v->add_option("--seed", verify.seed, "Seed (default: $REVFLOW_SEED or 0)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto parsed = app.get_subcommands();
    std::cerr << (parsed.empty() ? app.help() : parsed.front()->help());
    return kExitUsage;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == t) return cmd_train(*t, train);
    if (active == s) return cmd_sample(*s, sample_args);
    if (active == b) return cmd_bench(*b, bench);
    return cmd_verify(*v, verify);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->help();
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
