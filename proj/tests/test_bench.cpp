#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include "revflow/bench.h"
#include "revflow/train.h"
#include "support.h"

using namespace revflow;
namespace fs = std::filesystem;

namespace {

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char ch : s) n += ch == '\n' ? 1 : 0;
  return n;
}

BenchOptions small_options() {
  BenchOptions o;
  o.batch = 2;
  o.hidden = 8;
  o.timing = false;
  return o;
}

}  // namespace

TEST_CASE("measure_step records both engines and balances the meter") {
  Rng rng(0);
  FlowModel<float> model({3, 16, 16, 2, 4, CouplingKind::Affine, 8}, rng);
  Rng data(1);
  const auto x = generate_toy<float>("blobs16", 2, data);
  test::MeterBalance guard;
  const auto rec = measure_step(model, x, Engine::Recompute);
  const auto store = measure_step(model, x, Engine::Store);
  CHECK(guard.leaked() == 0);
  CHECK(rec.status == BenchStatus::Ok);
  CHECK(rec.peak_bytes > rec.param_bytes);
  CHECK(rec.param_bytes == model.parameter_bytes());
  CHECK(store.peak_bytes > rec.peak_bytes);
  CHECK(rec.depth == 4);
  CHECK(rec.size == 16);
  CHECK(rec.batch == 2);
  for (auto* p : model.parameters()) {
    for (float g : p->grad.values()) REQUIRE(g == 0.0f);
  }
}

TEST_CASE("byte budgets turn overruns into oom records") {
  Rng rng(0);
  FlowModel<float> model({3, 16, 16, 2, 4, CouplingKind::Affine, 8}, rng);
  Rng data(1);
  const auto x = generate_toy<float>("blobs16", 2, data);
  test::MeterBalance guard;
  CHECK(measure_step(model, x, Engine::Recompute, std::size_t{0}).status == BenchStatus::Oom);
  CHECK(guard.leaked() == 0);

  const auto free_run = measure_step(model, x, Engine::Recompute);
  const std::size_t budget = free_run.peak_bytes;
  const auto fits = measure_step(model, x, Engine::Recompute, budget);
  CHECK(fits.status == BenchStatus::Ok);
  CHECK(fits.peak_bytes <= budget);
  const auto store = measure_step(model, x, Engine::Store, budget);
  CHECK(store.status == BenchStatus::Oom);
  CHECK(guard.leaked() == 0);
  CHECK_FALSE(MemoryMeter::global().limit().has_value());
}

TEST_CASE("peak stays within twice the hand-counted working set") {
  // Tiny model, batch 1, 8x8: one Haar then one step at 12 channels, 4x4.
  Rng rng(2);
  FlowModel<float> model({3, 8, 8, 1, 1, CouplingKind::Affine, 8}, rng);
  Rng data(3);
  const auto x = generate_toy<float>("blobs8", 1, data);
  (void)model_forward(model, x);
  const std::size_t px = 16;
  // Coupling backward: y, dy, rebuilt x, dx, x1, hidden, h, dh, plus the
  // latent bundle and dz copies held by the caller.
  const std::size_t elems = 12 * px * 4 + 6 * px + 8 * px + 12 * px * 2 + 12 * px * 2;
  const std::size_t working_set = elems * sizeof(float);
  const auto r = measure_step(model, x, Engine::Recompute);
  CHECK(r.activation_bytes() >= x.bytes());
  CHECK(r.activation_bytes() <= 2 * (x.bytes() + working_set));
}

TEST_CASE("depth sweep shape and law") {
  const auto records = sweep_depth<float>(small_options(), {2, 4, 8, 16, 32}, 16);
  REQUIRE(records.size() == 10);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(records[i].mode == Engine::Recompute);
    CHECK(records[i + 5].mode == Engine::Store);
  }
  for (std::size_t i = 6; i < 10; ++i) CHECK(records[i].peak_bytes > records[i - 1].peak_bytes);
  const DepthLaw law = depth_law(records);
  CHECK(law.recompute_ratio >= 0.95);
  CHECK(law.recompute_ratio <= 1.10);
  CHECK(law.store_ratio >= 2.0);
  CHECK(law.pass);
  std::ostringstream csv;
  write_bench_csv(csv, records);
  CHECK(count_lines(csv.str()) == 11);
  CHECK(csv.str().rfind(std::string(kBenchHeader) + "\n", 0) == 0);
}

TEST_CASE("size sweep shape, ratios and oom contrast") {
  BudgetSpec budget;
  budget.auto_factor = 1.2;
  const auto records = sweep_size<float>(small_options(), {8, 16, 32, 64}, 4, budget);
  REQUIRE(records.size() == 8);
  const SizeLaw law = size_law(records);
  REQUIRE(law.ratios.size() == 3);
  CHECK(law.ratios[2] >= 3.0);
  CHECK(law.ratios[2] <= 5.0);
  CHECK(law.oom_contrast);
  CHECK(records[3].status == BenchStatus::Ok);
  CHECK(records[7].status == BenchStatus::Oom);
  for (const auto& r : records) {
    if (r.status == BenchStatus::Ok) CHECK(r.peak_bytes > r.param_bytes);
  }
}

TEST_CASE("law evaluation on synthetic records") {
  auto rec = [](Engine m, std::size_t d, std::size_t s, std::size_t peak, BenchStatus st) {
    BenchRecord r;
    r.mode = m;
    r.depth = d;
    r.size = s;
    r.batch = 8;
    r.peak_bytes = peak;
    r.param_bytes = 100;
    r.status = st;
    return r;
  };
  std::vector<BenchRecord> depth{rec(Engine::Recompute, 2, 64, 1100, BenchStatus::Ok),
                                 rec(Engine::Recompute, 32, 64, 1300, BenchStatus::Ok),
                                 rec(Engine::Store, 2, 64, 1100, BenchStatus::Ok),
                                 rec(Engine::Store, 32, 64, 5100, BenchStatus::Ok)};
  DepthLaw law = depth_law(depth);
  CHECK(law.recompute_ratio == doctest::Approx(1.2));
  CHECK(law.store_ratio == doctest::Approx(5.0));
  CHECK_FALSE(law.pass);
  CHECK(depth_summary(law) == "depth-law ratio: 1.20x FAIL");
  depth[1].peak_bytes = 1150;
  CHECK(depth_summary(depth_law(depth)) == "depth-law ratio: 1.05x PASS");

  std::vector<BenchRecord> size{rec(Engine::Recompute, 8, 16, 200, BenchStatus::Ok),
                                rec(Engine::Recompute, 8, 32, 500, BenchStatus::Ok),
                                rec(Engine::Store, 8, 16, 900, BenchStatus::Ok),
                                rec(Engine::Store, 8, 32, 700, BenchStatus::Oom)};
  SizeLaw sl = size_law(size);
  CHECK(sl.ratios == std::vector<double>{4.0});
  CHECK(sl.ratios_pass);
  CHECK(sl.oom_contrast);
  size[1].peak_bytes = 700;
  CHECK_FALSE(size_law(size).ratios_pass);
}

TEST_CASE("csv and gnuplot files") {
  const fs::path dir =
      fs::temp_directory_path() / ("revflow_bench_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto records = sweep_depth<float>(small_options(), {2, 4}, 16);
  write_bench_csv(dir / "d.csv", records);
  write_gnuplot(dir / "d.dat", records, true);
  std::ifstream csv(dir / "d.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header == kBenchHeader);
  CHECK(row.rfind("recompute,2,16,2,", 0) == 0);
  CHECK(row.substr(row.size() - 9) == ",0.000,ok");
  std::ifstream dat(dir / "d.dat");
  std::stringstream ss;
  ss << dat.rdbuf();
  CHECK(ss.str().find("recompute") != std::string::npos);
  CHECK(ss.str().find("store") != std::string::npos);
  fs::remove_all(dir);
}
