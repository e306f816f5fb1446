#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <unistd.h>

#include "revflow/checkpoint.h"
#include "revflow/errors.h"
#include "revflow/nft_io.h"
#include "revflow/train.h"
#include "support.h"

using namespace revflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& tag) {
  const fs::path dir =
      fs::temp_directory_path() / ("revflow_test_" + tag + "_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

LatentBundle<double> bundle_of(std::vector<double> z, double logdet) {
  LatentBundle<double> b;
  b.parts.push_back(Tensor<double>::from_values({1, z.size(), 1, 1}, z));
  b.logdet = {logdet};
  return b;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Objective

TEST_CASE("nll closed forms") {
  const auto zero = nll(bundle_of({0.0, 0.0}, 0.0));
  CHECK(zero.mean == doctest::Approx(1.837877).epsilon(1e-6));
  CHECK(zero.mean == doctest::Approx(std::log(2.0 * std::numbers::pi)));

  const auto r = nll(bundle_of({2.0, 0.0}, 1.0));
  CHECK(r.per_sample[0] == doctest::Approx(2.0 + std::log(2.0 * std::numbers::pi) - 1.0));
  CHECK(r.dz[0][0] == 2.0);
  CHECK(r.dz[0][1] == 0.0);
  CHECK(r.dlogdet == std::vector<double>{-1.0});
  CHECK(nll_values(bundle_of({2.0, 0.0}, 1.0))[0] == r.per_sample[0]);
}

TEST_CASE("nll counts every latent part in D") {
  LatentBundle<double> b;
  b.parts.emplace_back(Shape{2, 1, 2, 2});
  b.parts.emplace_back(Shape{2, 2, 1, 1});
  b.logdet = {0.0, 0.5};
  const auto r = nll(b);
  const double c = 0.5 * 6 * std::log(2.0 * std::numbers::pi);
  CHECK(r.per_sample[0] == doctest::Approx(c));
  CHECK(r.per_sample[1] == doctest::Approx(c - 0.5));
  CHECK(r.mean == doctest::Approx(c - 0.25));
}

TEST_CASE("non-finite latents signal divergence") {
  CHECK_THROWS_AS(nll(bundle_of({NAN, 0.0}, 0.0)), DivergenceError);
  CHECK_THROWS_AS(nll(bundle_of({0.0, 0.0}, INFINITY)), DivergenceError);
}

// ---------------------------------------------------------------------------
// Adam and clipping

TEST_CASE("adam first step closed form") {
  Parameter<double> p("w", Tensor<double>::zeros({1, 1, 1, 1}));
  p.grad[0] = 1.0;
  Parameter<double>* params[] = {&p};
  Adam<double> opt;
  const auto version = p.version;
  CHECK(opt.step(params));
  CHECK(opt.t() == 1);
  CHECK(p.value[0] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(p.grad[0] == 0.0);
  CHECK(p.version > version);
}

TEST_CASE("adam with zero gradient keeps the parameter but counts the step") {
  Parameter<double> p("w", Tensor<double>::full({1, 1, 1, 3}, 0.25));
  Parameter<double>* params[] = {&p};
  Adam<double> opt;
  CHECK(opt.step(params));
  CHECK(opt.t() == 1);
  for (double v : p.value.values()) CHECK(v == 0.25);
}

TEST_CASE("adam keeps descending under a constant gradient") {
  Parameter<float> p("w", Tensor<float>::zeros({1, 1, 1, 1}));
  Parameter<float>* params[] = {&p};
  Adam<float> opt;
  float prev = p.value[0];
  for (int i = 0; i < 2; ++i) {
    p.grad[0] = 1.0f;
    opt.step(params);
    CHECK(p.value[0] < prev);
    prev = p.value[0];
  }
  CHECK(opt.t() == 2);
  CHECK(opt.state_bytes() == 2 * sizeof(float));
}

TEST_CASE("adam skips non-finite gradients") {
  Parameter<double> p("w", Tensor<double>::full({1, 1, 1, 2}, 1.0));
  Parameter<double>* params[] = {&p};
  Adam<double> opt;
  p.grad[0] = 1.0;
  p.grad[1] = NAN;
  CHECK_FALSE(opt.step(params));
  CHECK(opt.t() == 0);
  CHECK(p.value[0] == 1.0);
  CHECK(p.value[1] == 1.0);
  CHECK(p.grad[0] == 0.0);
  CHECK(p.grad[1] == 0.0);
}

TEST_CASE("gradient clipping bounds the global norm") {
  Parameter<double> a("a", Tensor<double>::zeros({1, 1, 1, 2}));
  Parameter<double> b("b", Tensor<double>::zeros({1, 1, 1, 1}));
  a.grad[0] = 30.0;
  a.grad[1] = 40.0;
  b.grad[0] = 120.0;
  Parameter<double>* params[] = {&a, &b};
  CHECK(grad_norm<double>(params) == doctest::Approx(130.0));
  const double before = clip_grad_norm<double>(params, 10.0);
  CHECK(before == doctest::Approx(130.0));
  CHECK(grad_norm<double>(params) <= 10.0 + 1e-6);
  CHECK(a.grad[0] / a.grad[1] == doctest::Approx(0.75));

  const double small = clip_grad_norm<double>(params, 100.0);
  CHECK(small == doctest::Approx(10.0));
  CHECK(grad_norm<double>(params) == doctest::Approx(10.0));

  scale_grads<double>(params, 0.5);
  CHECK(grad_norm<double>(params) == doctest::Approx(5.0));
}

// ---------------------------------------------------------------------------
// Toy data

TEST_CASE("eight gaussians sit on the radius-2 circle") {
  Rng rng(1);
  const auto x = generate_toy<double>("eight_gaussians", 2000, rng, false);
  for (std::size_t i = 0; i < 2000; ++i) {
    const double px = x(i, 0, 0, 0), py = x(i, 1, 0, 0);
    double best = 1e9;
    for (int k = 0; k < 8; ++k) {
      const double a = k * std::numbers::pi / 4.0;
      best = std::min(best, std::hypot(px - 2.0 * std::cos(a), py - 2.0 * std::sin(a)));
    }
    REQUIRE(best < 5 * 0.2);
  }
}

TEST_CASE("two moons points lie in the two half annuli") {
  Rng rng(2);
  const auto x = generate_toy<double>("two_moons", 5000, rng, false);
  std::size_t upper = 0;
  for (std::size_t i = 0; i < 5000; ++i) {
    const double px = x(i, 0, 0, 0), py = x(i, 1, 0, 0);
    const double ra = std::hypot(px, py);
    const double rb = std::hypot(px - 1.0, py - 0.5);
    const bool in_a = py >= 0.0 && ra >= 0.7 - 1e-12 && ra <= 1.3 + 1e-12;
    const bool in_b = py <= 0.5 && rb >= 0.7 - 1e-12 && rb <= 1.3 + 1e-12;
    REQUIRE((in_a || in_b));
    upper += in_a ? 1 : 0;
  }
  CHECK(upper > 2000);
  CHECK(upper < 3500);
}

TEST_CASE("checkerboard fills alternating squares") {
  Rng rng(3);
  const auto x = generate_toy<double>("checkerboard", 4000, rng, false);
  for (std::size_t i = 0; i < 4000; ++i) {
    const double px = x(i, 0, 0, 0), py = x(i, 1, 0, 0);
    REQUIRE(px >= -2.0);
    REQUIRE(px < 2.0);
    REQUIRE(py >= -2.0);
    REQUIRE(py < 2.0);
    const auto col = static_cast<int>(std::floor(px + 2.0));
    const auto row = static_cast<int>(std::floor(py + 2.0));
    REQUIRE((row + col) % 2 == 0);
  }
}

TEST_CASE("standardized point datasets have zero mean and unit variance") {
  for (std::string_view name : toy_dataset_names()) {
    CAPTURE(name);
    Rng rng(4);
    const std::size_t n = 200000;
    const auto x = generate_toy<double>(name, n, rng);
    for (std::size_t c = 0; c < 2; ++c) {
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sum += x(i, c, 0, 0);
        sq += x(i, c, 0, 0) * x(i, c, 0, 0);
      }
      CHECK(std::abs(sum / n) < 0.02);
      CHECK(std::abs(sq / n - 1.0) < 0.02);
    }
  }
}

TEST_CASE("toy data is deterministic and validates names") {
  Rng a(5), b(5);
  const auto xa = generate_toy<float>("two_moons", 64, a);
  const auto xb = generate_toy<float>("two_moons", 64, b);
  CHECK(std::memcmp(xa.data(), xb.data(), xa.bytes()) == 0);
  Rng c(6);
  const auto img = generate_toy<float>("blobs16", 3, c);
  CHECK(img.shape() == Shape{3, 3, 16, 16});
  CHECK(blobs_size("blobs32") == std::optional<std::size_t>(32));
  CHECK_FALSE(blobs_size("two_moons").has_value());
  CHECK(is_point_dataset("checkerboard"));
  CHECK_FALSE(is_point_dataset("blobs8"));
  CHECK_THROWS_AS(generate_toy<float>("spirals", 4, c), std::invalid_argument);
  CHECK_THROWS_AS(generate_toy<float>("blobs", 4, c), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Training loop

TEST_CASE("train config validation and architecture") {
  TrainConfig cfg;
  cfg.dataset = "two_moons";
  CHECK_NOTHROW(cfg.validate());
  const FlowConfig fc = cfg.flow_config();
  CHECK(fc.channels == 2);
  CHECK(fc.height == 1);
  CHECK(fc.scales == 0);

  cfg.batch = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.batch = 8;
  cfg.dataset = "blobs12";
  cfg.scales = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.dataset = "nothing";
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.dataset = "blobs16";
  cfg.scales = 2;
  cfg.size = 32;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK(parse_engine("store") == Engine::Store);
  CHECK_THROWS_AS(parse_engine("tape"), std::invalid_argument);
}

TEST_CASE("zero iterations write the raw initialization") {
  const fs::path dir = scratch_dir("zero");
  TrainConfig cfg;
  cfg.dataset = "blobs8";
  cfg.scales = 1;
  cfg.steps = 2;
  cfg.hidden = 8;
  cfg.iterations = 0;
  cfg.seed = 42;
  cfg.checkpoint_path = dir / "c.nfc";
  cfg.metrics_path = dir / "m.csv";
  const TrainResult r = train_loop<float>(cfg);
  CHECK(r.metrics.empty());
  CHECK(slurp(cfg.metrics_path) == std::string(kMetricsHeader) + "\n");

  auto loaded = load_checkpoint<float>(cfg.checkpoint_path);
  CHECK_FALSE(loaded.info.actnorm_initialized);
  CHECK(loaded.info.step == 0);
  Rng rng(42);
  FlowModel<float> fresh(cfg.flow_config(), rng);
  const auto a = loaded.model.parameters();
  const auto b = fresh.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a[i]->value.data(), b[i]->value.data(), a[i]->value.bytes()) == 0);
  }
  fs::remove_all(dir);
}

TEST_CASE("metrics rows are reproducible") {
  TrainConfig cfg;
  cfg.dataset = "eight_gaussians";
  cfg.steps = 2;
  cfg.hidden = 8;
  cfg.iterations = 25;
  cfg.seed = 3;
  cfg.timing = false;
  const auto a = train_loop<double>(cfg);
  const auto b = train_loop<double>(cfg);
  REQUIRE(a.metrics.size() == 25);
  for (std::size_t i = 0; i < 25; ++i) {
    CHECK(format_metrics_row(a.metrics[i]) == format_metrics_row(b.metrics[i]));
    CHECK(a.metrics[i].iter == i);
    CHECK(a.metrics[i].wall_ms == 0.0);
    CHECK(a.metrics[i].peak_bytes > 0);
  }
  const auto fa = train_loop<float>(cfg);
  const auto fb = train_loop<float>(cfg);
  for (std::size_t i = 0; i < 25; ++i) CHECK(fa.metrics[i].nll == fb.metrics[i].nll);
  CHECK(std::isfinite(a.initial_eval_nll));
  CHECK(std::isfinite(a.final_eval_nll));
}

TEST_CASE("metrics row format") {
  MetricsRow row{3, 1.5, 0.25, 4096, 1.2345};
  CHECK(format_metrics_row(row) == "3,1.5,0.25,4096,1.234");
  CHECK(kMetricsHeader == "iter,nll,grad_norm,peak_bytes,wall_ms");
}

TEST_CASE("engines give the same first-step gradient norm") {
  TrainConfig cfg;
  cfg.dataset = "blobs8";
  cfg.scales = 1;
  cfg.steps = 2;
  cfg.hidden = 8;
  cfg.iterations = 1;
  cfg.timing = false;
  const auto rec = train_loop<float>(cfg);
  cfg.engine = Engine::Store;
  const auto store = train_loop<float>(cfg);
  CHECK(std::abs(rec.metrics[0].grad_norm - store.metrics[0].grad_norm) <=
        1e-5 * rec.metrics[0].grad_norm);
  CHECK(rec.metrics[0].nll == store.metrics[0].nll);
  CHECK(store.metrics[0].peak_bytes > rec.metrics[0].peak_bytes);
}

TEST_CASE("a runaway learning rate aborts with a divergence report") {
  TrainConfig cfg;
  cfg.dataset = "two_moons";
  cfg.steps = 2;
  cfg.hidden = 8;
  cfg.iterations = 200;
  cfg.lr = 1e30;
  cfg.timing = false;
  CHECK_THROWS_AS(train_loop<float>(cfg), DivergenceError);
}

TEST_CASE("evaluate_nll matches a single forward pass") {
  Rng rng(7);
  FlowModel<double> model({2, 1, 1, 0, 2, CouplingKind::Affine, 8}, rng);
  const auto data = generate_toy<double>("two_moons", 50, rng);
  const double whole = evaluate_nll(model, data, 50);
  const double chunked = evaluate_nll(model, data, 7);
  CHECK(chunked == doctest::Approx(whole).epsilon(1e-12));
  CHECK(whole == doctest::Approx(nll(model_forward(model, data)).mean).epsilon(1e-12));
}
