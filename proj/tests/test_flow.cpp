#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "revflow/bench.h"
#include "revflow/errors.h"
#include "revflow/flow.h"
#include "revflow/kernels.h"
#include "revflow/oracle.h"
#include "revflow/train.h"
#include "support.h"

using namespace revflow;

namespace {

template <typename T>
void make_identity(FlowModel<T>& model) {
  for (auto& st : model.stages()) {
    if (auto* an = dynamic_cast<ActNorm<T>*>(st.layer.get())) {
      const std::size_t c = an->scale().size();
      std::vector<T> ones(c, T{1}), zeros(c, T{0});
      an->set(ones, zeros);
    } else if (auto* inv = dynamic_cast<Inv1x1Conv<T>*>(st.layer.get())) {
      const std::size_t c = static_cast<std::size_t>(std::lround(std::sqrt(inv->weight().size())));
      std::vector<T> eye(c * c, T{0});
      for (std::size_t i = 0; i < c; ++i) eye[i * c + i] = T{1};
      inv->set_weight(eye);
    }
  }
}

template <typename T>
std::vector<double> all_grads(FlowModel<T>& model) {
  std::vector<double> g;
  for (Parameter<T>* p : model.parameters()) {
    g.insert(g.end(), p->grad.values().begin(), p->grad.values().end());
  }
  return g;
}

double model_nll(FlowModel<double>& model, const Tensor<double>& x) {
  return nll(model_forward(model, x)).mean * static_cast<double>(x.shape().n);
}

}  // namespace

TEST_CASE("flow config validation") {
  CHECK_NOTHROW(FlowConfig{3, 16, 16, 2, 4, CouplingKind::Affine, 8}.validate());
  CHECK_THROWS_AS(FlowConfig({3, 12, 12, 3, 1, CouplingKind::Affine, 8}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(FlowConfig({3, 1, 1, 0, 1, CouplingKind::Affine, 8}).validate(),
                  std::invalid_argument);
  CHECK_NOTHROW(FlowConfig{3, 1, 1, 0, 1, CouplingKind::Additive, 8}.validate());
  CHECK_THROWS_AS(FlowConfig({1, 1, 1, 0, 1, CouplingKind::Additive, 8}).validate(),
                  std::invalid_argument);
  CHECK_THROWS_AS(FlowConfig({3, 8, 8, 1, 1, CouplingKind::Affine, 0}).validate(),
                  std::invalid_argument);
  Rng rng(0);
  CHECK_THROWS_AS(FlowModel<float>({3, 10, 10, 2, 1, CouplingKind::Affine, 8}, rng),
                  std::invalid_argument);
  CHECK(parse_coupling("additive") == CouplingKind::Additive);
  CHECK(to_string(CouplingKind::Affine) == "affine");
  CHECK_THROWS_AS(parse_coupling("neural"), std::invalid_argument);
}

TEST_CASE("layer list and parameter names") {
  Rng rng(1);
  FlowModel<float> model({3, 8, 8, 2, 2, CouplingKind::Affine, 8}, rng);
  // [haar, 2 x (actnorm, inv1x1, coupling), factor] + [haar, 2 x (...)]
  REQUIRE(model.stages().size() == 15);
  CHECK(model.stages()[0].layer->kind() == "haar");
  CHECK(model.stages()[1].layer->kind() == "actnorm");
  CHECK(model.stages()[2].layer->kind() == "inv1x1");
  CHECK(model.stages()[3].layer->kind() == "affine_coupling");
  CHECK(model.stages()[7].factor.has_value());
  CHECK_FALSE(model.stages()[14].factor.has_value());
  const auto named = model.named_parameters();
  CHECK(named.front().name == "layer1.scale");
  CHECK(named[1].name == "layer1.bias");
  CHECK(named[2].name == "layer2.weight");
  CHECK(named[3].name == "layer3.conv1.weight");
  CHECK(model.actnorm_stages() == std::vector<std::size_t>{1, 4, 9, 12});
}

TEST_CASE("latent parts conserve the element count") {
  Rng rng(2);
  FlowModel<float> model({3, 16, 16, 2, 2, CouplingKind::Affine, 8}, rng);
  const auto shapes = model.latent_shapes(2);
  REQUIRE(shapes.size() == 2);
  CHECK(shapes[0] == Shape{2, 6, 8, 8});
  CHECK(shapes[1] == Shape{2, 24, 4, 4});
  CHECK(model.latent_dims() == 3 * 16 * 16);
  const auto z = model_forward(model, Tensor<float>::randn(model.input_shape(2), rng));
  CHECK(z.numel() == 2 * 3 * 16 * 16);
  CHECK(z.batch() == 2);
  CHECK(z.logdet.size() == 2);
  for (std::size_t i = 0; i < shapes.size(); ++i) CHECK(z.parts[i].shape() == shapes[i]);
}

TEST_CASE("fresh model logdet comes from actnorm init only") {
  Rng rng(3);
  FlowModel<double> model({3, 8, 8, 1, 3, CouplingKind::Affine, 8}, rng);
  const auto x = Tensor<double>::randn(model.input_shape(4), rng);
  const auto z = model_forward(model, x);
  double expected = 0.0;
  for (const auto& st : model.stages()) {
    if (const auto* an = dynamic_cast<const ActNorm<double>*>(st.layer.get())) {
      for (double s : an->scale().values()) expected += std::log(std::abs(s)) * 16.0;
    } else if (const auto* inv = dynamic_cast<const Inv1x1Conv<double>*>(st.layer.get())) {
      expected += inv->log_abs_det() * 16.0;
    }
  }
  for (double ld : z.logdet) CHECK(ld == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("zero latent through the identity model reconstructs zero") {
  Rng rng(4);
  FlowModel<double> model({3, 8, 8, 2, 2, CouplingKind::Affine, 8}, rng);
  make_identity(model);
  LatentBundle<double> z;
  for (const Shape& s : model.latent_shapes(2)) z.parts.emplace_back(s);
  z.logdet.assign(2, 0.0);
  const auto x = model_inverse(model, z);
  CHECK(x.shape() == model.input_shape(2));
  CHECK(max_abs(x) == 0.0);
}

TEST_CASE("32-bit model round trip") {
  Rng rng(5);
  FlowModel<float> model({3, 16, 16, 2, 2, CouplingKind::Affine, 16}, rng);
  const auto x = Tensor<float>::randn(model.input_shape(2), rng);
  (void)model_forward(model, x);  // initializes actnorm
  for (auto* p : model.parameters()) {
    for (float& v : p->value.values()) v += static_cast<float>(0.02 * rng.normal());
    p->touch();
  }
  CHECK(max_abs_diff(model_inverse(model, model_forward(model, x)), x) < 1e-4);
}

TEST_CASE("bundle and input shape errors") {
  Rng rng(6);
  FlowModel<float> model({3, 8, 8, 1, 1, CouplingKind::Affine, 8}, rng);
  auto z = model_forward(model, Tensor<float>::randn(model.input_shape(2), rng));
  auto missing = z;
  missing.parts.pop_back();
  CHECK_THROWS_AS(model_inverse(model, missing), ShapeError);
  auto wrong = z;
  wrong.parts[0] = Tensor<float>(Shape{2, 1, 4, 4});
  CHECK_THROWS_AS(model_inverse(model, wrong), ShapeError);
  CHECK_THROWS_AS(model_forward(model, Tensor<float>(Shape{2, 3, 4, 4})), ShapeError);
  NllResult<float> loss = nll(z);
  loss.dz.pop_back();
  CHECK_THROWS_AS(model_grad_recompute(model, z, loss.dz, std::span<const float>(loss.dlogdet)),
                  ShapeError);
}

TEST_CASE("parameter changes between forward and gradient are detected") {
  Rng rng(7);
  FlowModel<float> model({3, 8, 8, 1, 1, CouplingKind::Affine, 8}, rng);
  const auto x = Tensor<float>::randn(model.input_shape(2), rng);
  (void)model_forward(model, x);
  const auto gen = model.generation();
  auto z = model_forward(model, x);
  CHECK(z.generation == gen);
  NllResult<float> loss = nll(z);
  model.parameters()[0]->touch();
  CHECK(model.generation() != gen);
  CHECK_THROWS_AS(model_grad_recompute(model, z, loss.dz, std::span<const float>(loss.dlogdet)),
                  StaleBundleError);

  auto rec = model_forward_recording(model, x);
  loss = nll(rec.bundle);
  model.parameters()[1]->touch();
  CHECK_THROWS_AS(model_grad_from_tape(model, std::move(rec.tape), loss.dz,
                                       std::span<const float>(loss.dlogdet)),
                  StaleBundleError);
}

TEST_CASE("identity model gradient is an orthonormal rearrangement") {
  Rng rng(8);
  FlowModel<double> model({3, 8, 8, 2, 2, CouplingKind::Affine, 8}, rng);
  make_identity(model);
  const auto x = Tensor<double>::randn(model.input_shape(2), rng);
  auto z = model_forward(model, x);
  std::vector<Tensor<double>> dz;
  double dz_norm = 0.0;
  for (const auto& p : z.parts) {
    dz.push_back(Tensor<double>::randn(p.shape(), rng));
    dz_norm += squared_norm(dz.back());
  }
  const std::vector<double> dld(2, 0.0);
  auto dz_copy = dz;
  const auto dx_r = model_grad_recompute(model, std::move(z), std::move(dz), std::span<const double>(dld));
  CHECK(std::sqrt(squared_norm(dx_r)) == doctest::Approx(std::sqrt(dz_norm)).epsilon(1e-6));
  const auto dx_s = model_grad_store(model, x, std::move(dz_copy), std::span<const double>(dld));
  CHECK(max_abs_diff(dx_r, dx_s) < 1e-6);
}

TEST_CASE("end-to-end gradient matches finite differences of the NLL") {
  Rng rng(9);
  FlowModel<double> model({2, 4, 4, 1, 1, CouplingKind::Affine, 4}, rng);
  oracle::perturb(model, rng, 0.3);
  const auto x = Tensor<double>::randn(model.input_shape(1), rng);
  model.zero_grad();
  auto z = model_forward(model, x);
  NllResult<double> loss = nll(z);
  const auto dx = model_grad_recompute(model, std::move(z), std::move(loss.dz),
                                       std::span<const double>(loss.dlogdet));
  for (const auto& np : model.named_parameters()) {
    const auto fd = oracle::fd_gradient(np.param->value.values(),
                                        [&] { return model_nll(model, x); }, 1e-5,
                                        [&] { np.param->touch(); });
    CAPTURE(np.name);
    CHECK(oracle::scaled_max_error(fd, test::to_vec(np.param->grad)) < 1e-4);
  }
  Tensor<double> xv = x;
  const auto fd_x =
      oracle::fd_gradient(xv.values(), [&] { return model_nll(model, xv); }, 1e-5);
  CHECK(oracle::scaled_max_error(fd_x, test::to_vec(dx)) < 1e-4);
}

TEST_CASE("tiny model logdet matches the dense Jacobian") {
  Rng rng(10);
  FlowModel<double> model({2, 4, 4, 1, 2, CouplingKind::Affine, 4}, rng);
  oracle::perturb(model, rng, 0.3);
  const auto x = Tensor<double>::randn(model.input_shape(2), rng);
  const auto analytic = model_forward(model, x).logdet;
  const auto dense = oracle::dense_logdet(
      [&](const Tensor<double>& xi) {
        const auto z = model_forward(model, xi);
        std::vector<double> out;
        for (std::size_t s = 0; s < xi.shape().n; ++s) {
          const auto flat = oracle::flatten_sample(z, s);
          out.insert(out.end(), flat.begin(), flat.end());
        }
        return out;
      },
      x, 1e-5);
  CHECK(oracle::max_relative_error(dense, analytic, 1e-6) < 1e-3);
}

TEST_CASE("engines agree at 32-bit") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(seed);
    const auto coupling = seed % 2 == 0 ? CouplingKind::Affine : CouplingKind::Additive;
    FlowModel<float> model({3, 8, 8, 2, 2, coupling, 8}, rng);
    const auto x = Tensor<float>::randn(model.input_shape(2), rng);
    (void)model_forward(model, x);
    for (auto* p : model.parameters()) {
      for (float& v : p->value.values()) v += static_cast<float>(0.02 * rng.normal());
      p->touch();
    }
    model.zero_grad();
    auto z = model_forward(model, x);
    NllResult<float> loss = nll(z);
    const auto dx_r =
        model_grad_recompute(model, std::move(z), loss.dz, std::span<const float>(loss.dlogdet));
    const auto g_r = all_grads(model);
    model.zero_grad();
    const auto dx_s =
        model_grad_store(model, x, std::move(loss.dz), std::span<const float>(loss.dlogdet));
    CHECK(oracle::scaled_max_error(test::to_vec(dx_r), test::to_vec(dx_s)) < 1e-5);
    CHECK(oracle::scaled_max_error(g_r, all_grads(model)) < 1e-5);
  }
}

TEST_CASE("recompute peak is flat in depth and store peak grows") {
  BenchOptions o;
  o.batch = 2;
  o.hidden = 8;
  std::vector<std::size_t> rec, store;
  for (std::size_t k : {2, 4, 8, 16}) {
    Rng rng(0);
    FlowModel<float> model({3, 16, 16, 2, k, CouplingKind::Affine, 8}, rng);
    Rng data(1);
    const auto x = generate_toy<float>("blobs16", 2, data);
    rec.push_back(measure_step(model, x, Engine::Recompute, std::nullopt, false).activation_bytes());
    store.push_back(measure_step(model, x, Engine::Store, std::nullopt, false).activation_bytes());
  }
  CHECK(static_cast<double>(rec[3]) <= 1.10 * static_cast<double>(rec[0]));
  for (std::size_t i = 1; i < store.size(); ++i) CHECK(store[i] > store[i - 1]);
  CHECK(static_cast<double>(store[3]) >= 1.5 * static_cast<double>(store[0]));
}

TEST_CASE("sampling") {
  Rng rng(11);
  FlowModel<float> model({3, 16, 16, 2, 1, CouplingKind::Affine, 8}, rng);
  Rng s0(0);
  CHECK_THROWS_AS(sample(model, 4, s0), std::logic_error);
  (void)model_forward(model, Tensor<float>::randn(model.input_shape(4), rng));
  Rng a(3), b(3);
  const auto xa = sample(model, 4, a);
  const auto xb = sample(model, 4, b);
  CHECK(xa.shape() == Shape{4, 3, 16, 16});
  CHECK(std::memcmp(xa.data(), xb.data(), xa.bytes()) == 0);
}

TEST_CASE("identity model samples are white noise") {
  Rng rng(12);
  FlowModel<double> model({3, 16, 16, 2, 2, CouplingKind::Affine, 8}, rng);
  make_identity(model);
  Rng s(5);
  const auto x = sample(model, 16, s);
  REQUIRE(x.size() >= 10000);
  double sum = 0.0, sq = 0.0;
  for (double v : x.values()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(x.size());
  const double var = sq / n - (sum / n) * (sum / n);
  CHECK(var == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("model passes leave the meter balanced") {
  test::MeterBalance guard;
  {
    Rng rng(13);
    FlowModel<float> model({3, 8, 8, 2, 2, CouplingKind::Affine, 8}, rng);
    const auto x = Tensor<float>::randn(model.input_shape(2), rng);
    auto z = model_forward(model, x);
    NllResult<float> loss = nll(z);
    (void)model_grad_recompute(model, std::move(z), loss.dz, std::span<const float>(loss.dlogdet));
    (void)model_grad_store(model, x, std::move(loss.dz), std::span<const float>(loss.dlogdet));
    Rng s(1);
    (void)sample(model, 2, s);
  }
  CHECK(guard.leaked() == 0);
}
