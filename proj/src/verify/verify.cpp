#include "revflow/verify.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <stdexcept>

#include "revflow/flow.h"
#include "revflow/kernels.h"
#include "revflow/layers.h"
#include "revflow/oracle.h"
#include "revflow/train.h"

namespace revflow {

namespace {

using oracle::max_relative_error;
using oracle::scaled_max_error;
using D = double;

constexpr std::array<std::string_view, 9> kGroups = {
    "conv", "conditioner", "actnorm", "inv1x1", "affine", "additive", "haar", "model", "engines"};

constexpr double kStep = 1e-5;
constexpr double kRoundTripTol = 1e-10;
// Gradient errors are max |analytic - fd| over a tensor divided by the
// tensor's largest entry: central differences at step 1e-5 carry round-off
// near eps * |L| / step, which swamps a per-entry ratio for tiny entries.
constexpr double kGradTol = 1e-4;
constexpr double kLogdetTol = 1e-3;
constexpr double kLogdetFloor = 1e-6;
constexpr double kEngineTol = 1e-9;
constexpr std::size_t kHidden = 16;

class Suite {
 public:
  Suite(const VerifyOptions& options, const std::function<void(const CheckResult&)>& on_result)
      : options_(options), on_result_(on_result) {}

  bool wants(std::string_view group) const { return options_.only.empty() || options_.only == group; }

  void record(std::string_view group, std::string name, double error, double tolerance) {
    CheckResult r{std::string(group), std::move(name), error, tolerance,
                  std::isfinite(error) && error < tolerance};
    if (on_result_) on_result_(r);
    results_.push_back(std::move(r));
  }

  std::vector<CheckResult> take() { return std::move(results_); }

 private:
  const VerifyOptions& options_;
  const std::function<void(const CheckResult&)>& on_result_;
  std::vector<CheckResult> results_;
};

std::vector<double> to_vec(const Tensor<D>& t) { return {t.values().begin(), t.values().end()}; }

// L = <c, y> + sum_n w_n logdet_n
double layer_objective(InvertibleLayer<D>& layer, const Tensor<D>& x, const Tensor<D>& c,
                       std::span<const D> w) {
  const LayerForward<D> out = layer.forward(x);
  double total = dot(c, out.y);
  for (std::size_t n = 0; n < w.size(); ++n) total += w[n] * out.logdet[n];
  return total;
}

void check_layer(Suite& suite, std::string_view group, InvertibleLayer<D>& layer, const Shape& in,
                 Rng& rng, bool check_logdet) {
  Tensor<D> x = Tensor<D>::randn(in, rng);
  const LayerForward<D> fwd = layer.forward(x);
  suite.record(group, "round trip", max_abs_diff(layer.inverse(fwd.y), x), kRoundTripTol);

  const Tensor<D> c = Tensor<D>::randn(fwd.y.shape(), rng);
  std::vector<D> w(in.n);
  for (D& v : w) v = rng.normal();

  for (Parameter<D>* p : layer.parameters()) p->zero_grad();
  const LayerBackward<D> bwd = layer.backward(c, fwd.y, w);
  suite.record(group, "input reconstruction in backward", max_abs_diff(bwd.x, x), kRoundTripTol);

  auto objective = [&] { return layer_objective(layer, x, c, w); };
  const std::vector<double> fd_dx = oracle::fd_gradient(x.values(), objective, kStep);
  suite.record(group, "input gradient vs finite differences",
               scaled_max_error(to_vec(bwd.dx), fd_dx), kGradTol);

  for (Parameter<D>* p : layer.parameters()) {
    const std::vector<double> analytic = to_vec(p->grad);
    const std::vector<double> fd =
        oracle::fd_gradient(p->value.values(), objective, kStep, [p] { p->touch(); });
    suite.record(group, p->name + " gradient vs finite differences",
                 scaled_max_error(analytic, fd), kGradTol);
  }

  // Store-all path: same gradients from saved activations.
  std::vector<std::vector<double>> recompute_grads;
  for (Parameter<D>* p : layer.parameters()) recompute_grads.push_back(to_vec(p->grad));
  for (Parameter<D>* p : layer.parameters()) p->zero_grad();
  SavedActivations<D> saved;
  layer.forward_saving(x, saved);
  const Tensor<D> dx_saved = layer.backward_saved(c, std::move(saved), w);
  double engine_err = scaled_max_error(to_vec(dx_saved), to_vec(bwd.dx));
  std::size_t k = 0;
  for (Parameter<D>* p : layer.parameters()) {
    engine_err = std::max(engine_err, scaled_max_error(to_vec(p->grad), recompute_grads[k++]));
  }
  suite.record(group, "stored vs recomputed backward", engine_err, kEngineTol);
  for (Parameter<D>* p : layer.parameters()) p->zero_grad();

  if (check_logdet) {
    const std::vector<double> dense = oracle::dense_logdet(
        [&](const Tensor<D>& probe) { return to_vec(layer.forward(probe).y); }, x, kStep);
    const std::vector<double> analytic(fwd.logdet.begin(), fwd.logdet.end());
    suite.record(group, "logdet vs dense jacobian",
                 max_relative_error(analytic, dense, kLogdetFloor), kLogdetTol);
  }
}

void conv_group(Suite& suite, Rng& rng) {
  const Shape xs{2, 3, 5, 4};
  Tensor<D> x = Tensor<D>::randn(xs, rng);
  Tensor<D> w = Tensor<D>::randn(Shape{4, 3, 3, 3}, rng);
  Tensor<D> b = Tensor<D>::randn(Shape{1, 4, 1, 1}, rng);
  const Tensor<D> c = Tensor<D>::randn(Shape{2, 4, 5, 4}, rng);
  const Conv3x3Grads<D> g = conv3x3_backward(x, w, c);
  auto objective = [&] { return dot(c, conv3x3(x, w, b)); };
  suite.record("conv", "input gradient vs finite differences",
               scaled_max_error(to_vec(g.dx), oracle::fd_gradient(x.values(), objective, kStep)),
               kGradTol);
  suite.record("conv", "weight gradient vs finite differences",
               scaled_max_error(to_vec(g.dweight),
                                  oracle::fd_gradient(w.values(), objective, kStep)),
               kGradTol);
  suite.record("conv", "bias gradient vs finite differences",
               scaled_max_error(to_vec(g.dbias),
                                  oracle::fd_gradient(b.values(), objective, kStep)),
               kGradTol);
}

void conditioner_group(Suite& suite, Rng& rng) {
  Conditioner<D> net(2, 6, kHidden, rng);
  for (Parameter<D>* p : net.parameters()) {
    for (D& v : p->value.values()) v += 0.2 * rng.normal();
  }
  Tensor<D> x = Tensor<D>::randn(Shape{2, 2, 4, 3}, rng);
  const Tensor<D> c = Tensor<D>::randn(Shape{2, 6, 4, 3}, rng);
  for (Parameter<D>* p : net.parameters()) p->zero_grad();
  const Tensor<D> dx = net.backward(x, c);
  auto objective = [&] { return dot(c, net.forward(x)); };
  suite.record("conditioner", "input gradient vs finite differences",
               scaled_max_error(to_vec(dx), oracle::fd_gradient(x.values(), objective, kStep)),
               kGradTol);
  for (Parameter<D>* p : net.parameters()) {
    suite.record("conditioner", p->name + " gradient vs finite differences",
                 scaled_max_error(to_vec(p->grad),
                                    oracle::fd_gradient(p->value.values(), objective, kStep)),
                 kGradTol);
  }
}

FlowModel<D> make_model(std::size_t c, std::size_t h, std::size_t w, std::size_t scales,
                        std::size_t steps, CouplingKind coupling, Rng& rng) {
  FlowConfig cfg;
  cfg.channels = c;
  cfg.height = h;
  cfg.width = w;
  cfg.scales = scales;
  cfg.steps = steps;
  cfg.coupling = coupling;
  cfg.hidden = kHidden;
  FlowModel<D> model(cfg, rng);
  oracle::perturb(model, rng, 0.1);
  return model;
}

std::string describe(const FlowConfig& c, std::size_t n) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "(%zu,%zu,%zu,%zu) L=%zu K=%zu %s", n, c.channels, c.height,
                c.width, c.scales, c.steps, c.coupling == CouplingKind::Affine ? "affine" : "additive");
  return buf;
}

double model_nll_sum(FlowModel<D>& model, const Tensor<D>& x) {
  double total = 0.0;
  for (double v : nll_values(model_forward(model, x))) total += v;
  return total;
}

void model_group(Suite& suite, Rng& rng) {
  struct Arch {
    std::size_t n, c, h, w, scales, steps;
    CouplingKind coupling;
  };
  constexpr Arch round_trip[] = {
      {16, 2, 1, 1, 0, 4, CouplingKind::Affine},   {2, 3, 8, 8, 1, 2, CouplingKind::Affine},
      {2, 3, 16, 16, 2, 2, CouplingKind::Affine},  {1, 3, 16, 16, 3, 8, CouplingKind::Affine},
      {2, 3, 16, 16, 2, 4, CouplingKind::Additive},
  };
  for (const Arch& a : round_trip) {
    FlowModel<D> model = make_model(a.c, a.h, a.w, a.scales, a.steps, a.coupling, rng);
    const Tensor<D> x = Tensor<D>::randn(model.input_shape(a.n), rng);
    const double err = max_abs_diff(model_inverse(model, model_forward(model, x)), x);
    suite.record("model", "round trip " + describe(model.config(), a.n), err, kRoundTripTol);
  }

  // Tiny models: D <= 32 for dense Jacobians, <= 64 latent dims for gradients.
  constexpr Arch tiny[] = {
      {2, 2, 1, 1, 0, 3, CouplingKind::Affine},
      {1, 2, 4, 4, 1, 1, CouplingKind::Affine},
      {2, 2, 4, 4, 2, 1, CouplingKind::Affine},
      {1, 2, 4, 4, 1, 2, CouplingKind::Additive},
  };
  for (const Arch& a : tiny) {
    FlowModel<D> model = make_model(a.c, a.h, a.w, a.scales, a.steps, a.coupling, rng);
    Tensor<D> x = Tensor<D>::randn(model.input_shape(a.n), rng);
    const std::string tag = describe(model.config(), a.n);
    const LatentBundle<D> z = model_forward(model, x);

    const std::vector<double> dense = oracle::dense_logdet(
        [&](const Tensor<D>& probe) {
          const LatentBundle<D> b = model_forward(model, probe);
          std::vector<double> flat;
          for (std::size_t s = 0; s < a.n; ++s) {
            const auto v = oracle::flatten_sample(b, s);
            flat.insert(flat.end(), v.begin(), v.end());
          }
          return flat;
        },
        x, kStep);
    const std::vector<double> analytic(z.logdet.begin(), z.logdet.end());
    suite.record("model", "logdet vs dense jacobian " + tag,
                 max_relative_error(analytic, dense, kLogdetFloor), kLogdetTol);

    // Change of variables with the dense determinant.
    const std::vector<double> nll_z = nll_values(z);
    std::vector<double> reference(a.n);
    const double dims = static_cast<double>(model.latent_dims());
    for (std::size_t s = 0; s < a.n; ++s) {
      double sq = 0.0;
      for (double v : oracle::flatten_sample(z, s)) sq += v * v;
      reference[s] = 0.5 * sq + 0.5 * dims * std::log(2.0 * std::numbers::pi) - dense[s];
    }
    suite.record("model", "nll vs dense change of variables " + tag,
                 max_relative_error(nll_z, reference, kLogdetFloor), kLogdetTol);

    // End-to-end gradient of the summed NLL.
    model.zero_grad();
    {
      LatentBundle<D> bundle = model_forward(model, x);
      NllResult<D> r = nll(bundle);
      const Tensor<D> dx =
          model_grad_recompute(model, std::move(bundle), std::move(r.dz), std::span<const D>(r.dlogdet));
      auto objective = [&] { return model_nll_sum(model, x); };
      suite.record("model", "input gradient vs finite differences " + tag,
                   scaled_max_error(to_vec(dx), oracle::fd_gradient(x.values(), objective, kStep)),
                   kGradTol);
      double worst = 0.0;
      for (const auto& np : model.named_parameters()) {
        Parameter<D>* p = np.param;
        const std::vector<double> fd =
            oracle::fd_gradient(p->value.values(), objective, kStep, [p] { p->touch(); });
        worst = std::max(worst, scaled_max_error(to_vec(p->grad), fd));
      }
      suite.record("model", "parameter gradients vs finite differences " + tag, worst, kGradTol);
    }
    model.zero_grad();
  }

  // Freshly built model with identity actnorm: Haar is orthonormal, every
  // other layer is orthogonal or the identity, so the gradient keeps its norm.
  {
    FlowConfig cfg;
    cfg.channels = 3;
    cfg.height = 8;
    cfg.width = 8;
    cfg.scales = 2;
    cfg.steps = 2;
    cfg.hidden = kHidden;
    FlowModel<D> model(cfg, rng);
    for (std::size_t i : model.actnorm_stages()) {
      auto* an = static_cast<ActNorm<D>*>(model.stages()[i].layer.get());
      const std::vector<D> ones(an->scale().size(), 1.0);
      const std::vector<D> zeros(an->scale().size(), 0.0);
      an->set(ones, zeros);
    }
    const Tensor<D> x = Tensor<D>::randn(model.input_shape(2), rng);
    LatentBundle<D> bundle = model_forward(model, x);
    std::vector<Tensor<D>> dz;
    double dz_sq = 0.0;
    for (const Shape& s : model.latent_shapes(2)) {
      dz.push_back(Tensor<D>::randn(s, rng));
      dz_sq += squared_norm(dz.back());
    }
    const std::vector<D> zero_dlogdet(2, 0.0);
    const Tensor<D> dx = model_grad_recompute(model, std::move(bundle), std::move(dz),
                                              std::span<const D>(zero_dlogdet));
    suite.record("model", "identity model preserves gradient norm",
                 std::abs(std::sqrt(squared_norm(dx)) - std::sqrt(dz_sq)) / std::sqrt(dz_sq), 1e-6);
    model.zero_grad();
  }
}

void engines_group(Suite& suite, Rng& rng) {
  for (std::size_t trial = 0; trial < 4; ++trial) {
    const std::size_t scales = trial % 3;
    const std::size_t size = scales == 0 ? 1 : 8;
    const std::size_t channels = scales == 0 ? 4 : 2;
    const CouplingKind coupling = trial == 3 ? CouplingKind::Additive : CouplingKind::Affine;
    FlowModel<D> model = make_model(channels, size, size, scales, 2, coupling, rng);
    const Tensor<D> x = Tensor<D>::randn(model.input_shape(3), rng);

    LatentBundle<D> bundle = model_forward(model, x);
    NllResult<D> r = nll(bundle);
    std::vector<Tensor<D>> dz_copy = r.dz;
    const Tensor<D> dx_re =
        model_grad_recompute(model, std::move(bundle), std::move(r.dz), std::span<const D>(r.dlogdet));
    std::vector<std::vector<double>> grads_re;
    for (Parameter<D>* p : model.parameters()) grads_re.push_back(to_vec(p->grad));
    model.zero_grad();

    const Tensor<D> dx_st =
        model_grad_store(model, x, std::move(dz_copy), std::span<const D>(r.dlogdet));
    double err = scaled_max_error(to_vec(dx_re), to_vec(dx_st));
    std::size_t k = 0;
    for (Parameter<D>* p : model.parameters()) {
      err = std::max(err, scaled_max_error(grads_re[k++], to_vec(p->grad)));
    }
    model.zero_grad();
    suite.record("engines", "recompute vs store " + describe(model.config(), 3), err, kEngineTol);
  }
}

}  // namespace

std::span<const std::string_view> verify_groups() { return kGroups; }

std::vector<CheckResult> run_verify(const VerifyOptions& options,
                                    const std::function<void(const CheckResult&)>& on_result) {
  if (!options.only.empty() &&
      std::find(kGroups.begin(), kGroups.end(), options.only) == kGroups.end()) {
    throw std::invalid_argument("unknown verify group '" + options.only + "'");
  }
  Suite suite(options, on_result);
  Rng rng(options.seed);

  if (suite.wants("conv")) conv_group(suite, rng);
  if (suite.wants("conditioner")) conditioner_group(suite, rng);
  if (suite.wants("actnorm")) {
    ActNorm<D> layer(3);
    oracle::perturb(layer, rng, 0.3);
    check_layer(suite, "actnorm", layer, Shape{2, 3, 3, 3}, rng, true);
  }
  if (suite.wants("inv1x1")) {
    Inv1x1Conv<D> layer(4, rng);
    oracle::perturb(layer, rng, 0.3);
    check_layer(suite, "inv1x1", layer, Shape{2, 4, 2, 3}, rng, true);
  }
  if (suite.wants("affine")) {
    AffineCoupling<D> layer(4, kHidden, rng);
    oracle::perturb(layer, rng, 0.3);
    check_layer(suite, "affine", layer, Shape{2, 4, 2, 3}, rng, true);
  }
  if (suite.wants("additive")) {
    AdditiveCoupling<D> layer(5, kHidden, rng);
    oracle::perturb(layer, rng, 0.3);
    check_layer(suite, "additive", layer, Shape{2, 5, 2, 3}, rng, true);
  }
  if (suite.wants("haar")) {
    HaarSqueeze<D> layer;
    check_layer(suite, "haar", layer, Shape{2, 2, 4, 4}, rng, true);
  }
  if (suite.wants("model")) model_group(suite, rng);
  if (suite.wants("engines")) engines_group(suite, rng);
  return suite.take();
}

bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.pass; });
}

void print_verify_table(std::ostream& os, const std::vector<CheckResult>& results) {
  std::size_t name_width = 5;
  for (const auto& r : results) name_width = std::max(name_width, r.name.size());
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-12s", "group");
  os << buf << ' ' << std::string("check") << std::string(name_width - 5, ' ')
     << "       error   tolerance  result\n";
  std::size_t passed = 0;
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%-12s", r.group.c_str());
    os << buf << ' ' << r.name << std::string(name_width - r.name.size(), ' ');
    std::snprintf(buf, sizeof buf, "  %10.3e  %10.3e  %s", r.error, r.tolerance,
                  r.pass ? "PASS" : "FAIL");
    os << buf << '\n';
    passed += r.pass ? 1 : 0;
  }
  os << passed << "/" << results.size() << " checks passed\n";
}

}  // namespace revflow
