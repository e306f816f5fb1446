#include "revflow/flow.h"

#include <stdexcept>

#include "revflow/errors.h"
#include "revflow/kernels.h"

namespace revflow {

std::string_view to_string(CouplingKind kind) {
  return kind == CouplingKind::Affine ? "affine" : "additive";
}

CouplingKind parse_coupling(std::string_view name) {
  if (name == "affine") return CouplingKind::Affine;
  if (name == "additive") return CouplingKind::Additive;
  throw std::invalid_argument("unknown coupling kind '" + std::string(name) +
                              "' (expected affine or additive)");
}

void FlowConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) {
    throw std::invalid_argument("flow input shape must be non-empty");
  }
  if (hidden == 0) throw std::invalid_argument("conditioner hidden width must be positive");
  if (scales > 16) throw std::invalid_argument("too many scales");
  const std::size_t factor = std::size_t{1} << scales;
  if (height % factor != 0 || width % factor != 0) {
    throw std::invalid_argument("input " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not divisible by 2^" + std::to_string(scales));
  }
  if (steps > 0) {
    const std::size_t step_channels = scales == 0 ? channels : 4 * channels;
    if (step_channels < 2) throw std::invalid_argument("coupling steps need >= 2 channels");
    if (coupling == CouplingKind::Affine && step_channels % 2 != 0) {
      throw std::invalid_argument("affine coupling needs an even channel count");
    }
  }
}

template <typename T>
std::size_t LatentBundle<T>::numel() const {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size();
  return total;
}

template <typename T>
FlowModel<T>::FlowModel(const FlowConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  auto add_steps = [&](std::size_t channels) {
    for (std::size_t k = 0; k < config_.steps; ++k) {
      stages_.push_back({std::make_unique<ActNorm<T>>(channels), std::nullopt});
      stages_.push_back({std::make_unique<Inv1x1Conv<T>>(channels, rng), std::nullopt});
      if (config_.coupling == CouplingKind::Affine) {
        stages_.push_back(
            {std::make_unique<AffineCoupling<T>>(channels, config_.hidden, rng), std::nullopt});
      } else {
        stages_.push_back(
            {std::make_unique<AdditiveCoupling<T>>(channels, config_.hidden, rng), std::nullopt});
      }
    }
  };

  if (config_.scales == 0) {
    add_steps(config_.channels);
    return;
  }
  std::size_t channels = config_.channels;
  for (std::size_t l = 0; l < config_.scales; ++l) {
    stages_.push_back({std::make_unique<HaarSqueeze<T>>(), std::nullopt});
    channels *= 4;
    add_steps(channels);
    if (l + 1 < config_.scales) {
      stages_.push_back({nullptr, FactorOut<T>(channels)});
      channels /= 2;
    }
  }
}

template <typename T>
Shape FlowModel<T>::input_shape(std::size_t batch) const {
  return {batch, config_.channels, config_.height, config_.width};
}

template <typename T>
std::vector<Shape> FlowModel<T>::latent_shapes(std::size_t batch) const {
  std::vector<Shape> shapes;
  Shape cur = input_shape(batch);
  for (const Stage& st : stages_) {
    if (st.factor) {
      shapes.push_back(st.factor->exit_shape(cur));
      cur = st.factor->kept_shape(cur);
    } else {
      cur = st.layer->output_shape(cur);
    }
  }
  shapes.push_back(cur);
  return shapes;
}

template <typename T>
std::size_t FlowModel<T>::latent_dims() const {
  std::size_t total = 0;
  for (const Shape& s : latent_shapes(1)) total += s.numel();
  return total;
}

template <typename T>
std::vector<NamedParameter<T>> FlowModel<T>::named_parameters() {
  std::vector<NamedParameter<T>> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (!stages_[i].layer) continue;
    for (Parameter<T>* p : stages_[i].layer->parameters()) {
      out.push_back({"layer" + std::to_string(i) + "." + p->name, p});
    }
  }
  return out;
}

template <typename T>
std::vector<Parameter<T>*> FlowModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (Stage& st : stages_) {
    if (!st.layer) continue;
    for (Parameter<T>* p : st.layer->parameters()) out.push_back(p);
  }
  return out;
}

template <typename T>
std::vector<std::size_t> FlowModel<T>::actnorm_stages() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (dynamic_cast<const ActNorm<T>*>(stages_[i].layer.get()) != nullptr) out.push_back(i);
  }
  return out;
}

template <typename T>
bool FlowModel<T>::initialized() const {
  for (std::size_t i : actnorm_stages()) {
    if (!static_cast<const ActNorm<T>*>(stages_[i].layer.get())->initialized()) return false;
  }
  return true;
}

template <typename T>
void FlowModel<T>::zero_grad() {
  for (Parameter<T>* p : parameters()) p->zero_grad();
}

template <typename T>
std::size_t FlowModel<T>::parameter_bytes() const {
  std::size_t total = 0;
  for (const Stage& st : stages_) {
    if (!st.layer) continue;
    for (const Parameter<T>* p : std::as_const(*st.layer).parameters()) total += p->bytes();
    total += st.layer->cache_bytes();
  }
  return total;
}

template <typename T>
std::uint64_t FlowModel<T>::generation() const {
  std::uint64_t g = 0;
  for (const Stage& st : stages_) {
    if (!st.layer) continue;
    for (const Parameter<T>* p : std::as_const(*st.layer).parameters()) g += p->version;
  }
  return g;
}

namespace {

template <typename T>
void check_input(const FlowModel<T>& model, const Tensor<T>& x) {
  const Shape& s = x.shape();
  const FlowConfig& c = model.config();
  if (x.empty() || s.c != c.channels || s.h != c.height || s.w != c.width) {
    throw ShapeError("flow input " + to_string(s) + " does not match model input " +
                     to_string(model.input_shape(s.n == 0 ? 1 : s.n)));
  }
}

template <typename T>
void check_parts(const FlowModel<T>& model, std::span<const Tensor<T>> parts, const char* what) {
  if (parts.empty()) throw ShapeError(std::string(what) + ": no latent parts");
  const std::vector<Shape> expected = model.latent_shapes(parts.front().shape().n);
  if (parts.size() != expected.size()) {
    throw ShapeError(std::string(what) + ": expected " + std::to_string(expected.size()) +
                     " latent parts, got " + std::to_string(parts.size()));
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!(parts[i].shape() == expected[i])) {
      throw ShapeError(std::string(what) + ": latent part " + std::to_string(i) + " is " +
                       to_string(parts[i].shape()) + ", expected " + to_string(expected[i]));
    }
  }
}

template <typename T>
void check_generation(const FlowModel<T>& model, std::uint64_t generation) {
  if (generation != model.generation()) {
    throw StaleBundleError(
        "parameters changed between the forward pass and the gradient computation");
  }
}

template <typename T>
void add_logdet(std::vector<T>& total, const std::vector<T>& layer) {
  for (std::size_t i = 0; i < total.size(); ++i) total[i] += layer[i];
}

}  // namespace

template <typename T>
LatentBundle<T> model_forward(FlowModel<T>& model, const Tensor<T>& x) {
  check_input(model, x);
  LatentBundle<T> bundle;
  bundle.logdet.assign(x.shape().n, T{0});
  const Tensor<T>* cur = &x;
  Tensor<T> held;
  for (auto& st : model.stages()) {
    if (st.factor) {
      auto [kept, exited] = st.factor->split(*cur);
      bundle.parts.push_back(std::move(exited));
      held = std::move(kept);
    } else {
      LayerForward<T> out = st.layer->forward(*cur);
      add_logdet(bundle.logdet, out.logdet);
      held = std::move(out.y);
    }
    cur = &held;
  }
  bundle.parts.push_back(cur == &x ? x : std::move(held));
  bundle.generation = model.generation();
  return bundle;
}

template <typename T>
Tensor<T> model_inverse(const FlowModel<T>& model, const LatentBundle<T>& bundle) {
  const std::span<const Tensor<T>> parts(bundle.parts);
  check_parts(model, parts, "model_inverse");
  std::size_t next_part = parts.size() - 1;
  const Tensor<T>* cur = &parts[next_part];
  Tensor<T> held;
  const auto& stages = model.stages();
  for (auto it = stages.rbegin(); it != stages.rend(); ++it) {
    if (it->factor) {
      held = it->factor->merge(*cur, parts[--next_part]);
    } else {
      held = it->layer->inverse(*cur);
    }
    cur = &held;
  }
  return cur == &held ? std::move(held) : *cur;
}

template <typename T>
Tensor<T> model_grad_recompute(FlowModel<T>& model, LatentBundle<T> bundle,
                               std::vector<Tensor<T>> dz, std::span<const T> dlogdet) {
  check_generation(model, bundle.generation);
  check_parts(model, std::span<const Tensor<T>>(bundle.parts), "model_grad_recompute");
  if (dz.size() != bundle.parts.size()) {
    throw ShapeError("model_grad_recompute: dz has " + std::to_string(dz.size()) +
                     " parts, bundle has " + std::to_string(bundle.parts.size()));
  }
  for (std::size_t i = 0; i < dz.size(); ++i) {
    if (!(dz[i].shape() == bundle.parts[i].shape())) {
      throw ShapeError("model_grad_recompute: dz part " + std::to_string(i) + " shape mismatch");
    }
  }
  if (dlogdet.size() != bundle.batch()) {
    throw ShapeError("model_grad_recompute: dlogdet size does not match the batch");
  }

  Tensor<T> y = std::move(bundle.parts.back());
  bundle.parts.pop_back();
  Tensor<T> dy = std::move(dz.back());
  dz.pop_back();
  auto& stages = model.stages();
  for (auto it = stages.rbegin(); it != stages.rend(); ++it) {
    if (it->factor) {
      y = it->factor->merge(y, bundle.parts.back());
      bundle.parts.pop_back();
      dy = it->factor->merge(dy, dz.back());
      dz.pop_back();
    } else {
      LayerBackward<T> g = it->layer->backward(dy, y, dlogdet);
      y = std::move(g.x);
      dy = std::move(g.dx);
    }
  }
  return dy;
}

template <typename T>
std::size_t Tape<T>::bytes() const {
  std::size_t total = 0;
  for (const auto& s : saved) total += s.bytes();
  return total;
}

template <typename T>
Recording<T> model_forward_recording(FlowModel<T>& model, const Tensor<T>& x) {
  check_input(model, x);
  Recording<T> rec;
  rec.bundle.logdet.assign(x.shape().n, T{0});
  rec.tape.saved.resize(model.stages().size());
  const Tensor<T>* cur = &x;
  Tensor<T> held;
  std::size_t i = 0;
  for (auto& st : model.stages()) {
    if (st.factor) {
      auto [kept, exited] = st.factor->split(*cur);
      rec.bundle.parts.push_back(std::move(exited));
      held = std::move(kept);
    } else {
      LayerForward<T> out = st.layer->forward_saving(*cur, rec.tape.saved[i]);
      add_logdet(rec.bundle.logdet, out.logdet);
      held = std::move(out.y);
    }
    cur = &held;
    ++i;
  }
  rec.bundle.parts.push_back(cur == &x ? x : std::move(held));
  rec.bundle.generation = model.generation();
  rec.tape.generation = rec.bundle.generation;
  return rec;
}

template <typename T>
Tensor<T> model_grad_from_tape(FlowModel<T>& model, Tape<T> tape, std::vector<Tensor<T>> dz,
                               std::span<const T> dlogdet) {
  check_generation(model, tape.generation);
  check_parts(model, std::span<const Tensor<T>>(dz), "model_grad_from_tape");
  if (tape.saved.size() != model.stages().size()) {
    throw std::logic_error("model_grad_from_tape: tape does not belong to this model");
  }
  if (dlogdet.size() != dz.front().shape().n) {
    throw ShapeError("model_grad_from_tape: dlogdet size does not match the batch");
  }
  Tensor<T> dy = std::move(dz.back());
  dz.pop_back();
  auto& stages = model.stages();
  for (std::size_t i = stages.size(); i-- > 0;) {
    if (stages[i].factor) {
      dy = stages[i].factor->merge(dy, dz.back());
      dz.pop_back();
    } else {
      dy = stages[i].layer->backward_saved(dy, std::move(tape.saved[i]), dlogdet);
    }
    tape.saved[i] = SavedActivations<T>{};
  }
  return dy;
}

template <typename T>
Tensor<T> model_grad_store(FlowModel<T>& model, const Tensor<T>& x, std::vector<Tensor<T>> dz,
                           std::span<const T> dlogdet) {
  Recording<T> rec = model_forward_recording(model, x);
  rec.bundle.parts.clear();
  return model_grad_from_tape(model, std::move(rec.tape), std::move(dz), dlogdet);
}

template <typename T>
Tensor<T> sample(const FlowModel<T>& model, std::size_t n, Rng& rng) {
  if (n == 0) throw ShapeError("sample: n must be positive");
  if (!model.initialized()) {
    throw std::logic_error("sample: model has uninitialized actnorm layers");
  }
  LatentBundle<T> z;
  for (const Shape& s : model.latent_shapes(n)) z.parts.push_back(Tensor<T>::randn(s, rng));
  return model_inverse(model, z);
}

#define REVFLOW_INSTANTIATE_FLOW(T)                                                           \
  template struct LatentBundle<T>;                                                            \
  template class FlowModel<T>;                                                                \
  template struct Tape<T>;                                                                    \
  template LatentBundle<T> model_forward(FlowModel<T>&, const Tensor<T>&);                    \
  template Tensor<T> model_inverse(const FlowModel<T>&, const LatentBundle<T>&);              \
  template Tensor<T> model_grad_recompute(FlowModel<T>&, LatentBundle<T>,                     \
                                          std::vector<Tensor<T>>, std::span<const T>);        \
  template Recording<T> model_forward_recording(FlowModel<T>&, const Tensor<T>&);             \
  template Tensor<T> model_grad_from_tape(FlowModel<T>&, Tape<T>, std::vector<Tensor<T>>,     \
                                          std::span<const T>);                                \
  template Tensor<T> model_grad_store(FlowModel<T>&, const Tensor<T>&, std::vector<Tensor<T>>, \
                                      std::span<const T>);                                    \
  template Tensor<T> sample(const FlowModel<T>&, std::size_t, Rng&);

REVFLOW_INSTANTIATE_FLOW(float)
REVFLOW_INSTANTIATE_FLOW(double)

}  // namespace revflow
