#include "revflow/oracle.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace revflow::oracle {

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw std::invalid_argument("max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

double scaled_max_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("scaled_max_error: size mismatch");
  double scale = 1e-300;
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / scale;
}

std::vector<double> fd_gradient(std::span<double> values, const std::function<double()>& f,
                                double step, const std::function<void()>& changed) {
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + step;
    if (changed) changed();
    const double up = f();
    values[i] = orig - step;
    if (changed) changed();
    const double down = f();
    values[i] = orig;
    if (changed) changed();
    g[i] = (up - down) / (2.0 * step);
  }
  return g;
}

std::vector<double> fd_jacobian(
    const std::function<std::vector<double>(std::span<const double>)>& f,
    std::span<const double> x, double step) {
  const std::size_t d = x.size();
  std::vector<double> point(x.begin(), x.end());
  std::vector<double> jac(d * d);
  for (std::size_t j = 0; j < d; ++j) {
    point[j] = x[j] + step;
    const std::vector<double> up = f(point);
    point[j] = x[j] - step;
    const std::vector<double> down = f(point);
    point[j] = x[j];
    if (up.size() != d || down.size() != d) {
      throw std::invalid_argument("fd_jacobian: map is not square");
    }
    for (std::size_t i = 0; i < d; ++i) jac[i * d + j] = (up[i] - down[i]) / (2.0 * step);
  }
  return jac;
}

double log_abs_det(std::span<const double> matrix, std::size_t d) {
  if (matrix.size() != d * d) throw std::invalid_argument("log_abs_det: not a d x d matrix");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
      matrix.data(), static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  const auto& u = lu.matrixLU();
  double total = 0.0;
  for (Eigen::Index i = 0; i < u.rows(); ++i) total += std::log(std::abs(u(i, i)));
  return total;
}

std::vector<double> dense_logdet(const std::function<std::vector<double>(const Tensor<double>&)>& f,
                                 const Tensor<double>& x, double step) {
  const Shape& s = x.shape();
  const std::size_t per = s.c * s.h * s.w;
  std::vector<double> out(s.n);
  for (std::size_t n = 0; n < s.n; ++n) {
    auto sample_map = [&](std::span<const double> v) {
      Tensor<double> probe = x;
      std::copy(v.begin(), v.end(), probe.data() + n * per);
      const std::vector<double> y = f(probe);
      const std::size_t out_per = y.size() / s.n;
      return std::vector<double>(y.begin() + static_cast<std::ptrdiff_t>(n * out_per),
                                 y.begin() + static_cast<std::ptrdiff_t>((n + 1) * out_per));
    };
    const std::span<const double> xs(x.data() + n * per, per);
    out[n] = log_abs_det(fd_jacobian(sample_map, xs, step), per);
  }
  return out;
}

void perturb(InvertibleLayer<double>& layer, Rng& rng, double scale) {
  for (Parameter<double>* p : layer.parameters()) {
    // Weights (c_out, c_in, kh, kw) get noise scaled by 1/sqrt(fan-in) so a
    // deep stack stays well conditioned; per-channel vectors get it unscaled.
    const Shape& s = p->value.shape();
    const double fan_in = s.n > 1 ? static_cast<double>(s.c * s.h * s.w) : 1.0;
    const double sigma = scale / std::sqrt(fan_in);
    for (double& v : p->value.values()) v += sigma * rng.normal();
    p->touch();
  }
  if (auto* an = dynamic_cast<ActNorm<double>*>(&layer)) an->set_initialized(true);
}

void perturb(FlowModel<double>& model, Rng& rng, double scale) {
  for (auto& st : model.stages()) {
    if (st.layer) perturb(*st.layer, rng, scale);
  }
}

std::vector<double> flatten_sample(const LatentBundle<double>& bundle, std::size_t s) {
  std::vector<double> out;
  for (const Tensor<double>& part : bundle.parts) {
    const std::size_t per = part.size() / part.shape().n;
    out.insert(out.end(), part.data() + s * per, part.data() + (s + 1) * per);
  }
  return out;
}

}  // namespace revflow::oracle
