#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "revflow/train.h"

namespace revflow {

namespace {

constexpr std::array<std::string_view, 3> kPointDatasets = {"two_moons", "eight_gaussians",
                                                            "checkerboard"};

constexpr double kMoonNoise = 0.1;
// Variance of a standard normal truncated to [-3, 3].
constexpr double kTruncatedVariance = 0.973337;

double truncated_normal(Rng& rng, double sigma) {
  for (;;) {
    const double e = rng.normal();
    if (std::abs(e) <= 3.0) return sigma * e;
  }
}

struct Moments {
  double mean_x, mean_y, var_x, var_y;
};

// Moon A: rho (cos t, sin t); moon B: (1 - rho cos t, 0.5 - rho sin t);
// t ~ U[0, pi], rho = 1 + noise, moons equally likely.
Moments two_moons_moments() {
  const double e_rho2 = 1.0 + kMoonNoise * kMoonNoise * kTruncatedVariance;
  return {0.5, 0.25, 0.5 * e_rho2 + 0.25, 0.5 * e_rho2 + 0.125 - 1.0 / std::numbers::pi - 0.0625};
}

void two_moons(std::span<double> xy, Rng& rng) {
  const double t = std::numbers::pi * rng.uniform();
  const double rho = 1.0 + truncated_normal(rng, kMoonNoise);
  if (rng.below(2) == 0) {
    xy[0] = rho * std::cos(t);
    xy[1] = rho * std::sin(t);
  } else {
    xy[0] = 1.0 - rho * std::cos(t);
    xy[1] = 0.5 - rho * std::sin(t);
  }
}

constexpr double kGaussianRadius = 2.0;
constexpr double kGaussianSigma = 0.2;

void eight_gaussians(std::span<double> xy, Rng& rng) {
  const double angle = static_cast<double>(rng.below(8)) * std::numbers::pi / 4.0;
  xy[0] = kGaussianRadius * std::cos(angle) + kGaussianSigma * rng.normal();
  xy[1] = kGaussianRadius * std::sin(angle) + kGaussianSigma * rng.normal();
}

// 4x4 board on [-2, 2]^2; cells with even (row + col) are filled.
void checkerboard(std::span<double> xy, Rng& rng) {
  const auto col = rng.below(4);
  const auto row = 2 * rng.below(2) + (col % 2);
  xy[0] = -2.0 + static_cast<double>(col) + rng.uniform();
  xy[1] = -2.0 + static_cast<double>(row) + rng.uniform();
}

template <typename T>
Tensor<T> points(std::string_view name, std::size_t n, Rng& rng, bool standardize) {
  Moments m{};
  void (*draw)(std::span<double>, Rng&) = nullptr;
  if (name == "two_moons") {
    draw = two_moons;
    m = two_moons_moments();
  } else if (name == "eight_gaussians") {
    draw = eight_gaussians;
    const double v = kGaussianRadius * kGaussianRadius / 2.0 + kGaussianSigma * kGaussianSigma;
    m = {0.0, 0.0, v, v};
  } else {
    draw = checkerboard;
    m = {0.0, 0.0, 4.0 / 3.0, 4.0 / 3.0};
  }
  const double sx = std::sqrt(m.var_x);
  const double sy = std::sqrt(m.var_y);
  Tensor<T> out(Shape{n, 2, 1, 1});
  std::array<double, 2> xy{};
  for (std::size_t i = 0; i < n; ++i) {
    draw(xy, rng);
    if (standardize) {
      xy[0] = (xy[0] - m.mean_x) / sx;
      xy[1] = (xy[1] - m.mean_y) / sy;
    }
    out(i, 0, 0, 0) = static_cast<T>(xy[0]);
    out(i, 1, 0, 0) = static_cast<T>(xy[1]);
  }
  return out;
}

// A few soft colored discs on a dark background plus pixel noise.
template <typename T>
Tensor<T> blobs(std::size_t n, std::size_t size, Rng& rng) {
  constexpr std::size_t kBlobs = 3;
  constexpr double kNoise = 0.05;
  Tensor<T> out(Shape{n, 3, size, size});
  const double s = static_cast<double>(size);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<std::array<double, 6>, kBlobs> shape_params{};
    for (auto& b : shape_params) {
      b[0] = s * rng.uniform();
      b[1] = s * rng.uniform();
      b[2] = s * (0.08 + 0.12 * rng.uniform());
      for (std::size_t c = 0; c < 3; ++c) b[3 + c] = rng.uniform();
    }
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          double v = 0.0;
          for (const auto& b : shape_params) {
            const double dx = static_cast<double>(x) - b[0];
            const double dy = static_cast<double>(y) - b[1];
            v += b[3 + c] * std::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
          }
          out(i, c, y, x) = static_cast<T>(v + kNoise * rng.normal() - 0.5);
        }
      }
    }
  }
  return out;
}

}  // namespace

std::span<const std::string_view> toy_dataset_names() { return kPointDatasets; }

bool is_point_dataset(std::string_view name) {
  for (auto known : kPointDatasets) {
    if (name == known) return true;
  }
  return false;
}

std::optional<std::size_t> blobs_size(std::string_view name) {
  constexpr std::string_view prefix = "blobs";
  if (name.substr(0, prefix.size()) != prefix || name.size() == prefix.size()) return std::nullopt;
  std::size_t value = 0;
  for (char ch : name.substr(prefix.size())) {
    if (ch < '0' || ch > '9') return std::nullopt;
    value = value * 10 + static_cast<std::size_t>(ch - '0');
    if (value > 4096) return std::nullopt;
  }
  if (value == 0) return std::nullopt;
  return value;
}

template <typename T>
Tensor<T> generate_toy(std::string_view name, std::size_t n, Rng& rng, bool standardize) {
  if (n == 0) throw std::invalid_argument("generate_toy: n must be positive");
  if (is_point_dataset(name)) return points<T>(name, n, rng, standardize);
  if (auto size = blobs_size(name)) return blobs<T>(n, *size, rng);
  throw std::invalid_argument("unknown dataset '" + std::string(name) +
                              "' (expected two_moons, eight_gaussians, checkerboard or blobs<S>)");
}

template Tensor<float> generate_toy(std::string_view, std::size_t, Rng&, bool);
template Tensor<double> generate_toy(std::string_view, std::size_t, Rng&, bool);

}  // namespace revflow
