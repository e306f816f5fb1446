#include "revflow/rng.h"

#include <cmath>
#include <numbers>

namespace revflow {
namespace {

__extension__ typedef unsigned __int128 u128;

constexpr u128 make_u128(std::uint64_t hi, std::uint64_t lo) {
  return (static_cast<u128>(hi) << 64) | lo;
}

constexpr u128 kMultiplier = make_u128(2549297995355413924ULL, 4865540595714422341ULL);
constexpr u128 kIncrement = make_u128(6364136223846793005ULL, 1442695040888963407ULL);

}  // namespace

Rng::Rng(std::uint64_t seed) : increment_(kIncrement), seed_(seed) {
  state_ = static_cast<u128>(seed) + increment_;
  step();
}

void Rng::step() { state_ = state_ * kMultiplier + increment_; }

std::uint64_t Rng::next_u64() {
  step();
  const auto hi = static_cast<std::uint64_t>(state_ >> 64);
  const auto lo = static_cast<std::uint64_t>(state_);
  const auto rot = static_cast<unsigned>(state_ >> 122);
  const std::uint64_t x = hi ^ lo;
  return (x >> rot) | (x << ((64U - rot) & 63U));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound <= 1) return 0;
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= threshold) return r % bound;
  }
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // 1 - uniform() lies in (0, 1], keeping log finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

}  // namespace revflow
