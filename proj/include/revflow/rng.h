#pragma once

#include <cstdint>
#include <limits>

namespace revflow {

/// PCG64 (128-bit LCG state, XSL-RR output) with Box-Muller normals.
///
/// The output stream depends only on the seed, so runs reproduce across
/// platforms. Satisfies UniformRandomBitGenerator.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t seed = 0);

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
  result_type operator()() { return next_u64(); }

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, bound). Rejection-sampled, no modulo bias.
  std::uint64_t below(std::uint64_t bound);
  /// Standard normal. Box-Muller; the second variate of each pair is kept for the next call.
  double normal();

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  __extension__ typedef unsigned __int128 u128;

  void step();

  u128 state_ = 0;
  u128 increment_ = 0;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace revflow
