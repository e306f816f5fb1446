#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace revflow {

struct CheckResult {
  std::string group;
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct VerifyOptions {
  /// Run only this group; empty runs everything.
  std::string only;
  std::uint64_t seed = 0;
};

/// conv, conditioner, actnorm, inv1x1, affine, additive, haar, model, engines.
std::span<const std::string_view> verify_groups();

/// 64-bit oracle suite: round trips, finite-difference gradients, dense
/// Jacobian log-determinants and engine agreement. Throws
/// std::invalid_argument for an unknown group.
std::vector<CheckResult> run_verify(const VerifyOptions& options,
                                    const std::function<void(const CheckResult&)>& on_result = {});

bool all_passed(const std::vector<CheckResult>& results);

void print_verify_table(std::ostream& os, const std::vector<CheckResult>& results);

}  // namespace revflow
