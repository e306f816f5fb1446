#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace revflow {

/// Shape or argument contract violated by the caller.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A 1x1 mixing matrix became (numerically) singular.
class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Data that cannot drive a data-dependent initialization (e.g. a constant channel).
class DegenerateDataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parameters changed between a forward pass and the gradient call that consumes it.
class StaleBundleError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Loss or latent values went non-finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents. `offset` is the byte position where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace revflow
