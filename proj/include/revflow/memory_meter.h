#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <new>
#include <optional>
#include <string>

namespace revflow {

/// Thrown when an allocation would push live bytes over the meter's limit.
/// Derives from std::bad_alloc so it unwinds like a genuine out-of-memory.
class BudgetExceeded : public std::bad_alloc {
 public:
  BudgetExceeded(std::size_t requested, std::size_t live, std::size_t limit);
  const char* what() const noexcept override { return message_.c_str(); }

  std::size_t requested() const noexcept { return requested_; }
  std::size_t limit() const noexcept { return limit_; }

 private:
  std::size_t requested_;
  std::size_t limit_;
  std::string message_;
};

/// Process-wide payload byte counter. Every tensor allocation reports here.
///
/// Counters are atomics, so reports from several threads behave as if
/// serialized. `peak` is the running maximum of `live` since the last reset.
class MemoryMeter {
 public:
  static MemoryMeter& global();

  /// Records an allocation. Throws BudgetExceeded, leaving the counters
  /// untouched, if a limit is set and would be crossed.
  void on_allocate(std::size_t bytes);
  void on_release(std::size_t bytes) noexcept;

  std::size_t live() const noexcept { return live_.load(std::memory_order_relaxed); }
  std::size_t peak() const noexcept { return peak_.load(std::memory_order_relaxed); }
  std::uint64_t allocation_count() const noexcept {
    return count_.load(std::memory_order_relaxed);
  }

  /// peak <- live
  void reset_peak() noexcept;

  void set_limit(std::size_t bytes) noexcept { limit_.store(bytes, std::memory_order_relaxed); }
  void clear_limit() noexcept { limit_.store(kNoLimit, std::memory_order_relaxed); }
  std::optional<std::size_t> limit() const noexcept;

 private:
  static constexpr std::size_t kNoLimit = static_cast<std::size_t>(-1);

  std::atomic<std::size_t> live_{0};
  std::atomic<std::size_t> peak_{0};
  std::atomic<std::uint64_t> count_{0};
  std::atomic<std::size_t> limit_{kNoLimit};
};

/// Installs a live-byte limit on the global meter for the lifetime of the scope.
class ScopedMemoryLimit {
 public:
  explicit ScopedMemoryLimit(std::size_t bytes);
  ~ScopedMemoryLimit();
  ScopedMemoryLimit(const ScopedMemoryLimit&) = delete;
  ScopedMemoryLimit& operator=(const ScopedMemoryLimit&) = delete;

 private:
  std::optional<std::size_t> previous_;
};

}  // namespace revflow
