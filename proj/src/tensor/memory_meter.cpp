#include "revflow/memory_meter.h"

namespace revflow {

BudgetExceeded::BudgetExceeded(std::size_t requested, std::size_t live, std::size_t limit)
    : requested_(requested), limit_(limit) {
  message_ = "allocation of " + std::to_string(requested) + " bytes exceeds memory budget (" +
             std::to_string(live) + " live, limit " + std::to_string(limit) + ")";
}

MemoryMeter& MemoryMeter::global() {
  static MemoryMeter meter;
  return meter;
}

void MemoryMeter::on_allocate(std::size_t bytes) {
  const std::size_t before = live_.fetch_add(bytes, std::memory_order_relaxed);
  const std::size_t after = before + bytes;
  const std::size_t limit = limit_.load(std::memory_order_relaxed);
  if (after > limit) {
    live_.fetch_sub(bytes, std::memory_order_relaxed);
    throw BudgetExceeded(bytes, before, limit);
  }
  count_.fetch_add(1, std::memory_order_relaxed);
  std::size_t peak = peak_.load(std::memory_order_relaxed);
  while (after > peak && !peak_.compare_exchange_weak(peak, after, std::memory_order_relaxed)) {
  }
}

void MemoryMeter::on_release(std::size_t bytes) noexcept {
  live_.fetch_sub(bytes, std::memory_order_relaxed);
}

void MemoryMeter::reset_peak() noexcept {
  peak_.store(live_.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

std::optional<std::size_t> MemoryMeter::limit() const noexcept {
  const std::size_t l = limit_.load(std::memory_order_relaxed);
  if (l == kNoLimit) return std::nullopt;
  return l;
}

ScopedMemoryLimit::ScopedMemoryLimit(std::size_t bytes) : previous_(MemoryMeter::global().limit()) {
  MemoryMeter::global().set_limit(bytes);
}

ScopedMemoryLimit::~ScopedMemoryLimit() {
  if (previous_) {
    MemoryMeter::global().set_limit(*previous_);
  } else {
    MemoryMeter::global().clear_limit();
  }
}

}  // namespace revflow
