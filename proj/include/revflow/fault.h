#pragma once

namespace revflow::fault {

// Deliberate gradient corruptions used to check that the verification suite
// notices a wrong backward pass. Nothing enables them outside tests and the
// `verify --inject-fault` flag.
enum class Site {
  None,
  ActNormBiasGradSign,
  CouplingShiftGradSign,
  Inv1x1WeightGradSign,
};

void inject(Site site) noexcept;
void clear() noexcept;
bool active(Site site) noexcept;

/// Parses "actnorm-bias", "coupling-shift", "inv1x1-weight". Returns None otherwise.
Site parse(const char* name) noexcept;

class ScopedFault {
 public:
  explicit ScopedFault(Site site) noexcept { inject(site); }
  ~ScopedFault() { clear(); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;
};

}  // namespace revflow::fault
