#include "revflow/fault.h"

#include <atomic>
#include <cstring>

namespace revflow::fault {
namespace {
std::atomic<Site> g_site{Site::None};
}

void inject(Site site) noexcept { g_site.store(site, std::memory_order_relaxed); }
void clear() noexcept { g_site.store(Site::None, std::memory_order_relaxed); }
bool active(Site site) noexcept {
  return site != Site::None && g_site.load(std::memory_order_relaxed) == site;
}

Site parse(const char* name) noexcept {
  if (std::strcmp(name, "actnorm-bias") == 0) return Site::ActNormBiasGradSign;
  if (std::strcmp(name, "coupling-shift") == 0) return Site::CouplingShiftGradSign;
  if (std::strcmp(name, "inv1x1-weight") == 0) return Site::Inv1x1WeightGradSign;
  return Site::None;
}

}  // namespace revflow::fault
