#include "vqreg/common.hpp"

#include <cstdlib>
#include <optional>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vqreg {

namespace {
std::optional<bool> g_deterministic_override;
}

std::string to_string(const Dims& d)
{
    return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

bool deterministic_mode()
{
    if (g_deterministic_override) return *g_deterministic_override;
    const char* env = std::getenv("VQREG_DETERMINISTIC");
    return env != nullptr && std::string(env) == "1";
}

void set_deterministic_mode(bool on) { g_deterministic_override = on; }

void configure_threads()
{
#ifdef _OPENMP
    // Kernels only parallelize over independent outputs, so results do not depend on the
    // thread count; pinning to one thread additionally fixes library-internal scheduling.
    if (deterministic_mode()) omp_set_num_threads(1);
#endif
}

}  // namespace vqreg
