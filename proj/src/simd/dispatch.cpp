#include "jrs/simd/kernels.hpp"

#include <atomic>

namespace jrs::simd {

#if defined(JRS_HAVE_AVX2)
const KernelTable& avx2_kernel_table();
#endif

const KernelTable* avx2_kernels() {
#if defined(JRS_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  static const bool ok =
      __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  return ok ? &avx2_kernel_table() : nullptr;
#else
  return nullptr;
#endif
}

namespace {
std::atomic<const KernelTable*>& active() {
  static std::atomic<const KernelTable*> table{
      avx2_kernels() ? avx2_kernels() : &scalar_kernels()};
  return table;
}
}  // namespace

const KernelTable& kernels() { return *active().load(std::memory_order_relaxed); }

bool set_backend(std::string_view name) {
  if (name == "scalar") {
    active().store(&scalar_kernels());
    return true;
  }
  if (name == "avx2" && avx2_kernels()) {
    active().store(avx2_kernels());
    return true;
  }
  return false;
}

}  // namespace jrs::simd
