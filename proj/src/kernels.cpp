#include "dime/kernels.hpp"

#include <atomic>

namespace dime::kernels {

namespace {
std::atomic<int> g_max_threads{0};
}

void set_max_threads(int n) { g_max_threads.store(n < 0 ? 0 : n); }

int max_threads() {
  int cap = g_max_threads.load();
#ifdef _OPENMP
  int hw = omp_get_max_threads();
#else
  int hw = 1;
#endif
  if (cap == 0) return hw;
  return cap < hw ? cap : hw;
}

int threads_for(std::int64_t flops) {
  int nt = max_threads();
  if (nt <= 1) return 1;
  if (flops < kParallelGrainFlops) return 1;
  std::int64_t chunks = flops / kParallelGrainFlops;
  if (chunks < nt) nt = static_cast<int>(chunks);
  return nt < 1 ? 1 : nt;
}

}  // namespace dime::kernels
