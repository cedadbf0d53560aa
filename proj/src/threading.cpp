#include "gradseg/threading.hpp"

#include <algorithm>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gradseg {

namespace {
int g_max_threads = 0;  // 0 = use hardware default
}

void set_max_threads(int n) {
    g_max_threads = std::max(0, n);
#ifdef _OPENMP
    if (g_max_threads > 0) omp_set_num_threads(g_max_threads);
#endif
}

int max_threads() {
    if (g_max_threads > 0) return g_max_threads;
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
#endif
}

}  // namespace gradseg
