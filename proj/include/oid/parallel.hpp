#pragma once

#include <cstddef>
#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace oid::par {

enum class Mode { Serial, OpenMP };

inline bool openmp_compiled() noexcept {
#ifdef _OPENMP
  return true;
#else
  return false;
#endif
}

// Process-wide execution policy for the data-parallel loops: per-house
// customer updates, per-cluster solves, slot and lambda sweeps. Both modes
// must produce identical results; every loop body writes only slots owned by
// its index and reductions are done serially afterwards.
inline Mode& mode() noexcept {
  static Mode m = openmp_compiled() ? Mode::OpenMP : Mode::Serial;
  return m;
}

inline int worker_count() noexcept {
#ifdef _OPENMP
  if (mode() == Mode::OpenMP) return omp_get_max_threads();
#endif
  return 1;
}

// f(i) for i in [0, n). Static schedule so the index->thread map is fixed.
// The first exception thrown by any body is rethrown after the loop, so
// callers see the same behavior in both modes.
template <class F>
void for_each(std::size_t n, F&& f) {
#ifdef _OPENMP
  if (mode() == Mode::OpenMP) {
    std::exception_ptr err;
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
      try {
        f(static_cast<std::size_t>(i));
      } catch (...) {
#pragma omp critical(oid_par_for_each_err)
        if (!err) err = std::current_exception();
      }
    }
    if (err) std::rethrow_exception(err);
    return;
  }
#endif
  for (std::size_t i = 0; i < n; ++i) f(i);
}

}  // namespace oid::par
