#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dso {

// Bad arguments or violated operation preconditions.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Degenerate polygons, bounding boxes, hulls.
struct GeometryError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Unparseable or inconsistent configuration.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Persisted artifact failed its content-hash check.
struct CorruptionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Persisted artifact has an unsupported format version.
struct VersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Process-wide worker count for data-parallel loops. The partitioning is
// static and every loop writes disjoint output slots, so the value changes
// wall time only, never results.
inline int& worker_count() {
    static int workers = 1;
    return workers;
}

inline void set_workers(int n) { worker_count() = n < 1 ? 1 : n; }

template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
#ifdef _OPENMP
    const int workers = worker_count();
    if (workers > 1 && n > 1) {
#pragma omp parallel for num_threads(workers) schedule(static)
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
#endif
    for (std::int64_t i = 0; i < n; ++i) fn(i);
}

}  // namespace dso
