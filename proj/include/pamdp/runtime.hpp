#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace pamdp {

/// Keeps large tensor buffers on the heap instead of fresh mmap pages. glibc
/// otherwise maps and unmaps multi-megabyte tape buffers on every update,
/// and the page faults cost about as much as the arithmetic.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace pamdp
