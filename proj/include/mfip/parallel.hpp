#pragma once

#include <cstddef>
#include <functional>

namespace mfip {

// Worker count: MEANFIELD_IP_THREADS when set to a positive integer, otherwise
// hardware parallelism (at least 1).
std::size_t worker_count();

// Splits [0, count) into chunks of exactly `chunk` items (the last may be
// shorter) and runs body(begin, end) for each. Chunk boundaries do not depend
// on the worker count, so any per-chunk computation is reproducible.
void parallel_chunks(std::size_t count, std::size_t chunk,
                     const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace mfip
