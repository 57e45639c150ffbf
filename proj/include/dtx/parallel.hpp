#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace dtx {

inline int default_threads() {
    unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

// Runs fn(chunk_index, begin, end) over [0, n) split into fixed-size chunks.
// Chunk boundaries depend only on n, never on the thread count, so any
// per-chunk partial results can be merged in chunk order for bitwise
// reproducible reductions at every --threads value.
inline void parallel_chunks(size_t n, int threads, size_t chunk_size,
                            const std::function<void(size_t, size_t, size_t)>& fn) {
    if (n == 0) return;
    size_t n_chunks = (n + chunk_size - 1) / chunk_size;
    if (threads <= 1 || n_chunks == 1) {
        for (size_t c = 0; c < n_chunks; ++c)
            fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
        return;
    }
    std::vector<std::thread> pool;
    size_t t_count = std::min<size_t>(static_cast<size_t>(threads), n_chunks);
    std::atomic<size_t> next{0};
    for (size_t t = 0; t < t_count; ++t) {
        pool.emplace_back([&]() {
            for (;;) {
                size_t c = next.fetch_add(1);
                if (c >= n_chunks) break;
                fn(c, c * chunk_size, std::min(n, (c + 1) * chunk_size));
            }
        });
    }
    for (auto& th : pool) th.join();
}

// Convenience: parallel loop over items where each item writes its own slot.
inline void parallel_for(size_t n, int threads,
                         const std::function<void(size_t)>& fn) {
    size_t chunk = std::max<size_t>(1, n / std::max(1, threads * 8));
    parallel_chunks(n, threads, chunk, [&](size_t, size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) fn(i);
    });
}

}  // namespace dtx
