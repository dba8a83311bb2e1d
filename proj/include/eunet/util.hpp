#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace eunet {

// Parallelism cap from EUNET_THREADS; defaults to 1 so that every run is
// single-threaded unless the caller opts in.
inline int thread_cap() {
    const char* env = std::getenv("EUNET_THREADS");
    if (!env) return 1;
    const int v = std::atoi(env);
    return v > 0 ? v : 1;
}

// Static partition of [0, n) over at most thread_cap() threads. Work items
// must be independent; each writes to disjoint state, so results do not
// depend on the thread count.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    const int threads = static_cast<int>(std::min<int64_t>(thread_cap(), n));
    if (threads <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (int64_t i = t; i < n; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace eunet
