#pragma once

#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace card {

inline int default_threads() {
    unsigned n = std::thread::hardware_concurrency();
    return n ? int(n) : 1;
}

// Runs fn(i, worker) for i in [0, n); worker identifies the executing lane so
// callers can hand out per-worker scratch buffers. Each index must write only
// to its own slot; with that discipline the result is independent of the
// thread count and of scheduling, so determinism is preserved.
inline void parallel_for_workers(int64_t n, int threads, const std::function<void(int64_t, int)> & fn) {
    if (threads <= 0) threads = default_threads();
    if (threads == 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i, 0);
        return;
    }
    int64_t nt = std::min<int64_t>(threads, n);
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex err_mu;
    pool.reserve(size_t(nt));
    for (int64_t w = 0; w < nt; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (int64_t i = w; i < n; i += nt) fn(i, int(w));
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
            }
        });
    }
    for (auto & t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

inline void parallel_for(int64_t n, int threads, const std::function<void(int64_t)> & fn) {
    parallel_for_workers(n, threads, [&](int64_t i, int) { fn(i); });
}

}  // namespace card
