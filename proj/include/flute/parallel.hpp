#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace flute {

/// How many worker threads per-client work may use. Results never depend
/// on this value: workers write disjoint slots and reductions run afterwards
/// in ascending index order on the calling thread.
struct Execution {
    unsigned threads = 1;
};

/// Calls fn(i) for i in [0, n), splitting the range into contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, const Execution& exec, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(std::max(1u, exec.threads), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::exception_ptr failure;
    std::mutex failure_mutex;
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        const std::size_t chunk = (n + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            const std::size_t begin = w * chunk;
            const std::size_t end = std::min(n, begin + chunk);
            if (begin >= end) {
                break;
            }
            pool.emplace_back([&, begin, end] {
                try {
                    for (std::size_t i = begin; i < end; ++i) {
                        fn(i);
                    }
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) {
                        failure = std::current_exception();
                    }
                }
            });
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

}  // namespace flute
