#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace localrd {

// Runs body(i) for every i in [0, n) across at most `workers` threads. Work
// items are claimed through a shared counter, so each index runs exactly
// once; callers that need deterministic output write into slot i of a
// pre-sized buffer and read it only after this returns. The first exception
// thrown by any body is rethrown here once every worker has stopped.
template <typename Body>
void parallel_for(std::size_t n, int workers, Body&& body) {
    if (n == 0) return;
    const std::size_t requested = workers < 1 ? 1 : static_cast<std::size_t>(workers);
    const std::size_t n_threads = requested < n ? requested : n;
    if (n_threads == 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mutex;

    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) {
        pool.emplace_back([&] {
            while (!failed.load(std::memory_order_relaxed)) {
                const std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
                if (i >= n) break;
                try {
                    body(i);
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    failed.store(true, std::memory_order_relaxed);
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

} // namespace localrd
