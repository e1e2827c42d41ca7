// Copyright Contributors to the rayvis project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace rayvis {

/// Worker cap shared by every parallel loop; 0 means hardware concurrency.
inline std::atomic<int> &thread_limit() {
    static std::atomic<int> limit{0};
    return limit;
}

inline int worker_count() {
    const int limit = thread_limit().load();
    if (limit > 0)
        return limit;
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for every i in [begin, end). Work is handed out in index
/// order; callers write results to disjoint slots so output does not depend
/// on scheduling. The first exception thrown by any worker is rethrown.
template <class Fn> void parallel_for(int begin, int end, Fn &&fn) {
    const int n = end - begin;
    if (n <= 0)
        return;
    const int workers = std::min(worker_count(), n);
    if (workers == 1) {
        for (int i = begin; i < end; ++i)
            fn(i);
        return;
    }
    std::atomic<int> next{begin};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto run = [&] {
        try {
            for (int i = next.fetch_add(1); i < end; i = next.fetch_add(1))
                fn(i);
        } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error)
                error = std::current_exception();
            next.store(end);
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(std::size_t(workers - 1));
    for (int w = 1; w < workers; ++w)
        pool.emplace_back(run);
    run();
    pool.clear();
    if (error)
        std::rethrow_exception(error);
}

} // namespace rayvis
