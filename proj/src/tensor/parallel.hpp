#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace npm::detail {

/// Worker count for kernels: NPM_THREADS when set, else hardware concurrency.
inline std::size_t kernel_threads() {
    static const std::size_t count = [] {
        if (const char* env = std::getenv("NPM_THREADS")) {
            try {
                long v = std::stol(env);
                if (v >= 1) return static_cast<std::size_t>(v);
            } catch (...) {
            }
        }
        return std::max<std::size_t>(1, std::thread::hardware_concurrency());
    }();
    return count;
}

/// Runs fn(i) for i in [0, count). Each index is handled by exactly one
/// worker, so results do not depend on the thread count as long as fn(i)
/// only writes state owned by index i.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn, std::size_t min_per_thread = 1) {
    std::size_t workers = std::min(kernel_threads(), count / std::max<std::size_t>(1, min_per_thread));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    auto run = [&](std::size_t w) {
        std::size_t lo = count * w / workers;
        std::size_t hi = count * (w + 1) / workers;
        for (std::size_t i = lo; i < hi; ++i) fn(i);
    };
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
    run(0);
    for (auto& t : pool) t.join();
}

}  // namespace npm::detail
