/*
   Copyright 2026 the sonoseg authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <thread>
#include <vector>

namespace sonoseg {

inline std::atomic<int>& thread_count_ref() {
    static std::atomic<int> count{1};
    return count;
}

/// Worker threads used by parallel_for. Values < 1 mean "one".
inline void set_thread_count(int n) { thread_count_ref().store(std::max(1, n)); }

inline int thread_count() { return thread_count_ref().load(); }

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs;
/// under that contract the result is identical for every thread count.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
    const int threads = std::min<std::int64_t>(thread_count(), n);
    if (threads <= 1) {
        for (std::int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    const std::int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace sonoseg
