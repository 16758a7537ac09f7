#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace sdseg {

/// Persistent worker pool for data-parallel loops.
///
/// Determinism contract: parallel_for only ever changes WHICH thread computes
/// an index range, never any arithmetic order. Callers must write to disjoint
/// memory per index and perform reductions serially afterwards (or per-slot),
/// so results are bit-identical for any thread count, including 1.
class ThreadPool {
public:
    static ThreadPool& instance();

    /// Global worker count (defaults to hardware concurrency, overridable via
    /// SDSEG_THREADS). Setting it to 1 makes every loop run inline.
    static void set_threads(int n);
    static int threads();

    /// Runs fn(begin, end) over a static partition of [0, n).
    /// Nested calls from inside a worker run inline on the calling thread.
    void run(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

    ~ThreadPool();

private:
    ThreadPool();
    void worker_loop(int slot);

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_start_, cv_done_;
    const std::function<void(std::int64_t, std::int64_t)>* job_ = nullptr;
    std::vector<std::pair<std::int64_t, std::int64_t>> ranges_;
    std::uint64_t generation_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

/// fn(begin, end) over a static partition of [0, n).
inline void parallel_for(std::int64_t n,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
    ThreadPool::instance().run(n, fn);
}

}  // namespace sdseg
