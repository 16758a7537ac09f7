#include "sdseg/parallel.hpp"

#include <algorithm>
#include <cstdlib>

namespace sdseg {
namespace {

thread_local bool t_inside_pool = false;

int& thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("SDSEG_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) return v;
        }
        const unsigned hc = std::thread::hardware_concurrency();
        return hc > 0 ? static_cast<int>(hc) : 1;
    }();
    return n;
}

}  // namespace

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

void ThreadPool::set_threads(int n) { thread_count() = std::max(1, n); }

int ThreadPool::threads() { return thread_count(); }

ThreadPool::ThreadPool() {
    const int extra = std::max(0, thread_count() - 1);
    ranges_.resize(static_cast<std::size_t>(extra));
    workers_.reserve(static_cast<std::size_t>(extra));
    for (int i = 0; i < extra; ++i) workers_.emplace_back([this, i] { worker_loop(i); });
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        stop_ = true;
        ++generation_;
    }
    cv_start_.notify_all();
    for (auto& w : workers_) w.join();
}

void ThreadPool::worker_loop(int slot) {
    t_inside_pool = true;
    std::uint64_t seen = 0;
    for (;;) {
        const std::function<void(std::int64_t, std::int64_t)>* job;
        std::pair<std::int64_t, std::int64_t> range;
        {
            std::unique_lock<std::mutex> lk(mu_);
            cv_start_.wait(lk, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            job = job_;
            range = ranges_[static_cast<std::size_t>(slot)];
        }
        if (job && range.first < range.second) (*job)(range.first, range.second);
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (--pending_ == 0) cv_done_.notify_all();
        }
    }
}

void ThreadPool::run(std::int64_t n,
                     const std::function<void(std::int64_t, std::int64_t)>& fn) {
    if (n <= 0) return;
    const int nt = thread_count();
    // nested or configured-serial loops run inline
    if (t_inside_pool || nt <= 1 || workers_.empty() || n == 1) {
        fn(0, n);
        return;
    }
    const int used = static_cast<int>(std::min<std::int64_t>(nt, n));
    const std::int64_t chunk = (n + used - 1) / used;
    // main thread takes the first chunk, workers the rest
    {
        std::lock_guard<std::mutex> lk(mu_);
        for (std::size_t i = 0; i < ranges_.size(); ++i) {
            const std::int64_t b = std::min<std::int64_t>(n, chunk * (static_cast<std::int64_t>(i) + 1));
            const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
            ranges_[i] = {b, e};
        }
        job_ = &fn;
        pending_ = static_cast<int>(workers_.size());
        ++generation_;
    }
    cv_start_.notify_all();
    fn(0, std::min<std::int64_t>(chunk, n));
    {
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [&] { return pending_ == 0; });
        job_ = nullptr;
    }
}

}  // namespace sdseg
