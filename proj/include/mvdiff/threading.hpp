#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "mvdiff/common.hpp"

namespace mvdiff {

namespace detail {
inline bool& in_parallel_region() {
    thread_local bool flag = false;
    return flag;
}
}  // namespace detail

// Persistent worker pool for data-parallel loops. Work items write disjoint
// outputs and keep each output element's accumulation order fixed, so results
// are bitwise identical for any thread count.
//
// Scheduling is pull-based with generation-tagged chunk claims: the caller
// claims chunks alongside the workers and then waits for the completed-chunk
// count, so a worker that oversleeps costs parallelism but can never stall a
// job. A stale worker's claims fail the generation check, so it can never run
// an old function on a new job's chunks. Workers spin briefly before sleeping
// to keep dispatch latency low during bursts of small loops. Nested calls
// degrade to serial.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void set_threads(int n) {
        if (n < 1) throw InvalidArgument("thread count must be >= 1");
        std::lock_guard<std::mutex> outer(api_mutex_);
        stop_workers();
        threads_ = n;
        start_workers();
    }

    int threads() const { return threads_; }

    // Runs fn(begin, end) over contiguous chunks of [0, n).
    void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
        if (n <= 0) return;
        if (detail::in_parallel_region() || threads_ <= 1 || n == 1) {
            fn(0, n);
            return;
        }
        std::lock_guard<std::mutex> outer(api_mutex_);
        detail::in_parallel_region() = true;
        const std::int64_t chunks = std::min<std::int64_t>(threads_ * 4, n);
        const std::int64_t chunk_len = (n + chunks - 1) / chunks;
        const std::uint64_t gen = generation_.load(std::memory_order_relaxed) + 1;

        job_.store(&fn, std::memory_order_relaxed);
        job_n_.store(n, std::memory_order_relaxed);
        job_chunk_.store(chunk_len, std::memory_order_relaxed);
        claim_.store(tag(gen, 0), std::memory_order_relaxed);
        completed_.store(tag(gen, 0), std::memory_order_relaxed);
        {
            std::lock_guard<std::mutex> lk(mutex_);  // publish to sleeping workers
            generation_.store(gen, std::memory_order_release);
        }
        cv_.notify_all();

        run_chunks(gen, fn, n, chunk_len);  // caller participates and drains
        const std::uint64_t want = tag(gen, (n + chunk_len - 1) / chunk_len);
        for (int spin = 0; completed_.load(std::memory_order_acquire) != want; ++spin) {
            if (spin > 4096) std::this_thread::yield();
        }
        job_.store(nullptr, std::memory_order_relaxed);
        detail::in_parallel_region() = false;
        std::exception_ptr err;
        {
            std::lock_guard<std::mutex> lk(mutex_);
            err = error_;
            error_ = nullptr;
        }
        if (err) std::rethrow_exception(err);
    }

    ~ThreadPool() { stop_workers(); }

private:
    static constexpr int kChunkBits = 20;  // chunk counts stay far below 2^20
    static std::uint64_t tag(std::uint64_t gen, std::int64_t idx) {
        return (gen << kChunkBits) | static_cast<std::uint64_t>(idx);
    }

    ThreadPool() : threads_(static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))) {
        start_workers();
    }

    // Claims chunks of generation `gen` until none remain; each completed
    // chunk bumps the tagged completion counter.
    void run_chunks(std::uint64_t gen, const std::function<void(std::int64_t, std::int64_t)>& fn,
                    std::int64_t n, std::int64_t chunk_len) {
        const std::int64_t nchunks = (n + chunk_len - 1) / chunk_len;
        for (;;) {
            std::uint64_t cur = claim_.load(std::memory_order_acquire);
            std::int64_t idx;
            for (;;) {
                if ((cur >> kChunkBits) != gen) return;  // stale or finished claim space
                idx = static_cast<std::int64_t>(cur & ((1u << kChunkBits) - 1));
                if (idx >= nchunks) return;
                if (claim_.compare_exchange_weak(cur, cur + 1, std::memory_order_acq_rel))
                    break;
            }
            const std::int64_t begin = idx * chunk_len;
            try {
                fn(begin, std::min(n, begin + chunk_len));
            } catch (...) {
                std::lock_guard<std::mutex> lk(mutex_);
                if (!error_) error_ = std::current_exception();
            }
            completed_.fetch_add(1, std::memory_order_acq_rel);
        }
    }

    void start_workers() {
        stop_.store(false, std::memory_order_relaxed);
        for (int i = 1; i < threads_; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void stop_workers() {
        {
            std::lock_guard<std::mutex> lk(mutex_);
            stop_.store(true, std::memory_order_release);
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
        workers_.clear();
    }

    void worker_loop() {
        detail::in_parallel_region() = true;  // workers never spawn sub-jobs
        std::uint64_t seen = 0;
        for (;;) {
            bool woke = false;
            for (int spin = 0; spin < (1 << 14); ++spin) {
                if (stop_.load(std::memory_order_acquire)) return;
                if (generation_.load(std::memory_order_acquire) != seen) {
                    woke = true;
                    break;
                }
#if defined(__x86_64__) || defined(__i386__)
                __builtin_ia32_pause();
#endif
            }
            if (!woke) {
                std::unique_lock<std::mutex> lk(mutex_);
                cv_.wait(lk, [&] {
                    return stop_.load(std::memory_order_relaxed) ||
                           generation_.load(std::memory_order_relaxed) != seen;
                });
                if (stop_.load(std::memory_order_relaxed)) return;
            }
            seen = generation_.load(std::memory_order_acquire);
            const auto* job = job_.load(std::memory_order_relaxed);
            if (job)
                run_chunks(seen, *job, job_n_.load(std::memory_order_relaxed),
                           job_chunk_.load(std::memory_order_relaxed));
        }
    }

    int threads_;
    std::vector<std::thread> workers_;
    std::mutex api_mutex_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::atomic<const std::function<void(std::int64_t, std::int64_t)>*> job_{nullptr};
    std::atomic<std::int64_t> job_n_{0}, job_chunk_{0};
    std::atomic<std::uint64_t> claim_{0};
    std::atomic<std::uint64_t> completed_{0};
    std::atomic<std::uint64_t> generation_{0};
    std::atomic<bool> stop_{false};
    std::exception_ptr error_ = nullptr;
};

inline void set_num_threads(int n) { ThreadPool::instance().set_threads(n); }
inline int num_threads() { return ThreadPool::instance().threads(); }

inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace mvdiff
