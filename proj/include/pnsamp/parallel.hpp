#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace pnsamp {

// Static-partition worker pool for data-parallel loops over tensor elements,
// channels or batch samples. Each index of [0, n) is processed by exactly one
// worker with a fixed contiguous range, so results are bit-identical for a
// given build no matter how the OS schedules the threads.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    std::size_t thread_count() const { return workers_.size() + 1; }

    // body(begin, end) is invoked on disjoint contiguous slices covering [0, n).
    void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
        if (n == 0) return;
        const std::size_t threads = thread_count();
        if (threads == 1 || n == 1 || in_worker_) {
            body(0, n);
            return;
        }
        {
            std::unique_lock<std::mutex> lock(mutex_);
            job_body_ = &body;
            job_n_ = n;
            pending_ = workers_.size();
            ++generation_;
        }
        cv_start_.notify_all();
        // The calling thread takes the first slice.
        body(slice_begin(0, n, threads), slice_begin(1, n, threads));
        std::unique_lock<std::mutex> lock(mutex_);
        cv_done_.wait(lock, [this] { return pending_ == 0; });
        job_body_ = nullptr;
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

private:
    ThreadPool() {
        std::size_t threads = std::thread::hardware_concurrency();
        if (const char* env = std::getenv("PNSAMP_THREADS")) {
            const long v = std::atol(env);
            if (v > 0) threads = static_cast<std::size_t>(v);
        }
        if (threads == 0) threads = 1;
        for (std::size_t rank = 1; rank < threads; ++rank) {
            workers_.emplace_back([this, rank] { worker_loop(rank); });
        }
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lock(mutex_);
            stop_ = true;
            ++generation_;
        }
        cv_start_.notify_all();
        for (auto& w : workers_) w.join();
    }

    static std::size_t slice_begin(std::size_t rank, std::size_t n, std::size_t threads) {
        return n * rank / threads;
    }

    void worker_loop(std::size_t rank) {
        in_worker_ = true;
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::size_t, std::size_t)>* body = nullptr;
            std::size_t n = 0;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                cv_start_.wait(lock, [&] { return generation_ != seen; });
                seen = generation_;
                if (stop_) return;
                body = job_body_;
                n = job_n_;
            }
            const std::size_t threads = thread_count();
            (*body)(slice_begin(rank, n, threads), slice_begin(rank + 1, n, threads));
            {
                std::unique_lock<std::mutex> lock(mutex_);
                if (--pending_ == 0) cv_done_.notify_one();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable cv_start_;
    std::condition_variable cv_done_;
    const std::function<void(std::size_t, std::size_t)>* job_body_ = nullptr;
    std::size_t job_n_ = 0;
    std::size_t pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
    static thread_local bool in_worker_;
};

inline thread_local bool ThreadPool::in_worker_ = false;

// Runs fn(i) for i in [0, n). Falls back to a plain loop for tiny n.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n < 4) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    ThreadPool::instance().run(n, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) fn(i);
    });
}

}  // namespace pnsamp
