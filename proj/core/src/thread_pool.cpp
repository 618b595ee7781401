#include "rds/thread_pool.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace rds {

namespace {

class Pool {
 public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  void resize(int n) {
    std::lock_guard<std::mutex> guard(api_mutex_);
    stop_workers();
    if (n < 1) n = 1;
    threads_ = n;
    start_workers(n - 1);  // caller participates as one worker
  }

  int size() const { return threads_; }

  void run(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    std::lock_guard<std::mutex> guard(api_mutex_);
    {
      std::lock_guard<std::mutex> lk(mutex_);
      job_.store(&fn, std::memory_order_release);
      total_ = n;
      next_.store(0, std::memory_order_relaxed);
      pending_ = n;
      ++generation_;
    }
    cv_.notify_all();
    work();  // caller thread joins in
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
  }

 private:
  Pool() : threads_(static_cast<int>(std::thread::hardware_concurrency())) {
    if (threads_ < 1) threads_ = 1;
    start_workers(threads_ - 1);
  }

  ~Pool() { stop_workers(); }

  void start_workers(int n) {
    quit_ = false;
    for (int i = 0; i < n; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      quit_ = true;
      ++generation_;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
    workers_.clear();
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    while (true) {
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return quit_ || generation_ != seen; });
        seen = generation_;
        if (quit_) return;
      }
      work();
    }
  }

  void work() {
    const auto* job = job_.load(std::memory_order_acquire);
    if (!job) return;
    while (true) {
      const std::size_t i = next_.fetch_add(1, std::memory_order_relaxed);
      if (i >= total_) break;
      (*job)(i);
      std::size_t left;
      {
        std::lock_guard<std::mutex> lk(mutex_);
        left = --pending_;
      }
      if (left == 0) done_cv_.notify_all();
    }
  }

  std::mutex api_mutex_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> workers_;
  std::atomic<const std::function<void(std::size_t)>*> job_{nullptr};
  std::atomic<std::size_t> next_{0};
  std::size_t total_ = 0;
  std::size_t pending_ = 0;
  std::uint64_t generation_ = 0;
  bool quit_ = false;
  int threads_ = 1;
};

thread_local bool inside_pool = false;

}  // namespace

void set_worker_count(int n) { Pool::instance().resize(n); }

int worker_count() { return Pool::instance().size(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (inside_pool || worker_count() <= 1 || n == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  inside_pool = true;
  std::function<void(std::size_t)> wrapped = [&fn](std::size_t i) {
    inside_pool = true;
    fn(i);
  };
  Pool::instance().run(n, wrapped);
  inside_pool = false;
}

}  // namespace rds
