#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace terra {

// Fixed-size worker pool. parallel_for partitions [0, n) by index so results
// can be written to pre-sized slots and reduced in a fixed order afterwards;
// parallel and serial execution then produce identical outputs.
class ThreadPool {
 public:
  explicit ThreadPool(unsigned threads) {
    if (threads < 1) threads = 1;
    for (unsigned i = 0; i + 1 < threads; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  unsigned size() const { return static_cast<unsigned>(workers_.size()) + 1; }

  // Runs fn(i) for i in [0, n). The caller participates; exceptions from
  // tasks are rethrown (first one observed).
  void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    if (workers_.empty() || n == 1) {
      for (size_t i = 0; i < n; ++i) fn(i);
      return;
    }

    struct Ctx {
      std::atomic<size_t> next{0};
      std::atomic<size_t> done{0};
      size_t total = 0;
      const std::function<void(size_t)>* fn = nullptr;
      std::exception_ptr error;
      std::mutex err_mu;
      std::mutex done_mu;
      std::condition_variable done_cv;
    };
    auto ctx = std::make_shared<Ctx>();
    ctx->total = n;
    ctx->fn = &fn;

    // Workers keep ctx alive via the shared_ptr copy in their task; fn is
    // only invoked for indices that complete before this function returns.
    auto task = [ctx] {
      for (;;) {
        size_t i = ctx->next.fetch_add(1);
        if (i >= ctx->total) break;
        try {
          (*ctx->fn)(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(ctx->err_mu);
          if (!ctx->error) ctx->error = std::current_exception();
        }
        if (ctx->done.fetch_add(1) + 1 == ctx->total) {
          std::lock_guard<std::mutex> lock(ctx->done_mu);
          ctx->done_cv.notify_all();
        }
      }
    };

    {
      std::unique_lock<std::mutex> lock(mu_);
      for (size_t i = 0; i < workers_.size() && i + 1 < n; ++i) queue_.push(task);
    }
    cv_.notify_all();
    task();
    {
      std::unique_lock<std::mutex> lock(ctx->done_mu);
      ctx->done_cv.wait(lock, [&] { return ctx->done.load() >= ctx->total; });
    }
    if (ctx->error) std::rethrow_exception(ctx->error);
  }

  // Default worker count: TERRA_THREADS env var, else hardware concurrency.
  static unsigned default_threads() {
    if (const char* env = std::getenv("TERRA_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return static_cast<unsigned>(v);
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc ? hc : 1;
  }

 private:
  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
        if (stop_ && queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop();
      }
      task();
    }
  }

  std::vector<std::thread> workers_;
  std::queue<std::function<void()>> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
};

}  // namespace terra
