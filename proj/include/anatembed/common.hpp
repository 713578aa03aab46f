#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace anatembed {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... R>
void format_into(std::ostringstream& os, const T& v, const R&... rest) {
  os << v;
  format_into(os, rest...);
}
}  // namespace detail

template <class... A>
std::string strcat(const A&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

template <class... A>
[[noreturn]] void fail(const A&... args) {
  throw Error(strcat(args...));
}

template <class... A>
void require(bool cond, const A&... args) {
  if (!cond) fail(args...);
}

// Shapes, pixel indices and per-axis strides. Axis order is (y,x) in 2D and
// (z,y,x) in 3D; memory is row major with the last axis fastest.
using Shape = std::vector<int64_t>;
using VecD = std::vector<double>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline Shape row_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = (int)s.size() - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

inline int64_t flat_index(const Shape& idx, const Shape& strides) {
  int64_t f = 0;
  for (size_t i = 0; i < idx.size(); ++i) f += idx[i] * strides[i];
  return f;
}

// Odometer increment over a box [0, extents); returns false after the last
// index wraps around.
inline bool next_index(Shape& idx, const Shape& extents) {
  for (int i = (int)extents.size() - 1; i >= 0; --i) {
    if (++idx[i] < extents[i]) return true;
    idx[i] = 0;
  }
  return false;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline int thread_budget() {
  static int budget = [] {
    if (const char* env = std::getenv("ANATEMBED_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? (int)hw : 1;
  }();
  return budget;
}

namespace detail {

// Minimal pool: worker threads pick fixed-size chunks off a shared counter.
// Every chunk is computed independently, so results do not depend on the
// number of workers.
class Pool {
 public:
  static Pool& instance() {
    static Pool p;
    return p;
  }

  void run(int64_t n_chunks, const std::function<void(int64_t)>& chunk_fn) {
    std::unique_lock<std::mutex> guard(run_mutex_);
    ensure_workers();
    {
      std::lock_guard<std::mutex> lk(m_);
      fn_ = &chunk_fn;
      next_ = 0;
      total_ = n_chunks;
      pending_ = n_chunks;
    }
    cv_.notify_all();
    work();
    std::unique_lock<std::mutex> lk(m_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  void ensure_workers() {
    int want = thread_budget() - 1;
    while ((int)threads_.size() < want)
      threads_.emplace_back([this] { worker_loop(); });
  }

  void worker_loop() {
    for (;;) {
      {
        std::unique_lock<std::mutex> lk(m_);
        cv_.wait(lk, [&] { return stop_ || (fn_ && next_ < total_); });
        if (stop_) return;
      }
      work();
    }
  }

  void work() {
    for (;;) {
      int64_t c = next_.fetch_add(1);
      if (c >= total_) return;
      (*fn_)(c);
      std::lock_guard<std::mutex> lk(m_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(m_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::mutex run_mutex_;
  std::mutex m_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(int64_t)>* fn_ = nullptr;
  std::atomic<int64_t> next_{0};
  int64_t total_ = 0;
  int64_t pending_ = 0;
  bool stop_ = false;
};

}  // namespace detail

// Runs fn(begin, end) over a static partition of [0, n). The partition only
// depends on n and grain, never on the thread count, and chunks write
// disjoint outputs, so results are identical for any ANATEMBED_THREADS.
template <class Fn>
void parallel_for(int64_t n, int64_t grain, Fn&& fn) {
  if (n <= 0) return;
  int64_t chunks = (n + grain - 1) / grain;
  if (thread_budget() == 1 || chunks == 1) {
    for (int64_t c = 0; c < chunks; ++c)
      fn(c * grain, std::min(n, (c + 1) * grain));
    return;
  }
  std::function<void(int64_t)> chunk_fn = [&](int64_t c) {
    fn(c * grain, std::min(n, (c + 1) * grain));
  };
  detail::Pool::instance().run(chunks, chunk_fn);
}

}  // namespace anatembed
