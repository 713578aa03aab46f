#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "anatembed/common.hpp"

namespace anatembed::rng {

// Philox4x32-10 counter-based generator. Output is a pure function of
// (key, counter), so any draw can be reproduced from (seed, stream, counter)
// without replaying earlier draws. Constants follow the reference
// implementation of Salmon et al.'s Random123.
struct Philox {
  static std::array<uint32_t, 4> block(uint64_t key, uint64_t stream, uint64_t counter) {
    uint32_t k0 = (uint32_t)key, k1 = (uint32_t)(key >> 32);
    std::array<uint32_t, 4> c = {(uint32_t)counter, (uint32_t)(counter >> 32),
                                 (uint32_t)stream, (uint32_t)(stream >> 32)};
    for (int round = 0; round < 10; ++round) {
      uint64_t p0 = 0xD2511F53ull * c[0];
      uint64_t p1 = 0xCD9E8D57ull * c[2];
      std::array<uint32_t, 4> next = {
          (uint32_t)(p1 >> 32) ^ c[1] ^ k0, (uint32_t)p1,
          (uint32_t)(p0 >> 32) ^ c[3] ^ k1, (uint32_t)p0};
      c = next;
      k0 += 0x9E3779B9u;
      k1 += 0xBB67AE85u;
    }
    return c;
  }
};

// splitmix64 finalizer, used to fold tags into a stream id.
inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t stream_id(uint64_t t0, uint64_t t1 = 0, uint64_t t2 = 0, uint64_t t3 = 0) {
  uint64_t s = mix64(t0);
  s = mix64(s ^ t1);
  s = mix64(s ^ t2);
  s = mix64(s ^ t3);
  return s;
}

// Buffered view of one Philox stream. Cheap to construct; state is just the
// counter position, so streams can be derived ad hoc wherever needed.
class Stream {
 public:
  Stream(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

  uint32_t next_u32() {
    if (pos_ == 4) {
      buf_ = Philox::block(seed_, stream_, counter_++);
      pos_ = 0;
    }
    return buf_[pos_++];
  }

  uint64_t next_u64() {
    uint64_t lo = next_u32();
    return (uint64_t(next_u32()) << 32) | lo;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * uniform01(); }

  // Unbiased integer in [0, n) via rejection.
  int64_t below(int64_t n) {
    require(n > 0, "rng: below(n) needs n > 0, got ", n);
    uint64_t un = (uint64_t)n;
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    for (;;) {
      uint64_t v = next_u64();
      if (v < limit) return (int64_t)(v % un);
    }
  }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  template <class T>
  void shuffle(std::span<T> v) {
    for (int64_t i = (int64_t)v.size() - 1; i > 0; --i)
      std::swap(v[i], v[(size_t)below(i + 1)]);
  }

  // First k entries of a random permutation of v (partial Fisher-Yates).
  template <class T>
  std::vector<T> sample(std::span<const T> v, int64_t k) {
    require(k >= 0 && k <= (int64_t)v.size(), "rng: sample size ", k,
            " out of range for population ", v.size());
    std::vector<T> pool(v.begin(), v.end());
    for (int64_t i = 0; i < k; ++i) {
      int64_t j = i + below((int64_t)pool.size() - i);
      std::swap(pool[(size_t)i], pool[(size_t)j]);
    }
    pool.resize((size_t)k);
    return pool;
  }

 private:
  uint64_t seed_, stream_;
  uint64_t counter_ = 0;
  std::array<uint32_t, 4> buf_{};
  int pos_ = 4;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stateless per-element standard normal, for fields evaluated in parallel.
inline double normal_at(uint64_t seed, uint64_t stream, uint64_t index) {
  auto b = Philox::block(seed, stream, index);
  uint64_t w1 = ((uint64_t)b[1] << 32) | b[0];
  uint64_t w2 = ((uint64_t)b[3] << 32) | b[2];
  double u1 = (double)((w1 >> 11) | 1) * 0x1.0p-53;
  double u2 = (double)(w2 >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace anatembed::rng
