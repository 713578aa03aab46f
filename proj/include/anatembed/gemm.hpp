#pragma once

#include <algorithm>
#include <cstring>
#include <vector>

#include "anatembed/common.hpp"

namespace anatembed::diffcore {

namespace detail {

// Register-tiled microkernel: C[MR x NR] (+)= A[MR x K] * B[K x NR].
// The k loop is serial and innermost state lives in a fixed-size accumulator
// array, so the floating point reduction order is identical for every build
// of the same shape. GCC vectorizes the n loop with FMA at -O3.
template <int MR, int NR>
inline void gemm_tile(const float* A, int64_t lda, const float* B, int64_t ldb,
                      float* C, int64_t ldc, int64_t K, bool accumulate) {
  float acc[MR][NR];
  for (int m = 0; m < MR; ++m)
    for (int n = 0; n < NR; ++n) acc[m][n] = accumulate ? C[m * ldc + n] : 0.0f;
  for (int64_t k = 0; k < K; ++k) {
    const float* brow = B + k * ldb;
    for (int m = 0; m < MR; ++m) {
      float a = A[m * lda + k];
      for (int n = 0; n < NR; ++n) acc[m][n] += a * brow[n];
    }
  }
  for (int m = 0; m < MR; ++m)
    for (int n = 0; n < NR; ++n) C[m * ldc + n] = acc[m][n];
}

template <int MR>
inline void gemm_rows(const float* A, int64_t lda, const float* B, int64_t ldb,
                      float* C, int64_t ldc, int64_t K, int64_t N,
                      const float* Bpad, bool accumulate) {
  int64_t n0 = 0;
  for (; n0 + 32 <= N; n0 += 32)
    gemm_tile<MR, 32>(A, lda, B + n0, ldb, C + n0, ldc, K, accumulate);
  if (n0 + 16 <= N) {
    gemm_tile<MR, 16>(A, lda, B + n0, ldb, C + n0, ldc, K, accumulate);
    n0 += 16;
  }
  int64_t rem = N - n0;
  if (rem > 0) {
    // Ragged tail: B columns were copied into a zero-padded 16-wide scratch
    // so the tail still runs through the vector kernel.
    float cpad[MR][16];
    for (int m = 0; m < MR; ++m)
      for (int n = 0; n < 16; ++n)
        cpad[m][n] = (accumulate && n < rem) ? C[m * ldc + n0 + n] : 0.0f;
    gemm_tile<MR, 16>(A, lda, Bpad, 16, &cpad[0][0], 16, K, true);
    for (int m = 0; m < MR; ++m)
      for (int64_t n = 0; n < rem; ++n) C[m * ldc + n0 + n] = cpad[m][n];
  }
}

}  // namespace detail

// C[M x N] (+)= A[M x K] * B[K x N], all row major and contiguous.
// Deterministic for any thread count: rows are partitioned statically and the
// k reduction order inside each tile is fixed.
inline void gemm(const float* A, const float* B, float* C, int64_t M,
                 int64_t K, int64_t N, bool accumulate = false) {
  if (M <= 0 || N <= 0) return;
  if (K <= 0) {
    if (!accumulate)
      for (int64_t i = 0; i < M * N; ++i) C[i] = 0.0f;
    return;
  }
  std::vector<float> bpad;
  int64_t tail_start = (N / 16) * 16;
  if (tail_start < N) {
    bpad.assign((size_t)(K * 16), 0.0f);
    for (int64_t k = 0; k < K; ++k)
      std::memcpy(bpad.data() + k * 16, B + k * N + tail_start,
                  (size_t)(N - tail_start) * sizeof(float));
  }
  const float* bp = bpad.empty() ? nullptr : bpad.data();
  int64_t m_tiles = M / 4;
  int64_t grain = std::max<int64_t>(1, 262144 / std::max<int64_t>(1, K * N));
  parallel_for(m_tiles, grain, [&](int64_t t0, int64_t t1) {
    for (int64_t t = t0; t < t1; ++t)
      detail::gemm_rows<4>(A + t * 4 * K, K, B, N, C + t * 4 * N, N, K, N, bp,
                           accumulate);
  });
  for (int64_t m = m_tiles * 4; m < M; ++m)
    detail::gemm_rows<1>(A + m * K, K, B, N, C + m * N, N, K, N, bp, accumulate);
}

// Blocked out-of-place transpose: dst[N x M] = src[M x N].
inline void transpose(const float* src, float* dst, int64_t M, int64_t N) {
  constexpr int64_t BL = 32;
  for (int64_t m0 = 0; m0 < M; m0 += BL)
    for (int64_t n0 = 0; n0 < N; n0 += BL) {
      int64_t m1 = std::min(M, m0 + BL), n1 = std::min(N, n0 + BL);
      for (int64_t m = m0; m < m1; ++m)
        for (int64_t n = n0; n < n1; ++n) dst[n * M + m] = src[m * N + n];
    }
}

}  // namespace anatembed::diffcore
