// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma;
// nothing here may run before the dispatcher has confirmed CPU support.

#include <immintrin.h>

#include <cmath>

#include "hart/simd/kernels.hpp"

namespace hart::simd {
namespace {

template <bool TransA>
inline double a_at(const double* a, std::size_t lda, std::size_t i, std::size_t p) {
  return TransA ? a[p * lda + i] : a[i * lda + p];
}

inline void store_row(double* c, __m256d v, bool accumulate) {
  if (accumulate) v = _mm256_add_pd(v, _mm256_loadu_pd(c));
  _mm256_storeu_pd(c, v);
}

template <bool TransA>
void micro_4x8(std::size_t k, const double* a, std::size_t lda, std::size_t i, const double* b,
               std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  __m256d c00 = _mm256_setzero_pd(), c01 = _mm256_setzero_pd();
  __m256d c10 = _mm256_setzero_pd(), c11 = _mm256_setzero_pd();
  __m256d c20 = _mm256_setzero_pd(), c21 = _mm256_setzero_pd();
  __m256d c30 = _mm256_setzero_pd(), c31 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * ldb;
    const __m256d b0 = _mm256_loadu_pd(bp);
    const __m256d b1 = _mm256_loadu_pd(bp + 4);
    __m256d av = _mm256_set1_pd(a_at<TransA>(a, lda, i, p));
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_set1_pd(a_at<TransA>(a, lda, i + 1, p));
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_set1_pd(a_at<TransA>(a, lda, i + 2, p));
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_set1_pd(a_at<TransA>(a, lda, i + 3, p));
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  store_row(c, c00, accumulate);
  store_row(c + 4, c01, accumulate);
  store_row(c + ldc, c10, accumulate);
  store_row(c + ldc + 4, c11, accumulate);
  store_row(c + 2 * ldc, c20, accumulate);
  store_row(c + 2 * ldc + 4, c21, accumulate);
  store_row(c + 3 * ldc, c30, accumulate);
  store_row(c + 3 * ldc + 4, c31, accumulate);
}

template <bool TransA>
void micro_1x8(std::size_t k, const double* a, std::size_t lda, std::size_t i, const double* b,
               std::size_t ldb, double* c, bool accumulate) {
  __m256d c0 = _mm256_setzero_pd(), c1 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * ldb;
    const __m256d av = _mm256_set1_pd(a_at<TransA>(a, lda, i, p));
    c0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp), c0);
    c1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(bp + 4), c1);
  }
  store_row(c, c0, accumulate);
  store_row(c + 4, c1, accumulate);
}

template <bool TransA>
void micro_1x4(std::size_t k, const double* a, std::size_t lda, std::size_t i, const double* b,
               std::size_t ldb, double* c, bool accumulate) {
  __m256d c0 = _mm256_setzero_pd();
  for (std::size_t p = 0; p < k; ++p)
    c0 = _mm256_fmadd_pd(_mm256_set1_pd(a_at<TransA>(a, lda, i, p)), _mm256_loadu_pd(b + p * ldb), c0);
  store_row(c, c0, accumulate);
}

template <bool TransA>
void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) micro_4x8<TransA>(k, a, lda, i, b + j, ldb, c + i * ldc + j, ldc, accumulate);
    for (; i < m; ++i) micro_1x8<TransA>(k, a, lda, i, b + j, ldb, c + i * ldc + j, accumulate);
  }
  for (; j + 4 <= n; j += 4)
    for (std::size_t i = 0; i < m; ++i) micro_1x4<TransA>(k, a, lda, i, b + j, ldb, c + i * ldc + j, accumulate);
  for (; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a_at<TransA>(a, lda, i, p) * b[p * ldb + j];
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + s : s;
    }
  }
}

void gemm_nn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_avx2<false>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void gemm_tn_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm_avx2<true>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

inline double hsum(__m256d v) {
  const __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  const __m128d s = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(s, _mm_unpackhi_pd(s, s)));
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd(), s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), s1);
  }
  for (; i + 4 <= n; i += 4) s0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), s0);
  double s = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

// C = A * B^T: each output is a dot product of two contiguous rows.
void gemm_nt_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                  const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  const std::size_t k4 = k & ~std::size_t{3};
  std::size_t i = 0;
  for (; i + 2 <= m; i += 2) {
    const double* a0 = a + i * lda;
    const double* a1 = a0 + lda;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * ldb;
      const double* b1 = b0 + ldb;
      const double* b2 = b1 + ldb;
      const double* b3 = b2 + ldb;
      __m256d s[8];
      for (auto& v : s) v = _mm256_setzero_pd();
      for (std::size_t p = 0; p < k4; p += 4) {
        const __m256d x0 = _mm256_loadu_pd(a0 + p);
        const __m256d x1 = _mm256_loadu_pd(a1 + p);
        const __m256d y0 = _mm256_loadu_pd(b0 + p);
        const __m256d y1 = _mm256_loadu_pd(b1 + p);
        const __m256d y2 = _mm256_loadu_pd(b2 + p);
        const __m256d y3 = _mm256_loadu_pd(b3 + p);
        s[0] = _mm256_fmadd_pd(x0, y0, s[0]);
        s[1] = _mm256_fmadd_pd(x0, y1, s[1]);
        s[2] = _mm256_fmadd_pd(x0, y2, s[2]);
        s[3] = _mm256_fmadd_pd(x0, y3, s[3]);
        s[4] = _mm256_fmadd_pd(x1, y0, s[4]);
        s[5] = _mm256_fmadd_pd(x1, y1, s[5]);
        s[6] = _mm256_fmadd_pd(x1, y2, s[6]);
        s[7] = _mm256_fmadd_pd(x1, y3, s[7]);
      }
      const double* brow[4] = {b0, b1, b2, b3};
      for (std::size_t r = 0; r < 2; ++r) {
        const double* arow = r == 0 ? a0 : a1;
        for (std::size_t q = 0; q < 4; ++q) {
          double v = hsum(s[r * 4 + q]);
          for (std::size_t p = k4; p < k; ++p) v += arow[p] * brow[q][p];
          double& dst = c[(i + r) * ldc + j + q];
          dst = accumulate ? dst + v : v;
        }
      }
    }
    for (; j < n; ++j) {
      const double* bj = b + j * ldb;
      double& d0 = c[i * ldc + j];
      double& d1 = c[(i + 1) * ldc + j];
      const double v0 = dot_avx2(a0, bj, k);
      const double v1 = dot_avx2(a1, bj, k);
      d0 = accumulate ? d0 + v0 : v0;
      d1 = accumulate ? d1 + v1 : v1;
    }
  }
  for (; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = dot_avx2(a + i * lda, b + j * ldb, k);
      double& dst = c[i * ldc + j];
      dst = accumulate ? dst + v : v;
    }
  }
}

void mul_avx2(const double* x, const double* y, double* z, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(z + i, _mm256_mul_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) z[i] = x[i] * y[i];
}

void mul_add_avx2(const double* x, const double* y, double* z, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(z + i, _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), _mm256_loadu_pd(z + i)));
  for (; i < n; ++i) z[i] += x[i] * y[i];
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// exp on [-708, 708]: Cody-Waite reduction x = k ln2 + r, |r| <= ln2/2, then a
// degree-13 Taylor polynomial (truncation < 1e-17 relative) and exponent
// insertion. Lanes outside the range fall back to std::exp.
constexpr double kExpLimit = 708.0;

inline __m256d exp_core(__m256d x) {
  const __m256d log2e = _mm256_set1_pd(1.4426950408889634);
  const __m256d ln2_hi = _mm256_set1_pd(6.93147180369123816490e-01);
  const __m256d ln2_lo = _mm256_set1_pd(1.90821492927058770002e-10);
  const __m256d kd = _mm256_round_pd(_mm256_mul_pd(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
  __m256d r = _mm256_fnmadd_pd(kd, ln2_hi, x);
  r = _mm256_fnmadd_pd(kd, ln2_lo, r);

  static constexpr double inv_fact[] = {1.0 / 6227020800.0, 1.0 / 479001600.0, 1.0 / 39916800.0,
                                        1.0 / 3628800.0,    1.0 / 362880.0,    1.0 / 40320.0,
                                        1.0 / 5040.0,       1.0 / 720.0,       1.0 / 120.0,
                                        1.0 / 24.0,         1.0 / 6.0,         0.5,
                                        1.0,                1.0};
  __m256d p = _mm256_set1_pd(inv_fact[0]);
  for (std::size_t q = 1; q < std::size(inv_fact); ++q) p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(inv_fact[q]));

  // 2^k via the 1.5*2^52 rounding trick; |k| <= 1022 on the fast path.
  const __m256i bits = _mm256_castpd_si256(_mm256_add_pd(kd, _mm256_set1_pd(6755399441055744.0)));
  const __m256i biased = _mm256_sub_epi64(bits, _mm256_set1_epi64x(0x4338000000000000LL - 1023));
  const __m256d scale = _mm256_castsi256_pd(_mm256_slli_epi64(biased, 52));
  return _mm256_mul_pd(p, scale);
}

inline bool in_fast_range(__m256d x) {
  const __m256d lim = _mm256_set1_pd(kExpLimit);
  const __m256d absx = _mm256_andnot_pd(_mm256_set1_pd(-0.0), x);
  // Also rejects NaN lanes (ordered compare is false).
  return _mm256_movemask_pd(_mm256_cmp_pd(absx, lim, _CMP_LE_OQ)) == 0xF;
}

void exp_avx2(const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    if (in_fast_range(v)) {
      _mm256_storeu_pd(y + i, exp_core(v));
    } else {
      for (std::size_t q = 0; q < 4; ++q) y[i + q] = std::exp(x[i + q]);
    }
  }
  for (; i < n; ++i) y[i] = std::exp(x[i]);
}

void dak_avx2(const double* x, double* y, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256d one = _mm256_set1_pd(1.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    const __m256d neg = _mm256_min_pd(v, zero);
    if (!in_fast_range(neg)) {
      for (std::size_t q = 0; q < 4; ++q) y[i + q] = x[i + q] >= 0.0 ? x[i + q] + 1.0 : std::exp(x[i + q]);
      continue;
    }
    const __m256d pos_mask = _mm256_cmp_pd(v, zero, _CMP_GE_OQ);
    _mm256_storeu_pd(y + i, _mm256_blendv_pd(exp_core(neg), _mm256_add_pd(v, one), pos_mask));
  }
  for (; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] + 1.0 : std::exp(x[i]);
}

void dak_backward_avx2(const double* x, const double* y, const double* g, double* gx, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256d one = _mm256_set1_pd(1.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d pos_mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GE_OQ);
    const __m256d deriv = _mm256_blendv_pd(_mm256_loadu_pd(y + i), one, pos_mask);
    _mm256_storeu_pd(gx + i, _mm256_fmadd_pd(_mm256_loadu_pd(g + i), deriv, _mm256_loadu_pd(gx + i)));
  }
  for (; i < n; ++i) gx[i] += g[i] * (x[i] >= 0.0 ? 1.0 : y[i]);
}

}  // namespace

const KernelTable& avx2_kernel_table() {
  static const KernelTable table{Isa::avx2,  "avx2",       gemm_nn_avx2, gemm_nt_avx2,
                                 gemm_tn_avx2, mul_avx2,   mul_add_avx2, axpy_avx2,
                                 dot_avx2,   exp_avx2,     dak_avx2,     dak_backward_avx2};
  return table;
}

}  // namespace hart::simd
