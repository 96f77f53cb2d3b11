// SPDX-License-Identifier: Apache-2.0
//
// AVX2+FMA variants (4 doubles per vector). This translation unit is the
// only one built with -mavx2 -mfma; callers reach it through the dispatch
// table so the binary stays runnable on non-AVX2 hosts.

#include "kivqa/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

namespace kivqa::kernels::avx2 {

namespace {
inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d shuf = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}
}  // namespace

double dot(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    double r = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) r += a[i] * b[i];
    return r;
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale(std::size_t n, double alpha, double* x) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(x + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] *= alpha;
}

double sum(const double* a, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
    double r = hsum(acc);
    for (; i < n; ++i) r += a[i];
    return r;
}

double max_value(const double* a, std::size_t n) {
    std::size_t i = 0;
    double m;
    if (n >= 4) {
        __m256d vm = _mm256_loadu_pd(a);
        for (i = 4; i + 4 <= n; i += 4) vm = _mm256_max_pd(vm, _mm256_loadu_pd(a + i));
        __m128d lo = _mm256_castpd256_pd128(vm);
        __m128d hi = _mm256_extractf128_pd(vm, 1);
        lo = _mm_max_pd(lo, hi);
        __m128d shuf = _mm_unpackhi_pd(lo, lo);
        m = _mm_cvtsd_f64(_mm_max_sd(lo, shuf));
    } else {
        m = a[0];
        i = 1;
    }
    for (; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

void matmul_nn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = C + i * n;
        if (!acc)
            for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (std::size_t l = 0; l < k; ++l) {
            axpy(n, A[i * k + l], B + l * n, ci);
        }
    }
}

void matmul_nt(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = A + i * k;
        double* ci = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = dot(ai, B + j * k, k);
            ci[j] = acc ? ci[j] + d : d;
        }
    }
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n,
               const double* A, const double* B, double* C, bool acc) {
    if (!acc)
        for (std::size_t i = 0; i < m * n; ++i) C[i] = 0.0;
    for (std::size_t l = 0; l < k; ++l) {
        const double* al = A + l * m;
        const double* bl = B + l * n;
        for (std::size_t i = 0; i < m; ++i) axpy(n, al[i], bl, C + i * n);
    }
}

}  // namespace kivqa::kernels::avx2

#endif  // x86-64
