// AVX2+FMA variants, 4-wide double lanes. Compiled with -mavx2 -mfma in its
// own translation unit; only reached after a runtime cpuid check, so the rest
// of the build stays baseline-ISA clean.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include "splitens/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace splitens::kern {
namespace {

constexpr long kParallelCutoff = 1 << 16;

void gemm_nn_avx2(const double* A, const double* B, double* C, int M, int N, int K) {
    const long work = static_cast<long>(M) * N * K;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
#endif
    for (int m = 0; m < M; ++m) {
        double* crow = C + static_cast<size_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            const double a = A[static_cast<size_t>(m) * K + k];
            if (a == 0.0) continue;
            const double* brow = B + static_cast<size_t>(k) * N;
            const __m256d av = _mm256_set1_pd(a);
            int n = 0;
            for (; n + 4 <= N; n += 4) {
                __m256d c = _mm256_loadu_pd(crow + n);
                c = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + n), c);
                _mm256_storeu_pd(crow + n, c);
            }
            for (; n < N; ++n) crow[n] += a * brow[n];
        }
    }
    (void)work;
}

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d swapped = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

void gemm_nt_avx2(const double* A, const double* B, double* C, int M, int N, int K) {
    const long work = static_cast<long>(M) * N * K;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
#endif
    for (int m = 0; m < M; ++m) {
        const double* arow = A + static_cast<size_t>(m) * K;
        double* crow = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double* brow = B + static_cast<size_t>(n) * K;
            __m256d acc = _mm256_setzero_pd();
            int k = 0;
            for (; k + 4 <= K; k += 4)
                acc = _mm256_fmadd_pd(_mm256_loadu_pd(arow + k), _mm256_loadu_pd(brow + k), acc);
            double s = hsum(acc);
            for (; k < K; ++k) s += arow[k] * brow[k];
            crow[n] += s;
        }
    }
    (void)work;
}

void gemm_tn_avx2(const double* A, const double* B, double* C, int M, int N, int K) {
    const long work = static_cast<long>(M) * N * K;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
#endif
    for (int m = 0; m < M; ++m) {
        double* crow = C + static_cast<size_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            const double a = A[static_cast<size_t>(k) * M + m];
            if (a == 0.0) continue;
            const double* brow = B + static_cast<size_t>(k) * N;
            const __m256d av = _mm256_set1_pd(a);
            int n = 0;
            for (; n + 4 <= N; n += 4) {
                __m256d c = _mm256_loadu_pd(crow + n);
                c = _mm256_fmadd_pd(av, _mm256_loadu_pd(brow + n), c);
                _mm256_storeu_pd(crow + n, c);
            }
            for (; n < N; ++n) crow[n] += a * brow[n];
        }
    }
    (void)work;
}

double dot_avx2(const double* a, const double* b, size_t n) {
    __m256d acc = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc);
    double s = hsum(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_avx2(double a, const double* x, double* y, size_t n) {
    const __m256d av = _mm256_set1_pd(a);
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d v = _mm256_loadu_pd(y + i);
        v = _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), v);
        _mm256_storeu_pd(y + i, v);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void scale_avx2(double a, double* x, size_t n) {
    const __m256d av = _mm256_set1_pd(a);
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(x + i, _mm256_mul_pd(av, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) x[i] *= a;
}

void vadd_avx2(const double* a, const double* b, double* y, size_t n) {
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) y[i] = a[i] + b[i];
}

void relu_fwd_avx2(const double* x, double* y, size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_max_pd(zero, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_avx2(const double* x, const double* dy, double* dx, size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
        _mm256_storeu_pd(dx + i, _mm256_and_pd(mask, _mm256_loadu_pd(dy + i)));
    }
    for (; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

}  // namespace

const Ops& avx2_ops() {
    static const Ops table = {
        gemm_nn_avx2, gemm_nt_avx2, gemm_tn_avx2,
        dot_avx2,     axpy_avx2,    scale_avx2,
        vadd_avx2,    relu_fwd_avx2, relu_bwd_avx2,
    };
    return table;
}

}  // namespace splitens::kern

#endif  // x86-64
