// NEON variants, 2-wide double lanes (aarch64 only; NEON is baseline there).

#if defined(__aarch64__)

#include <arm_neon.h>

#include "splitens/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace splitens::kern {
namespace {

constexpr long kParallelCutoff = 1 << 16;

void gemm_nn_neon(const double* A, const double* B, double* C, int M, int N, int K) {
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
            const float64x2_t av = vdupq_n_f64(a);
            int n = 0;
            for (; n + 2 <= N; n += 2) {
                float64x2_t c = vld1q_f64(crow + n);
                c = vfmaq_f64(c, av, vld1q_f64(brow + n));
                vst1q_f64(crow + n, c);
            }
            for (; n < N; ++n) crow[n] += a * brow[n];
        }
    }
    (void)work;
}

void gemm_nt_neon(const double* A, const double* B, double* C, int M, int N, int K) {
    const long work = static_cast<long>(M) * N * K;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
#endif
    for (int m = 0; m < M; ++m) {
        const double* arow = A + static_cast<size_t>(m) * K;
        double* crow = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double* brow = B + static_cast<size_t>(n) * K;
            float64x2_t acc = vdupq_n_f64(0.0);
            int k = 0;
            for (; k + 2 <= K; k += 2)
                acc = vfmaq_f64(acc, vld1q_f64(arow + k), vld1q_f64(brow + k));
            double s = vaddvq_f64(acc);
            for (; k < K; ++k) s += arow[k] * brow[k];
            crow[n] += s;
        }
    }
    (void)work;
}

void gemm_tn_neon(const double* A, const double* B, double* C, int M, int N, int K) {
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
            const float64x2_t av = vdupq_n_f64(a);
            int n = 0;
            for (; n + 2 <= N; n += 2) {
                float64x2_t c = vld1q_f64(crow + n);
                c = vfmaq_f64(c, av, vld1q_f64(brow + n));
                vst1q_f64(crow + n, c);
            }
            for (; n < N; ++n) crow[n] += a * brow[n];
        }
    }
    (void)work;
}

double dot_neon(const double* a, const double* b, size_t n) {
    float64x2_t acc = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2)
        acc = vfmaq_f64(acc, vld1q_f64(a + i), vld1q_f64(b + i));
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_neon(double a, const double* x, double* y, size_t n) {
    const float64x2_t av = vdupq_n_f64(a);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        float64x2_t v = vld1q_f64(y + i);
        v = vfmaq_f64(v, av, vld1q_f64(x + i));
        vst1q_f64(y + i, v);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

void scale_neon(double a, double* x, size_t n) {
    const float64x2_t av = vdupq_n_f64(a);
    size_t i = 0;
    for (; i + 2 <= n; i += 2)
        vst1q_f64(x + i, vmulq_f64(av, vld1q_f64(x + i)));
    for (; i < n; ++i) x[i] *= a;
}

void vadd_neon(const double* a, const double* b, double* y, size_t n) {
    size_t i = 0;
    for (; i + 2 <= n; i += 2)
        vst1q_f64(y + i, vaddq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    for (; i < n; ++i) y[i] = a[i] + b[i];
}

void relu_fwd_neon(const double* x, double* y, size_t n) {
    const float64x2_t zero = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2)
        vst1q_f64(y + i, vmaxq_f64(zero, vld1q_f64(x + i)));
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_neon(const double* x, const double* dy, double* dx, size_t n) {
    const float64x2_t zero = vdupq_n_f64(0.0);
    size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        uint64x2_t mask = vcgtq_f64(vld1q_f64(x + i), zero);
        float64x2_t g = vld1q_f64(dy + i);
        vst1q_f64(dx + i, vreinterpretq_f64_u64(vandq_u64(mask, vreinterpretq_u64_f64(g))));
    }
    for (; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

}  // namespace

const Ops& neon_ops() {
    static const Ops table = {
        gemm_nn_neon, gemm_nt_neon, gemm_tn_neon,
        dot_neon,     axpy_neon,    scale_neon,
        vadd_neon,    relu_fwd_neon, relu_bwd_neon,
    };
    return table;
}

}  // namespace splitens::kern

#endif  // aarch64
