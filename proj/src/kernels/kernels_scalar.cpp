#include "splitens/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Scalar reference kernels. These define the semantics; SIMD variants are
// checked against them. Parallel loops split rows of C, so every output
// element is accumulated by exactly one thread in a fixed order and results
// do not depend on the thread count.

namespace splitens::kern {
namespace {

constexpr long kParallelCutoff = 1 << 16;  // M*N*K below this stays serial

void gemm_nn_scalar(const double* A, const double* B, double* C, int M, int N, int K) {
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
            for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
    (void)work;
}

void gemm_nt_scalar(const double* A, const double* B, double* C, int M, int N, int K) {
    const long work = static_cast<long>(M) * N * K;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
#endif
    for (int m = 0; m < M; ++m) {
        const double* arow = A + static_cast<size_t>(m) * K;
        double* crow = C + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double* brow = B + static_cast<size_t>(n) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[n] += acc;
        }
    }
    (void)work;
}

void gemm_tn_scalar(const double* A, const double* B, double* C, int M, int N, int K) {
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
            for (int n = 0; n < N; ++n) crow[n] += a * brow[n];
        }
    }
    (void)work;
}

double dot_scalar(const double* a, const double* b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_scalar(double a, const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scale_scalar(double a, double* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] *= a;
}

void vadd_scalar(const double* a, const double* b, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void relu_fwd_scalar(const double* x, double* y, size_t n) {
    for (size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_bwd_scalar(const double* x, const double* dy, double* dx, size_t n) {
    for (size_t i = 0; i < n; ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
}

}  // namespace

const Ops& scalar_ops() {
    static const Ops table = {
        gemm_nn_scalar, gemm_nt_scalar, gemm_tn_scalar,
        dot_scalar,     axpy_scalar,    scale_scalar,
        vadd_scalar,    relu_fwd_scalar, relu_bwd_scalar,
    };
    return table;
}

}  // namespace splitens::kern
