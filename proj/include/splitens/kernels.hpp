#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace splitens::kern {

// Double-precision compute kernels behind the layer implementations.
// Every entry has a scalar reference version; SIMD variants (AVX2 on x86-64,
// NEON on aarch64) are selected at runtime and must agree with the scalar
// reference within round-off (equivalence-tested in tests/test_kernels.cpp).
//
// GEMM convention: row-major, accumulate into C (caller zeroes when needed).
struct Ops {
    // C[M,N] += A[M,K] * B[K,N]
    void (*gemm_nn)(const double* A, const double* B, double* C, int M, int N, int K);
    // C[M,N] += A[M,K] * B[N,K]^T   (i.e. C[m,n] += dot(A[m,:], B[n,:]))
    void (*gemm_nt)(const double* A, const double* B, double* C, int M, int N, int K);
    // C[M,N] += A[K,M]^T * B[K,N]
    void (*gemm_tn)(const double* A, const double* B, double* C, int M, int N, int K);

    double (*dot)(const double* a, const double* b, size_t n);
    void (*axpy)(double a, const double* x, double* y, size_t n);  // y += a*x
    void (*scale)(double a, double* x, size_t n);                  // x *= a
    void (*vadd)(const double* a, const double* b, double* y, size_t n);  // y = a+b
    void (*relu_fwd)(const double* x, double* y, size_t n);
    // dx = dy where x > 0 else 0
    void (*relu_bwd)(const double* x, const double* dy, double* dx, size_t n);
};

enum class Backend { scalar, avx2, neon };

// Active kernel table. Initialized lazily: picks the widest backend the CPU
// supports unless the SPLITENS_KERNELS env var ("scalar"/"avx2"/"neon"/"auto")
// says otherwise.
const Ops& ops();

Backend active_backend();
std::string backend_name();
std::vector<Backend> available_backends();

// Returns false if the requested backend is not available on this machine.
bool set_backend(const std::string& name);

const Ops& scalar_ops();  // always available; the reference implementation

}  // namespace splitens::kern
