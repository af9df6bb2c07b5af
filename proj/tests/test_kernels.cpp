#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "splitens/kernels.hpp"
#include "splitens/rng.hpp"

using namespace splitens;

namespace {

// Naive triple loop, the semantic reference for every GEMM variant.
void gemm_nn_naive(const std::vector<double>& a, const std::vector<double>& b,
                   std::vector<double>& c, int m, int n, int k) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int t = 0; t < k; ++t) c[i * n + j] += a[i * k + t] * b[t * n + j];
}

std::vector<double> random_vec(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal(0.0, 1.0);
    return v;
}

bool close(double a, double b, double tol = 1e-11) {
    return std::abs(a - b) <= tol * (1.0 + std::max(std::abs(a), std::abs(b)));
}

}  // namespace

TEST_CASE("gemm variants match the naive reference on every backend") {
    Rng rng(42);
    for (auto backend : kern::available_backends()) {
        const char* name = backend == kern::Backend::scalar  ? "scalar"
                           : backend == kern::Backend::avx2 ? "avx2"
                                                             : "neon";
        REQUIRE(kern::set_backend(name));
        const auto& ops = kern::ops();
        for (auto [m, n, k] : {std::tuple{3, 5, 7}, {8, 8, 8}, {1, 13, 4}, {17, 6, 29}}) {
            auto a = random_vec(static_cast<size_t>(m) * k, rng);
            auto b = random_vec(static_cast<size_t>(k) * n, rng);
            std::vector<double> want(static_cast<size_t>(m) * n, 0.0);
            gemm_nn_naive(a, b, want, m, n, k);

            std::vector<double> got(want.size(), 0.0);
            ops.gemm_nn(a.data(), b.data(), got.data(), m, n, k);
            for (size_t i = 0; i < want.size(); ++i) CHECK(close(got[i], want[i]));

            // nt: B supplied transposed
            std::vector<double> bt(static_cast<size_t>(n) * k);
            for (int t = 0; t < k; ++t)
                for (int j = 0; j < n; ++j) bt[j * k + t] = b[t * n + j];
            std::fill(got.begin(), got.end(), 0.0);
            ops.gemm_nt(a.data(), bt.data(), got.data(), m, n, k);
            for (size_t i = 0; i < want.size(); ++i) CHECK(close(got[i], want[i]));

            // tn: A supplied transposed
            std::vector<double> at(static_cast<size_t>(k) * m);
            for (int i = 0; i < m; ++i)
                for (int t = 0; t < k; ++t) at[t * m + i] = a[i * k + t];
            std::fill(got.begin(), got.end(), 0.0);
            ops.gemm_tn(at.data(), b.data(), got.data(), m, n, k);
            for (size_t i = 0; i < want.size(); ++i) CHECK(close(got[i], want[i]));
        }
    }
    kern::set_backend("auto");
}

TEST_CASE("SIMD elementwise kernels agree with the scalar reference") {
    Rng rng(7);
    const auto& ref = kern::scalar_ops();
    for (auto backend : kern::available_backends()) {
        if (backend == kern::Backend::scalar) continue;
        REQUIRE(kern::set_backend(backend == kern::Backend::avx2 ? "avx2" : "neon"));
        const auto& ops = kern::ops();
        for (size_t n : {1u, 3u, 4u, 17u, 256u, 1001u}) {
            auto x = random_vec(n, rng);
            auto y = random_vec(n, rng);

            CHECK(close(ops.dot(x.data(), y.data(), n), ref.dot(x.data(), y.data(), n)));

            auto y1 = y, y2 = y;
            ops.axpy(0.37, x.data(), y1.data(), n);
            ref.axpy(0.37, x.data(), y2.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(close(y1[i], y2[i]));

            auto x1 = x, x2 = x;
            ops.scale(-1.25, x1.data(), n);
            ref.scale(-1.25, x2.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(x1[i] == x2[i]);

            std::vector<double> s1(n), s2(n);
            ops.vadd(x.data(), y.data(), s1.data(), n);
            ref.vadd(x.data(), y.data(), s2.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(s1[i] == s2[i]);

            std::vector<double> r1(n), r2(n), d1(n), d2(n);
            ops.relu_fwd(x.data(), r1.data(), n);
            ref.relu_fwd(x.data(), r2.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(r1[i] == r2[i]);
            ops.relu_bwd(x.data(), y.data(), d1.data(), n);
            ref.relu_bwd(x.data(), y.data(), d2.data(), n);
            for (size_t i = 0; i < n; ++i) CHECK(d1[i] == d2[i]);
        }
    }
    kern::set_backend("auto");
}

TEST_CASE("backend selection") {
    CHECK(kern::set_backend("scalar"));
    CHECK(kern::backend_name() == "scalar");
    CHECK_FALSE(kern::set_backend("definitely-not-a-backend"));
    CHECK(kern::backend_name() == "scalar");
    CHECK(kern::set_backend("auto"));
#if defined(__x86_64__)
    // on this build the auto pick must be avx2 whenever the CPU reports it
    bool has_avx2 = false;
    for (auto b : kern::available_backends()) has_avx2 |= b == kern::Backend::avx2;
    if (has_avx2) CHECK(kern::backend_name() == "avx2");
#endif
}
