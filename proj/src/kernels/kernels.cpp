#include "splitens/kernels.hpp"

#include <cstdlib>

namespace splitens::kern {

#if defined(__x86_64__) || defined(_M_X64)
const Ops& avx2_ops();
#endif
#if defined(__aarch64__)
const Ops& neon_ops();
#endif

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

struct Dispatch {
    const Ops* active = nullptr;
    Backend backend = Backend::scalar;

    Dispatch() {
        backend = Backend::scalar;
        active = &scalar_ops();
        std::string want = "auto";
        if (const char* env = std::getenv("SPLITENS_KERNELS")) want = env;
        if (want == "auto") {
#if defined(__aarch64__)
            backend = Backend::neon;
            active = &neon_ops();
#else
            if (cpu_has_avx2()) {
                backend = Backend::avx2;
                active = &avx2_ops();
            }
#endif
        } else {
            select(want);
        }
    }

    bool select(const std::string& name) {
        if (name == "scalar") {
            backend = Backend::scalar;
            active = &scalar_ops();
            return true;
        }
        if (name == "avx2") {
#if defined(__x86_64__) || defined(_M_X64)
            if (cpu_has_avx2()) {
                backend = Backend::avx2;
                active = &avx2_ops();
                return true;
            }
#endif
            return false;
        }
        if (name == "neon") {
#if defined(__aarch64__)
            backend = Backend::neon;
            active = &neon_ops();
            return true;
#else
            return false;
#endif
        }
        if (name == "auto") {
#if defined(__aarch64__)
            backend = Backend::neon;
            active = &neon_ops();
#else
            if (cpu_has_avx2()) {
                backend = Backend::avx2;
                active = &avx2_ops();
            } else {
                backend = Backend::scalar;
                active = &scalar_ops();
            }
#endif
            return true;
        }
        return false;
    }
};

Dispatch& dispatch() {
    static Dispatch d;
    return d;
}

}  // namespace

const Ops& ops() { return *dispatch().active; }

Backend active_backend() { return dispatch().backend; }

std::string backend_name() {
    switch (dispatch().backend) {
        case Backend::avx2: return "avx2";
        case Backend::neon: return "neon";
        default: return "scalar";
    }
}

std::vector<Backend> available_backends() {
    std::vector<Backend> v{Backend::scalar};
#if defined(__x86_64__) || defined(_M_X64)
    if (cpu_has_avx2()) v.push_back(Backend::avx2);
#endif
#if defined(__aarch64__)
    v.push_back(Backend::neon);
#endif
    return v;
}

bool set_backend(const std::string& name) { return dispatch().select(name); }

}  // namespace splitens::kern
