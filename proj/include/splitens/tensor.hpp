#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace splitens {

// Per-sample feature shape. Fully-connected activations use h = w = 1.
struct Shape {
    int c = 0;
    int h = 0;
    int w = 0;

    int features() const { return c * h * w; }
    bool operator==(const Shape&) const = default;
};

// Dense 4-d tensor, NCHW, double precision, row-major.
// Vectors are stored as [n, len, 1, 1].
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_),
          data(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0) {
        if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0)
            throw std::invalid_argument("Tensor: negative dimension");
    }

    static Tensor vec(int len) { return Tensor(1, len, 1, 1); }
    static Tensor batch_vec(int n, int len) { return Tensor(n, len, 1, 1); }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    Shape shape() const { return Shape{c, h, w}; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    // Pointer to sample i's block.
    double* sample(int i) { return data.data() + static_cast<size_t>(i) * c * h * w; }
    const double* sample(int i) const { return data.data() + static_cast<size_t>(i) * c * h * w; }

    double& at(int i, int ch, int y, int x) {
        return data[((static_cast<size_t>(i) * c + ch) * h + y) * w + x];
    }
    double at(int i, int ch, int y, int x) const {
        return data[((static_cast<size_t>(i) * c + ch) * h + y) * w + x];
    }

    // 2-d accessor for [n, features] use.
    double& at2(int i, int j) { return data[static_cast<size_t>(i) * c * h * w + j]; }
    double at2(int i, int j) const { return data[static_cast<size_t>(i) * c * h * w + j]; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(0.0); }

    bool same_dims(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
};

}  // namespace splitens
