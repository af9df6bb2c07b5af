#include "splitens/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "splitens/kernels.hpp"

namespace splitens {

namespace {

void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// ---- Param surgery helpers -------------------------------------------------

void tensor_drop_rows(Tensor& t, const std::vector<int>& rows_desc) {
    if (rows_desc.empty()) return;
    const int stride = t.c * t.h * t.w;
    Tensor out(t.n - static_cast<int>(rows_desc.size()), t.c, t.h, t.w);
    size_t keep_mask_n = t.n;
    std::vector<char> drop(keep_mask_n, 0);
    for (int r : rows_desc) drop[r] = 1;
    int o = 0;
    for (int r = 0; r < t.n; ++r) {
        if (drop[r]) continue;
        std::copy_n(t.data.begin() + static_cast<size_t>(r) * stride, stride,
                    out.data.begin() + static_cast<size_t>(o) * stride);
        ++o;
    }
    t = std::move(out);
}

void tensor_drop_dim1(Tensor& t, const std::vector<int>& chans_desc) {
    if (chans_desc.empty()) return;
    std::vector<char> drop(t.c, 0);
    for (int r : chans_desc) drop[r] = 1;
    Tensor out(t.n, t.c - static_cast<int>(chans_desc.size()), t.h, t.w);
    const int plane = t.h * t.w;
    for (int i = 0; i < t.n; ++i) {
        int oc = 0;
        for (int ci = 0; ci < t.c; ++ci) {
            if (drop[ci]) continue;
            std::copy_n(t.sample(i) + static_cast<size_t>(ci) * plane, plane,
                        out.sample(i) + static_cast<size_t>(oc) * plane);
            ++oc;
        }
    }
    t = std::move(out);
}

// Remove column blocks [ch*block, (ch+1)*block) from a [rows, cols] tensor.
void tensor_drop_col_blocks(Tensor& t, const std::vector<int>& chans_desc, int block) {
    if (chans_desc.empty()) return;
    const int cols = t.c;
    std::vector<char> drop_col(cols, 0);
    for (int ch : chans_desc)
        for (int j = 0; j < block; ++j) drop_col[ch * block + j] = 1;
    int kept = 0;
    for (int j = 0; j < cols; ++j) kept += drop_col[j] ? 0 : 1;
    Tensor out(t.n, kept, 1, 1);
    for (int r = 0; r < t.n; ++r) {
        int o = 0;
        for (int j = 0; j < cols; ++j)
            if (!drop_col[j]) out.at2(r, o++) = t.at2(r, j);
    }
    t = std::move(out);
}

void param_drop_rows(Param& p, const std::vector<int>& rows_desc) {
    tensor_drop_rows(p.value, rows_desc);
    tensor_drop_rows(p.grad, rows_desc);
    tensor_drop_rows(p.velocity, rows_desc);
}

void param_drop_dim1(Param& p, const std::vector<int>& chans_desc) {
    tensor_drop_dim1(p.value, chans_desc);
    tensor_drop_dim1(p.grad, chans_desc);
    tensor_drop_dim1(p.velocity, chans_desc);
}

void param_drop_col_blocks(Param& p, const std::vector<int>& chans_desc, int block) {
    tensor_drop_col_blocks(p.value, chans_desc, block);
    tensor_drop_col_blocks(p.grad, chans_desc, block);
    tensor_drop_col_blocks(p.velocity, chans_desc, block);
}

// ---- im2col ----------------------------------------------------------------

void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int oh, int ow,
            double* col) {
    // col is [c*k*k, oh*ow]
    const int l = oh * ow;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* crow = col + (static_cast<size_t>(ci) * k * k + ky * k + kx) * l;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) crow[oy * ow + ox] = 0.0;
                        continue;
                    }
                    const double* xrow = x + (static_cast<size_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        crow[oy * ow + ox] = (ix >= 0 && ix < w) ? xrow[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, int c, int h, int w, int k, int stride, int pad, int oh,
                int ow, double* x) {
    const int l = oh * ow;
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* crow = col + (static_cast<size_t>(ci) * k * k + ky * k + kx) * l;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    double* xrow = x + (static_cast<size_t>(ci) * h + iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) xrow[ix] += crow[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

void he_normal_init(Tensor& t, int fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.normal(0.0, stddev);
}

std::vector<int> sorted_unique_desc(std::vector<int> v) {
    std::sort(v.begin(), v.end(), std::greater<int>());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

void drop_rows(Tensor& t, const std::vector<int>& rows_desc) { tensor_drop_rows(t, rows_desc); }

int64_t Layer::param_count() {
    std::vector<Param*> ps;
    collect_params(ps);
    int64_t total = 0;
    for (Param* p : ps) total += static_cast<int64_t>(p->value.size());
    return total;
}

void Layer::prune_part(int, const std::vector<int>&) {
    throw std::logic_error("prune_part: layer has no prunable structures");
}

void Layer::prune_in(const std::vector<int>&, int) {
    throw std::logic_error("prune_in: layer does not consume channels");
}

void Layer::for_each_structure_param(int, int,
                                     const std::function<void(double, double)>&) const {
    throw std::logic_error("for_each_structure_param: no structures");
}

void Layer::zero_structure(int, int) {
    throw std::logic_error("zero_structure: no structures");
}

// ---------------------------------------------------------------------------
// Conv
// ---------------------------------------------------------------------------

Conv::Conv(int in_ch, int out_ch, int k, int stride, int pad, bool use_bias, Rng* rng)
    : in_ch_(in_ch), out_ch_(out_ch), k_(k), stride_(stride), pad_(pad), has_bias_(use_bias) {
    check(in_ch > 0 && out_ch > 0 && k > 0 && stride > 0 && pad >= 0, "Conv: bad geometry");
    weight.init(out_ch, in_ch, k, k);
    if (has_bias_) bias.init(out_ch, 1, 1, 1);
    if (rng) he_normal_init(weight.value, in_ch * k * k, *rng);
}

Shape Conv::out_shape(const Shape& in) const {
    check(in.c == in_ch_, "Conv: channel mismatch");
    const int oh = (in.h + 2 * pad_ - k_) / stride_ + 1;
    const int ow = (in.w + 2 * pad_ - k_) / stride_ + 1;
    check(oh > 0 && ow > 0, "Conv: output collapses to zero");
    return Shape{out_ch_, oh, ow};
}

Tensor Conv::forward(const Tensor& x, ForwardMode) {
    check(x.c == in_ch_, "Conv::forward: channel mismatch");
    cached_x_ = x;
    const Shape os = out_shape(x.shape());
    Tensor y(x.n, os.c, os.h, os.w);
    const int l = os.h * os.w;
    const int kk = in_ch_ * k_ * k_;
    std::vector<double> col(static_cast<size_t>(kk) * l);
    const auto& K = kern::ops();
    for (int i = 0; i < x.n; ++i) {
        im2col(x.sample(i), x.c, x.h, x.w, k_, stride_, pad_, os.h, os.w, col.data());
        K.gemm_nn(weight.value.ptr(), col.data(), y.sample(i), out_ch_, l, kk);
        if (has_bias_) {
            for (int co = 0; co < out_ch_; ++co) {
                double* row = y.sample(i) + static_cast<size_t>(co) * l;
                const double b = bias.value.data[co];
                for (int j = 0; j < l; ++j) row[j] += b;
            }
        }
    }
    return y;
}

Tensor Conv::backward(const Tensor& dy) {
    const Tensor& x = cached_x_;
    check(!x.empty(), "Conv::backward before forward");
    const Shape os = out_shape(x.shape());
    check(dy.c == os.c && dy.h == os.h && dy.w == os.w && dy.n == x.n,
          "Conv::backward: grad shape mismatch");
    Tensor dx(x.n, x.c, x.h, x.w);
    const int l = os.h * os.w;
    const int kk = in_ch_ * k_ * k_;
    std::vector<double> col(static_cast<size_t>(kk) * l);
    std::vector<double> dcol(static_cast<size_t>(kk) * l);
    const auto& K = kern::ops();
    for (int i = 0; i < x.n; ++i) {
        im2col(x.sample(i), x.c, x.h, x.w, k_, stride_, pad_, os.h, os.w, col.data());
        // dW += dY * col^T
        K.gemm_nt(dy.sample(i), col.data(), weight.grad.ptr(), out_ch_, kk, l);
        // dcol = W^T * dY
        std::fill(dcol.begin(), dcol.end(), 0.0);
        K.gemm_tn(weight.value.ptr(), dy.sample(i), dcol.data(), kk, l, out_ch_);
        col2im_add(dcol.data(), x.c, x.h, x.w, k_, stride_, pad_, os.h, os.w, dx.sample(i));
        if (has_bias_) {
            for (int co = 0; co < out_ch_; ++co) {
                const double* row = dy.sample(i) + static_cast<size_t>(co) * l;
                double acc = 0.0;
                for (int j = 0; j < l; ++j) acc += row[j];
                bias.grad.data[co] += acc;
            }
        }
    }
    return dx;
}

std::unique_ptr<Layer> Conv::clone() const { return std::make_unique<Conv>(*this); }

uint64_t Conv::flops(const Shape& in) const {
    const Shape os = out_shape(in);
    return 2ull * k_ * k_ * in_ch_ * out_ch_ * os.h * os.w;
}

void Conv::collect_params(std::vector<Param*>& out) {
    out.push_back(&weight);
    if (has_bias_) out.push_back(&bias);
}

std::vector<PrunePart> Conv::prune_parts() const {
    return {PrunePart{0, out_ch_, true, out_ch_ > 1}};
}

void Conv::prune_part(int part, const std::vector<int>& remove) {
    check(part == 0, "Conv::prune_part: bad part");
    auto rows = sorted_unique_desc(remove);
    check(static_cast<int>(rows.size()) < out_ch_, "Conv::prune_part: would remove every filter");
    param_drop_rows(weight, rows);
    if (has_bias_) param_drop_rows(bias, rows);
    out_ch_ -= static_cast<int>(rows.size());
    cached_x_ = Tensor();
}

void Conv::prune_in(const std::vector<int>& remove, int block) {
    check(block == 1, "Conv::prune_in: conv input is channel-granular");
    auto chans = sorted_unique_desc(remove);
    param_drop_dim1(weight, chans);
    in_ch_ -= static_cast<int>(chans.size());
    cached_x_ = Tensor();
}

void Conv::for_each_structure_param(int part, int index,
                                    const std::function<void(double, double)>& fn) const {
    check(part == 0 && index >= 0 && index < out_ch_, "Conv: bad structure");
    const int stride = in_ch_ * k_ * k_;
    const double* w = weight.value.ptr() + static_cast<size_t>(index) * stride;
    const double* g = weight.grad.ptr() + static_cast<size_t>(index) * stride;
    for (int j = 0; j < stride; ++j) fn(w[j], g[j]);
    if (has_bias_) fn(bias.value.data[index], bias.grad.data[index]);
}

void Conv::zero_structure(int part, int index) {
    check(part == 0 && index >= 0 && index < out_ch_, "Conv: bad structure");
    const int stride = in_ch_ * k_ * k_;
    std::fill_n(weight.value.ptr() + static_cast<size_t>(index) * stride, stride, 0.0);
    if (has_bias_) bias.value.data[index] = 0.0;
}

void Conv::weight_elements(std::vector<const Param*>& out) const { out.push_back(&weight); }

json Conv::describe() const {
    return json{{"kind", "conv"},     {"in", in_ch_},   {"out", out_ch_}, {"k", k_},
                {"stride", stride_},  {"pad", pad_},    {"bias", has_bias_}};
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(int in_features, int out_features, bool use_bias, Rng* rng)
    : in_f_(in_features), out_f_(out_features), has_bias_(use_bias) {
    check(in_features > 0 && out_features > 0, "Linear: bad dims");
    weight.init(out_features, in_features, 1, 1);
    if (has_bias_) bias.init(out_features, 1, 1, 1);
    if (rng) he_normal_init(weight.value, in_features, *rng);
}

Shape Linear::out_shape(const Shape& in) const {
    check(in.features() == in_f_, "Linear: feature mismatch");
    return Shape{out_f_, 1, 1};
}

Tensor Linear::forward(const Tensor& x, ForwardMode) {
    check(x.shape().features() == in_f_, "Linear::forward: feature mismatch");
    cached_x_ = x;
    Tensor y = Tensor::batch_vec(x.n, out_f_);
    // Y[B,out] = X[B,in] * W[out,in]^T
    kern::ops().gemm_nt(x.ptr(), weight.value.ptr(), y.ptr(), x.n, out_f_, in_f_);
    if (has_bias_) {
        for (int i = 0; i < x.n; ++i)
            for (int j = 0; j < out_f_; ++j) y.at2(i, j) += bias.value.data[j];
    }
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    const Tensor& x = cached_x_;
    check(!x.empty(), "Linear::backward before forward");
    check(dy.n == x.n && dy.shape().features() == out_f_, "Linear::backward: grad mismatch");
    Tensor dx(x.n, x.c, x.h, x.w);
    const auto& K = kern::ops();
    // dX[B,in] = dY[B,out] * W[out,in]
    K.gemm_nn(dy.ptr(), weight.value.ptr(), dx.ptr(), x.n, in_f_, out_f_);
    // dW[out,in] += dY[B,out]^T * X[B,in]
    K.gemm_tn(dy.ptr(), x.ptr(), weight.grad.ptr(), out_f_, in_f_, x.n);
    if (has_bias_) {
        for (int i = 0; i < x.n; ++i)
            for (int j = 0; j < out_f_; ++j) bias.grad.data[j] += dy.at2(i, j);
    }
    return dx;
}

std::unique_ptr<Layer> Linear::clone() const { return std::make_unique<Linear>(*this); }

uint64_t Linear::flops(const Shape&) const { return 2ull * in_f_ * out_f_; }

void Linear::collect_params(std::vector<Param*>& out) {
    out.push_back(&weight);
    if (has_bias_) out.push_back(&bias);
}

std::vector<PrunePart> Linear::prune_parts() const {
    return {PrunePart{0, out_f_, true, out_f_ > 1}};
}

void Linear::prune_part(int part, const std::vector<int>& remove) {
    check(part == 0, "Linear::prune_part: bad part");
    auto rows = sorted_unique_desc(remove);
    check(static_cast<int>(rows.size()) < out_f_, "Linear::prune_part: would empty the layer");
    param_drop_rows(weight, rows);
    if (has_bias_) param_drop_rows(bias, rows);
    out_f_ -= static_cast<int>(rows.size());
    cached_x_ = Tensor();
}

void Linear::prune_in(const std::vector<int>& remove, int block) {
    auto chans = sorted_unique_desc(remove);
    param_drop_col_blocks(weight, chans, block);
    in_f_ -= static_cast<int>(chans.size()) * block;
    cached_x_ = Tensor();
}

void Linear::for_each_structure_param(int part, int index,
                                      const std::function<void(double, double)>& fn) const {
    check(part == 0 && index >= 0 && index < out_f_, "Linear: bad structure");
    const double* w = weight.value.ptr() + static_cast<size_t>(index) * in_f_;
    const double* g = weight.grad.ptr() + static_cast<size_t>(index) * in_f_;
    for (int j = 0; j < in_f_; ++j) fn(w[j], g[j]);
    if (has_bias_) fn(bias.value.data[index], bias.grad.data[index]);
}

void Linear::zero_structure(int part, int index) {
    check(part == 0 && index >= 0 && index < out_f_, "Linear: bad structure");
    std::fill_n(weight.value.ptr() + static_cast<size_t>(index) * in_f_, in_f_, 0.0);
    if (has_bias_) bias.value.data[index] = 0.0;
}

void Linear::weight_elements(std::vector<const Param*>& out) const { out.push_back(&weight); }

json Linear::describe() const {
    return json{{"kind", "linear"}, {"in", in_f_}, {"out", out_f_}, {"bias", has_bias_}};
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(int channels) : channels_(channels) {
    check(channels > 0, "BatchNorm: bad channel count");
    gamma.init(channels, 1, 1, 1);
    beta.init(channels, 1, 1, 1);
    gamma.value.fill(1.0);
    running_mean = Tensor(channels, 1, 1, 1);
    running_var = Tensor(channels, 1, 1, 1);
    running_var.fill(1.0);
}

Tensor BatchNorm::forward(const Tensor& x, ForwardMode mode) {
    check(x.c == channels_, "BatchNorm::forward: channel mismatch");
    const int plane = x.h * x.w;
    const int m = x.n * plane;
    Tensor y(x.n, x.c, x.h, x.w);
    cached_xhat_ = Tensor(x.n, x.c, x.h, x.w);
    cached_inv_std_.assign(channels_, 0.0);
    cached_batch_stats_ = mode != ForwardMode::infer;

    for (int ci = 0; ci < channels_; ++ci) {
        double mean, var;
        if (mode == ForwardMode::infer) {
            mean = running_mean.data[ci];
            var = running_var.data[ci];
        } else {
            double s = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const double* p = x.sample(i) + static_cast<size_t>(ci) * plane;
                for (int j = 0; j < plane; ++j) s += p[j];
            }
            mean = s / m;
            double sq = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const double* p = x.sample(i) + static_cast<size_t>(ci) * plane;
                for (int j = 0; j < plane; ++j) sq += (p[j] - mean) * (p[j] - mean);
            }
            var = sq / m;  // biased, used for normalization
            if (mode == ForwardMode::train) {
                const double unbiased = m > 1 ? sq / (m - 1) : var;
                running_mean.data[ci] = (1.0 - momentum_) * running_mean.data[ci] + momentum_ * mean;
                running_var.data[ci] = (1.0 - momentum_) * running_var.data[ci] + momentum_ * unbiased;
            }
        }
        const double inv_std = 1.0 / std::sqrt(var + eps_);
        cached_inv_std_[ci] = inv_std;
        const double g = gamma.value.data[ci];
        const double b = beta.value.data[ci];
        for (int i = 0; i < x.n; ++i) {
            const double* p = x.sample(i) + static_cast<size_t>(ci) * plane;
            double* xh = cached_xhat_.sample(i) + static_cast<size_t>(ci) * plane;
            double* yo = y.sample(i) + static_cast<size_t>(ci) * plane;
            for (int j = 0; j < plane; ++j) {
                xh[j] = (p[j] - mean) * inv_std;
                yo[j] = g * xh[j] + b;
            }
        }
    }
    return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
    check(!cached_xhat_.empty(), "BatchNorm::backward before forward");
    check(dy.same_dims(cached_xhat_), "BatchNorm::backward: grad mismatch");
    const int plane = dy.h * dy.w;
    const int m = dy.n * plane;
    Tensor dx(dy.n, dy.c, dy.h, dy.w);

    for (int ci = 0; ci < channels_; ++ci) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int i = 0; i < dy.n; ++i) {
            const double* d = dy.sample(i) + static_cast<size_t>(ci) * plane;
            const double* xh = cached_xhat_.sample(i) + static_cast<size_t>(ci) * plane;
            for (int j = 0; j < plane; ++j) {
                sum_dy += d[j];
                sum_dy_xhat += d[j] * xh[j];
            }
        }
        gamma.grad.data[ci] += sum_dy_xhat;
        beta.grad.data[ci] += sum_dy;
        const double g_inv_std = gamma.value.data[ci] * cached_inv_std_[ci];
        if (cached_batch_stats_) {
            const double inv_m = 1.0 / m;
            for (int i = 0; i < dy.n; ++i) {
                const double* d = dy.sample(i) + static_cast<size_t>(ci) * plane;
                const double* xh = cached_xhat_.sample(i) + static_cast<size_t>(ci) * plane;
                double* o = dx.sample(i) + static_cast<size_t>(ci) * plane;
                for (int j = 0; j < plane; ++j)
                    o[j] = g_inv_std * (d[j] - inv_m * sum_dy - xh[j] * inv_m * sum_dy_xhat);
            }
        } else {
            for (int i = 0; i < dy.n; ++i) {
                const double* d = dy.sample(i) + static_cast<size_t>(ci) * plane;
                double* o = dx.sample(i) + static_cast<size_t>(ci) * plane;
                for (int j = 0; j < plane; ++j) o[j] = g_inv_std * d[j];
            }
        }
    }
    return dx;
}

std::unique_ptr<Layer> BatchNorm::clone() const { return std::make_unique<BatchNorm>(*this); }

void BatchNorm::collect_params(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void BatchNorm::collect_state(std::vector<Tensor*>& out) {
    out.push_back(&running_mean);
    out.push_back(&running_var);
}

void BatchNorm::prune_channels(const std::vector<int>& remove) {
    auto rows = sorted_unique_desc(remove);
    param_drop_rows(gamma, rows);
    param_drop_rows(beta, rows);
    tensor_drop_rows(running_mean, rows);
    tensor_drop_rows(running_var, rows);
    channels_ -= static_cast<int>(rows.size());
    cached_xhat_ = Tensor();
}

void BatchNorm::weight_elements(std::vector<const Param*>&) const {
    // Norm scales are not split candidates.
}

json BatchNorm::describe() const {
    return json{{"kind", "batch_norm"}, {"channels", channels_}};
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor Relu::forward(const Tensor& x, ForwardMode) {
    cached_x_ = x;
    Tensor y(x.n, x.c, x.h, x.w);
    kern::ops().relu_fwd(x.ptr(), y.ptr(), x.size());
    return y;
}

Tensor Relu::backward(const Tensor& dy) {
    check(dy.same_dims(cached_x_), "Relu::backward: grad mismatch");
    Tensor dx(dy.n, dy.c, dy.h, dy.w);
    kern::ops().relu_bwd(cached_x_.ptr(), dy.ptr(), dx.ptr(), dy.size());
    return dx;
}

Tensor Tanh::forward(const Tensor& x, ForwardMode) {
    Tensor y(x.n, x.c, x.h, x.w);
    for (size_t i = 0; i < x.size(); ++i) y.data[i] = std::tanh(x.data[i]);
    cached_y_ = y;
    return y;
}

Tensor Tanh::backward(const Tensor& dy) {
    check(dy.same_dims(cached_y_), "Tanh::backward: grad mismatch");
    Tensor dx(dy.n, dy.c, dy.h, dy.w);
    for (size_t i = 0; i < dy.size(); ++i)
        dx.data[i] = dy.data[i] * (1.0 - cached_y_.data[i] * cached_y_.data[i]);
    return dx;
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Pool::Pool(Mode mode, int k, int stride) : mode_(mode), k_(k), stride_(stride) {
    if (mode != Mode::global_avg) check(k > 0 && stride > 0, "Pool: bad geometry");
}

std::string Pool::kind() const {
    switch (mode_) {
        case Mode::max: return "max_pool";
        case Mode::avg: return "avg_pool";
        default: return "global_avg_pool";
    }
}

Shape Pool::out_shape(const Shape& in) const {
    if (mode_ == Mode::global_avg) return Shape{in.c, 1, 1};
    const int oh = (in.h - k_) / stride_ + 1;
    const int ow = (in.w - k_) / stride_ + 1;
    check(oh > 0 && ow > 0, "Pool: output collapses to zero");
    return Shape{in.c, oh, ow};
}

Tensor Pool::forward(const Tensor& x, ForwardMode) {
    cached_in_ = x.shape();
    const Shape os = out_shape(x.shape());
    Tensor y(x.n, os.c, os.h, os.w);
    if (mode_ == Mode::global_avg) {
        const int plane = x.h * x.w;
        for (int i = 0; i < x.n; ++i)
            for (int ci = 0; ci < x.c; ++ci) {
                const double* p = x.sample(i) + static_cast<size_t>(ci) * plane;
                double s = 0.0;
                for (int j = 0; j < plane; ++j) s += p[j];
                y.at(i, ci, 0, 0) = s / plane;
            }
        return y;
    }
    if (mode_ == Mode::max)
        cached_argmax_.assign(static_cast<size_t>(x.n) * os.c * os.h * os.w, 0);
    for (int i = 0; i < x.n; ++i) {
        for (int ci = 0; ci < x.c; ++ci) {
            for (int oy = 0; oy < os.h; ++oy) {
                for (int ox = 0; ox < os.w; ++ox) {
                    const int y0 = oy * stride_, x0 = ox * stride_;
                    if (mode_ == Mode::max) {
                        double best = x.at(i, ci, y0, x0);
                        int best_idx = y0 * x.w + x0;
                        for (int ky = 0; ky < k_; ++ky)
                            for (int kx = 0; kx < k_; ++kx) {
                                const double v = x.at(i, ci, y0 + ky, x0 + kx);
                                if (v > best) {
                                    best = v;
                                    best_idx = (y0 + ky) * x.w + (x0 + kx);
                                }
                            }
                        y.at(i, ci, oy, ox) = best;
                        cached_argmax_[((static_cast<size_t>(i) * x.c + ci) * os.h + oy) * os.w +
                                       ox] = best_idx;
                    } else {
                        double s = 0.0;
                        for (int ky = 0; ky < k_; ++ky)
                            for (int kx = 0; kx < k_; ++kx) s += x.at(i, ci, y0 + ky, x0 + kx);
                        y.at(i, ci, oy, ox) = s / (k_ * k_);
                    }
                }
            }
        }
    }
    return y;
}

Tensor Pool::backward(const Tensor& dy) {
    const Shape in = cached_in_;
    Tensor dx(dy.n, in.c, in.h, in.w);
    if (mode_ == Mode::global_avg) {
        const int plane = in.h * in.w;
        for (int i = 0; i < dy.n; ++i)
            for (int ci = 0; ci < in.c; ++ci) {
                const double g = dy.at(i, ci, 0, 0) / plane;
                double* p = dx.sample(i) + static_cast<size_t>(ci) * plane;
                for (int j = 0; j < plane; ++j) p[j] = g;
            }
        return dx;
    }
    const Shape os = out_shape(in);
    for (int i = 0; i < dy.n; ++i) {
        for (int ci = 0; ci < in.c; ++ci) {
            for (int oy = 0; oy < os.h; ++oy) {
                for (int ox = 0; ox < os.w; ++ox) {
                    const double g = dy.at(i, ci, oy, ox);
                    if (mode_ == Mode::max) {
                        const int idx =
                            cached_argmax_[((static_cast<size_t>(i) * in.c + ci) * os.h + oy) *
                                               os.w + ox];
                        dx.at(i, ci, idx / in.w, idx % in.w) += g;
                    } else {
                        const double share = g / (k_ * k_);
                        for (int ky = 0; ky < k_; ++ky)
                            for (int kx = 0; kx < k_; ++kx)
                                dx.at(i, ci, oy * stride_ + ky, ox * stride_ + kx) += share;
                    }
                }
            }
        }
    }
    return dx;
}

json Pool::describe() const {
    json j{{"kind", kind()}};
    if (mode_ != Mode::global_avg) {
        j["k"] = k_;
        j["stride"] = stride_;
    }
    return j;
}

// ---------------------------------------------------------------------------
// ResidualBlock
// ---------------------------------------------------------------------------

ResidualBlock::ResidualBlock(int in_ch, int out_ch, int stride, bool use_bn, bool force_proj,
                             Rng* rng)
    : in_ch_(in_ch), out_ch_(out_ch), stride_(stride), use_bn_(use_bn) {
    conv1_ = std::make_unique<Conv>(in_ch, out_ch, 3, stride, 1, !use_bn, rng);
    conv2_ = std::make_unique<Conv>(out_ch, out_ch, 3, 1, 1, !use_bn, rng);
    if (use_bn) {
        bn1_ = std::make_unique<BatchNorm>(out_ch);
        bn2_ = std::make_unique<BatchNorm>(out_ch);
    }
    if (force_proj || stride != 1 || in_ch != out_ch) {
        proj_ = std::make_unique<Conv>(in_ch, out_ch, 1, stride, 0, !use_bn, rng);
        if (use_bn) proj_bn_ = std::make_unique<BatchNorm>(out_ch);
    }
}

Shape ResidualBlock::out_shape(const Shape& in) const {
    check(in.c == in_ch_, "ResidualBlock: channel mismatch");
    const Shape mid = conv1_->out_shape(in);  // spatial extent after the stride
    return Shape{out_ch_, mid.h, mid.w};
}

Tensor ResidualBlock::forward(const Tensor& x, ForwardMode mode) {
    cached_x_ = x;
    Tensor h = conv1_->forward(x, mode);
    if (bn1_) h = bn1_->forward(h, mode);
    // manual relu keeps the pre-activation cached for backward
    Tensor h_relu(h.n, h.c, h.h, h.w);
    kern::ops().relu_fwd(h.ptr(), h_relu.ptr(), h.size());
    cached_mid_relu_in_ = std::move(h);
    h = conv2_->forward(h_relu, mode);
    if (bn2_) h = bn2_->forward(h, mode);

    Tensor skip;
    if (proj_) {
        skip = proj_->forward(x, mode);
        if (proj_bn_) skip = proj_bn_->forward(skip, mode);
    } else {
        check(x.same_dims(h), "ResidualBlock: identity skip shape mismatch");
        skip = x;
    }
    Tensor pre(h.n, h.c, h.h, h.w);
    kern::ops().vadd(h.ptr(), skip.ptr(), pre.ptr(), h.size());
    cached_preact_ = pre;
    Tensor y(pre.n, pre.c, pre.h, pre.w);
    kern::ops().relu_fwd(pre.ptr(), y.ptr(), pre.size());
    // conv2's cached input is h_relu; keep our copy alive for repeat backward
    cached_mid_relu_out_ = std::move(h_relu);
    return y;
}

Tensor ResidualBlock::backward(const Tensor& dy) {
    check(!cached_preact_.empty(), "ResidualBlock::backward before forward");
    Tensor dpre(dy.n, dy.c, dy.h, dy.w);
    kern::ops().relu_bwd(cached_preact_.ptr(), dy.ptr(), dpre.ptr(), dy.size());

    Tensor d = dpre;
    if (bn2_) d = bn2_->backward(d);
    d = conv2_->backward(d);
    // backprop the mid relu
    Tensor dmid(d.n, d.c, d.h, d.w);
    kern::ops().relu_bwd(cached_mid_relu_in_.ptr(), d.ptr(), dmid.ptr(), d.size());
    if (bn1_) dmid = bn1_->backward(dmid);
    Tensor dx = conv1_->backward(dmid);

    if (proj_) {
        Tensor t = dpre;
        if (proj_bn_) t = proj_bn_->backward(t);
        Tensor dskip = proj_->backward(t);
        kern::ops().axpy(1.0, dskip.ptr(), dx.ptr(), dx.size());
    } else {
        kern::ops().axpy(1.0, dpre.ptr(), dx.ptr(), dx.size());
    }
    return dx;
}

std::unique_ptr<Layer> ResidualBlock::clone() const {
    auto copy = std::make_unique<ResidualBlock>(in_ch_, out_ch_, stride_, use_bn_,
                                                proj_ != nullptr, nullptr);
    copy->conv1_ = std::unique_ptr<Conv>(static_cast<Conv*>(conv1_->clone().release()));
    copy->conv2_ = std::unique_ptr<Conv>(static_cast<Conv*>(conv2_->clone().release()));
    if (bn1_) copy->bn1_ = std::unique_ptr<BatchNorm>(static_cast<BatchNorm*>(bn1_->clone().release()));
    if (bn2_) copy->bn2_ = std::unique_ptr<BatchNorm>(static_cast<BatchNorm*>(bn2_->clone().release()));
    if (proj_) copy->proj_ = std::unique_ptr<Conv>(static_cast<Conv*>(proj_->clone().release()));
    if (proj_bn_)
        copy->proj_bn_ = std::unique_ptr<BatchNorm>(static_cast<BatchNorm*>(proj_bn_->clone().release()));
    return copy;
}

uint64_t ResidualBlock::flops(const Shape& in) const {
    const Shape mid = conv1_->out_shape(in);
    uint64_t total = conv1_->flops(in) + conv2_->flops(mid);
    if (proj_) total += proj_->flops(in);
    return total;
}

void ResidualBlock::collect_params(std::vector<Param*>& out) {
    conv1_->collect_params(out);
    if (bn1_) bn1_->collect_params(out);
    conv2_->collect_params(out);
    if (bn2_) bn2_->collect_params(out);
    if (proj_) proj_->collect_params(out);
    if (proj_bn_) proj_bn_->collect_params(out);
}

void ResidualBlock::collect_state(std::vector<Tensor*>& out) {
    if (bn1_) bn1_->collect_state(out);
    if (bn2_) bn2_->collect_state(out);
    if (proj_bn_) proj_bn_->collect_state(out);
}

std::vector<PrunePart> ResidualBlock::prune_parts() const {
    std::vector<PrunePart> parts;
    parts.push_back(PrunePart{kPartInternal, conv1_->out_channels(), false,
                              conv1_->out_channels() > 1});
    parts.push_back(PrunePart{kPartOutput, out_ch_, true, proj_ != nullptr && out_ch_ > 1});
    return parts;
}

void ResidualBlock::prune_part(int part, const std::vector<int>& remove) {
    auto rows = sorted_unique_desc(remove);
    if (part == kPartInternal) {
        conv1_->prune_part(0, rows);
        if (bn1_) bn1_->prune_channels(rows);
        conv2_->prune_in(rows, 1);
    } else if (part == kPartOutput) {
        check(proj_ != nullptr, "ResidualBlock: identity-skip output is not prunable");
        conv2_->prune_part(0, rows);
        if (bn2_) bn2_->prune_channels(rows);
        proj_->prune_part(0, rows);
        if (proj_bn_) proj_bn_->prune_channels(rows);
        out_ch_ -= static_cast<int>(rows.size());
    } else {
        throw std::invalid_argument("ResidualBlock::prune_part: bad part");
    }
    cached_x_ = Tensor();
    cached_preact_ = Tensor();
}

void ResidualBlock::prune_in(const std::vector<int>& remove, int block) {
    check(block == 1, "ResidualBlock::prune_in: channel-granular input expected");
    check(proj_ != nullptr, "ResidualBlock: identity-skip input is not prunable");
    auto chans = sorted_unique_desc(remove);
    conv1_->prune_in(chans, 1);
    proj_->prune_in(chans, 1);
    in_ch_ -= static_cast<int>(chans.size());
    cached_x_ = Tensor();
}

void ResidualBlock::for_each_structure_param(
    int part, int index, const std::function<void(double, double)>& fn) const {
    if (part == kPartInternal) {
        conv1_->for_each_structure_param(0, index, fn);
        if (bn1_) {
            fn(bn1_->gamma.value.data[index], bn1_->gamma.grad.data[index]);
            fn(bn1_->beta.value.data[index], bn1_->beta.grad.data[index]);
        }
        return;
    }
    if (part == kPartOutput) {
        conv2_->for_each_structure_param(0, index, fn);
        if (bn2_) {
            fn(bn2_->gamma.value.data[index], bn2_->gamma.grad.data[index]);
            fn(bn2_->beta.value.data[index], bn2_->beta.grad.data[index]);
        }
        if (proj_) {
            proj_->for_each_structure_param(0, index, fn);
            if (proj_bn_) {
                fn(proj_bn_->gamma.value.data[index], proj_bn_->gamma.grad.data[index]);
                fn(proj_bn_->beta.value.data[index], proj_bn_->beta.grad.data[index]);
            }
        }
        return;
    }
    throw std::invalid_argument("ResidualBlock::for_each_structure_param: bad part");
}

void ResidualBlock::zero_structure(int part, int index) {
    if (part == kPartInternal) {
        conv1_->zero_structure(0, index);
        if (bn1_) {
            bn1_->gamma.value.data[index] = 0.0;
            bn1_->beta.value.data[index] = 0.0;
        }
        return;
    }
    if (part == kPartOutput) {
        conv2_->zero_structure(0, index);
        if (bn2_) {
            bn2_->gamma.value.data[index] = 0.0;
            bn2_->beta.value.data[index] = 0.0;
        }
        if (proj_) {
            proj_->zero_structure(0, index);
            if (proj_bn_) {
                proj_bn_->gamma.value.data[index] = 0.0;
                proj_bn_->beta.value.data[index] = 0.0;
            }
        }
        return;
    }
    throw std::invalid_argument("ResidualBlock::zero_structure: bad part");
}

void ResidualBlock::weight_elements(std::vector<const Param*>& out) const {
    conv1_->weight_elements(out);
    conv2_->weight_elements(out);
    if (proj_) proj_->weight_elements(out);
}

json ResidualBlock::describe() const {
    return json{{"kind", "residual_block"},
                {"in", in_ch_},
                {"out", out_ch_},
                {"mid", conv1_->out_channels()},
                {"stride", stride_},
                {"bn", use_bn_},
                {"proj", proj_ != nullptr}};
}

// ---------------------------------------------------------------------------
// Factory
// ---------------------------------------------------------------------------

json layer_cfg_to_json(const LayerCfg& cfg) {
    json j{{"kind", cfg.kind}};
    if (cfg.kind == "conv") {
        j["out"] = cfg.out;
        j["k"] = cfg.k;
        j["stride"] = cfg.stride;
        j["pad"] = cfg.pad;
        j["bias"] = cfg.bias;
    } else if (cfg.kind == "linear") {
        j["out"] = cfg.out;
        j["bias"] = cfg.bias;
    } else if (cfg.kind == "max_pool" || cfg.kind == "avg_pool") {
        j["k"] = cfg.k;
        j["stride"] = cfg.stride;
    } else if (cfg.kind == "residual_block") {
        j["out"] = cfg.out;
        j["stride"] = cfg.stride;
        j["bn"] = cfg.bn;
        j["proj"] = cfg.proj;
    }
    return j;
}

LayerCfg layer_cfg_from_json(const json& j) {
    LayerCfg cfg;
    cfg.kind = j.at("kind").get<std::string>();
    cfg.out = j.value("out", 0);
    cfg.k = j.value("k", 3);
    cfg.stride = j.value("stride", 1);
    cfg.pad = j.value("pad", 1);
    cfg.bias = j.value("bias", true);
    cfg.bn = j.value("bn", false);
    cfg.proj = j.value("proj", false);
    return cfg;
}

std::unique_ptr<Layer> make_layer(const LayerCfg& cfg, const Shape& in, Rng& rng) {
    if (cfg.kind == "conv")
        return std::make_unique<Conv>(in.c, cfg.out, cfg.k, cfg.stride, cfg.pad, cfg.bias, &rng);
    if (cfg.kind == "linear") return std::make_unique<Linear>(in.features(), cfg.out, cfg.bias, &rng);
    if (cfg.kind == "batch_norm") return std::make_unique<BatchNorm>(in.c);
    if (cfg.kind == "relu") return std::make_unique<Relu>();
    if (cfg.kind == "tanh") return std::make_unique<Tanh>();
    if (cfg.kind == "max_pool") return std::make_unique<Pool>(Pool::Mode::max, cfg.k, cfg.stride);
    if (cfg.kind == "avg_pool") return std::make_unique<Pool>(Pool::Mode::avg, cfg.k, cfg.stride);
    if (cfg.kind == "global_avg_pool")
        return std::make_unique<Pool>(Pool::Mode::global_avg, 0, 0);
    if (cfg.kind == "residual_block")
        return std::make_unique<ResidualBlock>(in.c, cfg.out, cfg.stride, cfg.bn, cfg.proj, &rng);
    throw std::invalid_argument("make_layer: unknown kind '" + cfg.kind + "'");
}

std::unique_ptr<Layer> layer_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "conv")
        return std::make_unique<Conv>(j.at("in").get<int>(), j.at("out").get<int>(),
                                      j.at("k").get<int>(), j.at("stride").get<int>(),
                                      j.at("pad").get<int>(), j.at("bias").get<bool>(), nullptr);
    if (kind == "linear")
        return std::make_unique<Linear>(j.at("in").get<int>(), j.at("out").get<int>(),
                                        j.at("bias").get<bool>(), nullptr);
    if (kind == "batch_norm") return std::make_unique<BatchNorm>(j.at("channels").get<int>());
    if (kind == "relu") return std::make_unique<Relu>();
    if (kind == "tanh") return std::make_unique<Tanh>();
    if (kind == "max_pool")
        return std::make_unique<Pool>(Pool::Mode::max, j.at("k").get<int>(),
                                      j.at("stride").get<int>());
    if (kind == "avg_pool")
        return std::make_unique<Pool>(Pool::Mode::avg, j.at("k").get<int>(),
                                      j.at("stride").get<int>());
    if (kind == "global_avg_pool") return std::make_unique<Pool>(Pool::Mode::global_avg, 0, 0);
    if (kind == "residual_block") {
        auto blk = std::make_unique<ResidualBlock>(j.at("in").get<int>(), j.at("out").get<int>(),
                                                   j.at("stride").get<int>(), j.at("bn").get<bool>(),
                                                   j.at("proj").get<bool>(), nullptr);
        // mid width may differ from out after internal pruning
        const int mid = j.value("mid", j.at("out").get<int>());
        if (mid != j.at("out").get<int>()) {
            std::vector<int> drop;
            for (int i = j.at("out").get<int>() - 1; i >= mid; --i) drop.push_back(i);
            blk->prune_part(ResidualBlock::kPartInternal, drop);
        }
        return blk;
    }
    throw std::invalid_argument("layer_from_json: unknown kind '" + kind + "'");
}

}  // namespace splitens
