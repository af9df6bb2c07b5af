#pragma once

// Shared helpers for the test suites: finite-difference oracles and tiny
// randomized models. Everything here is independent of the gradient code
// paths it is used to check.

#include <cmath>
#include <functional>
#include <vector>

#include "splitens/rng.hpp"
#include "splitens/sensitivity.hpp"
#include "splitens/task_split.hpp"
#include "splitens/tree_model.hpp"

namespace splitens::testutil {

inline Tensor random_tensor(int n, int c, int h, int w, Rng& rng, double scale = 1.0) {
    Tensor t(n, c, h, w);
    for (double& v : t.data) v = rng.normal(0.0, scale);
    return t;
}

inline double max_rel_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a.data[i]), std::abs(b.data[i]), 1e-9});
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
    }
    return worst;
}

// Central difference d loss / d x for every element of `x`.
inline std::vector<double> numeric_grad(std::vector<double>& x,
                                        const std::function<double()>& loss, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = loss();
        x[i] = keep - h;
        const double down = loss();
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// Smooth tiny conv net (tanh/avg-pool only, so central differences are
// clean), randomized channel widths.
inline BackboneSpec tiny_smooth_backbone(Rng& rng, bool with_bn = true) {
    BackboneSpec spec;
    const int c1 = 2 + static_cast<int>(rng.below(3));
    const int c2 = 2 + static_cast<int>(rng.below(3));
    spec.push_back({.kind = "conv", .out = c1, .k = 3, .stride = 2, .pad = 1, .bias = !with_bn});
    if (with_bn) spec.push_back({.kind = "batch_norm"});
    spec.push_back({.kind = "tanh"});
    spec.push_back({.kind = "conv", .out = c2, .k = 3, .stride = 1, .pad = 1, .bias = true});
    spec.push_back({.kind = "tanh"});
    spec.push_back({.kind = "global_avg_pool"});
    return spec;
}

inline SubtaskSpec spec_2x2() {
    SubtaskSpec s;
    s.total_classes = 4;
    s.groups = {{0, 1}, {2, 3}};
    s.per_class_count = 8;
    return s;
}

inline SubtaskBatch random_batch(const Shape& in, int n, int classes, Rng& rng) {
    SubtaskBatch b;
    b.x = random_tensor(n, in.c, in.h, in.w, rng, 0.5);
    for (int i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng.below(classes)));
    return b;
}

// Mean class-balanced BCE of one submodel on a batch, via the public loss
// API only (no backward machinery) — the forward path for finite differences.
inline double submodel_loss_value(TreeModel& model, int sub, const SubtaskBatch& batch,
                                  const ClassBalancedWeights& w, OodTargetMode mode) {
    auto logits = model.forward(batch.x, ForwardMode::probe);
    std::vector<TargetVector> targets;
    for (int y : batch.labels) targets.push_back(convert_label(model.subtask_spec, sub, y, mode));
    return cb_bce_loss(logits[sub], targets, w, nullptr);
}

}  // namespace splitens::testutil
