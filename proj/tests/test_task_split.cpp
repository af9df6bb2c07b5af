#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "splitens/rng.hpp"
#include "splitens/task_split.hpp"

using namespace splitens;

namespace {

SubtaskSpec small_spec() {
    SubtaskSpec spec;
    spec.total_classes = 4;
    spec.groups = {{0, 1}, {2, 3}};
    spec.per_class_count = 10;
    return spec;
}

// High-precision evaluation of the class-balance weight formula; long double
// keeps ~18 significant digits, comfortably beyond the 1e-10 gate.
long double cb_weight_oracle(long double beta, long double m) {
    if (beta == 0.0L) return 1.0L;
    const long double denom = 1.0L - std::pow(beta, m);
    return (1.0L - beta) / denom;
}

double rel_err(double got, long double want) {
    return std::abs(static_cast<long double>(got) - want) /
           std::max<long double>(std::abs(want), 1e-300L);
}

}  // namespace

TEST_CASE("convert_label: one-hot for ID members") {
    auto spec = small_spec();
    auto t = convert_label(spec, 0, 1);
    CHECK(t.values == std::vector<double>{0.0, 1.0, 0.0});
}

TEST_CASE("convert_label: soft target for OOD members") {
    auto spec = small_spec();
    auto t = convert_label(spec, 0, 3);
    REQUIRE(t.values.size() == 3);
    CHECK(t.values[0] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(t.values[1] == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(t.values[2] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("convert_label: the N=100 K=20 target is exact") {
    SubtaskSpec spec;
    spec.total_classes = 100;
    spec.groups.resize(5);
    for (int g = 0; g < 5; ++g)
        for (int c = 0; c < 20; ++c) spec.groups[g].push_back(g * 20 + c);
    spec.per_class_count = 500;
    auto t = convert_label(spec, 0, 99);  // class 99 is OOD for subtask 0
    REQUIRE(t.values.size() == 21);
    for (int j = 0; j < 20; ++j) CHECK(t.values[j] == 0.01);
    CHECK(t.values[20] == 0.8);
    double sum = 0;
    for (double v : t.values) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-12);
}

TEST_CASE("convert_label: one-hot OOD ablation mode") {
    auto spec = small_spec();
    auto t = convert_label(spec, 0, 3, OodTargetMode::one_hot);
    CHECK(t.values == std::vector<double>{0.0, 0.0, 1.0});
}

TEST_CASE("convert_label: every target sums to one, and ID classes map to a single subtask") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        GroupingOptions opts;
        opts.strategy = GroupingStrategy::random;
        opts.n_splits = 2 + static_cast<int>(rng.below(4));
        opts.seed = rng.next_u64();
        const int n = opts.n_splits * (1 + static_cast<int>(rng.below(6)));
        auto spec = group_classes(n, opts, 5);
        for (int label = 0; label < n; ++label) {
            int non_ood_subtasks = 0;
            for (int i = 0; i < spec.num_subtasks(); ++i) {
                for (auto mode : {OodTargetMode::ood_aware, OodTargetMode::one_hot}) {
                    auto t = convert_label(spec, i, label, mode);
                    double sum = 0;
                    for (double v : t.values) sum += v;
                    CHECK(std::abs(sum - 1.0) < 1e-12);
                }
                auto t = convert_label(spec, i, label);
                if (t.values.back() == 0.0) ++non_ood_subtasks;
            }
            CHECK(non_ood_subtasks == 1);
        }
    }
}

TEST_CASE("convert_label input validation") {
    auto spec = small_spec();
    CHECK_THROWS_AS(convert_label(spec, 0, 4), std::invalid_argument);
    CHECK_THROWS_AS(convert_label(spec, 2, 0), std::invalid_argument);
    CHECK_THROWS_AS(convert_label(spec, -1, 0), std::invalid_argument);
}

TEST_CASE("class_balanced_weights: beta=0 gives unit weights") {
    auto spec = small_spec();
    auto w = class_balanced_weights(spec, 0, 0.0);
    for (double v : w.weights) CHECK(v == 1.0);
}

TEST_CASE("class_balanced_weights: frozen high-precision values") {
    // N=10, K=5, n=5000, beta=0.9999
    SubtaskSpec spec;
    spec.total_classes = 10;
    spec.groups = {{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}};
    spec.per_class_count = 5000;
    auto w = class_balanced_weights(spec, 0, 0.9999);
    CHECK(rel_err(w.weights[0], 2.54139613855372582e-4L) < 1e-10);
    CHECK(rel_err(w.weights[5], 1.08941331211823716e-4L) < 1e-10);
}

TEST_CASE("class_balanced_weights: n=1, beta=0.5, N-K=2") {
    SubtaskSpec spec;
    spec.total_classes = 3;
    spec.groups = {{0}, {1, 2}};
    spec.per_class_count = 1;
    auto w = class_balanced_weights(spec, 0, 0.5);
    CHECK(w.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(w.weights[1] == doctest::Approx(0.5 / 0.75).epsilon(1e-12));
}

TEST_CASE("class_balanced_weights: oracle grid and the OOD<=ID ordering") {
    for (double beta : {0.0, 0.9, 0.999, 0.9999}) {
        for (int n : {1, 500, 5000}) {
            for (int rest : {1, 80}) {  // N-K
                SubtaskSpec spec;
                spec.total_classes = rest + 2;
                spec.groups = {{0, 1}, {}};
                for (int c = 2; c < spec.total_classes; ++c) spec.groups[1].push_back(c);
                spec.per_class_count = n;
                auto w = class_balanced_weights(spec, 0, beta);
                CHECK(rel_err(w.weights[0],
                              cb_weight_oracle(static_cast<long double>(beta), n)) < 1e-10);
                CHECK(rel_err(w.weights[2],
                              cb_weight_oracle(static_cast<long double>(beta),
                                               static_cast<long double>(rest) * n)) < 1e-10);
                CHECK(w.weights[2] <= w.weights[0] + 1e-18);
            }
        }
    }
}

TEST_CASE("normalize_mean_one preserves ratios and fixes the scale") {
    SubtaskSpec spec;
    spec.total_classes = 10;
    spec.groups = {{0, 1, 2, 3, 4}, {5, 6, 7, 8, 9}};
    spec.per_class_count = 5000;
    auto w = class_balanced_weights(spec, 0, 0.9999);
    auto n = normalize_mean_one(w);
    double mean = 0.0;
    for (double v : n.weights) mean += v;
    mean /= n.weights.size();
    CHECK(mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(n.weights[0] / n.weights[5] ==
          doctest::Approx(w.weights[0] / w.weights[5]).epsilon(1e-12));
}

TEST_CASE("class_balanced_weights rejects bad beta") {
    auto spec = small_spec();
    CHECK_THROWS_AS(class_balanced_weights(spec, 0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(class_balanced_weights(spec, 0, -0.1), std::invalid_argument);
}

TEST_CASE("cb_bce_loss: zero logits, one-hot target") {
    TargetVector t{{1.0, 0.0}};
    ClassBalancedWeights w{0.0, {1.0, 1.0}};
    CHECK(cb_bce_loss({0.0, 0.0}, t, w) == doctest::Approx(1.3862943611198906).epsilon(1e-12));
}

TEST_CASE("cb_bce_loss: doubling the weights doubles the loss") {
    TargetVector t{{0.3, 0.7}};
    ClassBalancedWeights w1{0.0, {1.0, 1.0}}, w2{0.0, {2.0, 2.0}};
    const std::vector<double> logits{0.4, -1.2};
    CHECK(cb_bce_loss(logits, t, w2) ==
          doctest::Approx(2.0 * cb_bce_loss(logits, t, w1)).epsilon(1e-12));
}

TEST_CASE("cb_bce_loss: stationary when target equals sigmoid(logits)") {
    const std::vector<double> logits{0.7, -0.3, 1.5};
    TargetVector t;
    for (double x : logits) t.values.push_back(1.0 / (1.0 + std::exp(-x)));
    ClassBalancedWeights w{0.0, {1.0, 1.0, 1.0}};
    Tensor batch = Tensor::batch_vec(1, 3);
    for (int j = 0; j < 3; ++j) batch.at2(0, j) = logits[j];
    Tensor grad;
    cb_bce_loss(batch, {t}, w, &grad);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(grad.at2(0, j)) < 1e-12);
}

TEST_CASE("cb_bce_loss stays finite for extreme logits") {
    TargetVector t{{1.0, 0.0}};
    ClassBalancedWeights w{0.0, {1.0, 1.0}};
    CHECK(std::isfinite(cb_bce_loss({-1000.0, 1000.0}, t, w)));
}

TEST_CASE("cb_bce_loss gradient matches central differences") {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const int width = 8;
        Tensor logits = Tensor::batch_vec(2, width);
        for (auto& v : logits.data) v = rng.normal(0.0, 2.0);
        std::vector<TargetVector> targets(2);
        ClassBalancedWeights w{0.0, {}};
        for (int j = 0; j < width; ++j) w.weights.push_back(0.5 + rng.uniform01());
        for (auto& t : targets) {
            t.values.assign(width, 0.0);
            t.values[rng.below(width)] = 1.0;
        }
        Tensor grad;
        cb_bce_loss(logits, targets, w, &grad);
        for (size_t i = 0; i < logits.size(); ++i) {
            const double h = 1e-6;
            Tensor lp = logits, lm = logits;
            lp.data[i] += h;
            lm.data[i] -= h;
            const double numeric =
                (cb_bce_loss(lp, targets, w) - cb_bce_loss(lm, targets, w)) / (2 * h);
            CHECK(std::abs(grad.data[i] - numeric) <=
                  1e-4 * std::max({std::abs(numeric), std::abs(grad.data[i]), 1e-8}));
        }
    }
}

TEST_CASE("ensemble_loss: lambda=0 equals the sum of CB terms") {
    auto spec = small_spec();
    std::vector<std::vector<double>> logits{{0.5, -0.2, 0.1}, {1.0, 0.3, -0.4}};
    std::vector<TargetVector> targets{convert_label(spec, 0, 2), convert_label(spec, 1, 2)};
    std::vector<ClassBalancedWeights> weights{class_balanced_weights(spec, 0, 0.9),
                                              class_balanced_weights(spec, 1, 0.9)};
    double manual = cb_bce_loss(logits[0], targets[0], weights[0]) +
                    cb_bce_loss(logits[1], targets[1], weights[1]);
    CHECK(ensemble_loss(spec, logits, targets, weights, 2, 0.0) ==
          doctest::Approx(manual).epsilon(1e-15));
}

TEST_CASE("ensemble_loss: identical submodels double the CB term") {
    SubtaskSpec spec;
    spec.total_classes = 4;
    spec.groups = {{0, 1}, {2, 3}};
    spec.per_class_count = 7;
    std::vector<double> one{0.5, -0.2, 0.1};
    std::vector<TargetVector> targets{convert_label(spec, 0, 0), convert_label(spec, 1, 0)};
    // same logits and (by symmetry of the groups) same weight vectors
    std::vector<ClassBalancedWeights> weights{class_balanced_weights(spec, 0, 0.99),
                                              class_balanced_weights(spec, 1, 0.99)};
    // subtask 1 sees label 0 as OOD; to compare against a doubled single term
    // make both targets the same
    targets[1] = targets[0];
    const double single = cb_bce_loss(one, targets[0], weights[0]);
    const double ce = [&] {
        std::vector<double> concat{one[0], one[1], one[0], one[1]};
        return softmax_cross_entropy(concat, 0);
    }();
    CHECK(ensemble_loss(spec, {one, one}, targets, weights, 0, 1e-4) ==
          doctest::Approx(2.0 * single + 1e-4 * ce).epsilon(1e-12));
}

TEST_CASE("ensemble_loss validates shapes") {
    auto spec = small_spec();
    std::vector<std::vector<double>> logits{{0.5, -0.2, 0.1}};
    std::vector<TargetVector> targets{convert_label(spec, 0, 2)};
    std::vector<ClassBalancedWeights> weights{class_balanced_weights(spec, 0, 0.9)};
    CHECK_THROWS_AS(ensemble_loss(spec, logits, targets, weights, 2, 0.0),
                    std::invalid_argument);
}

TEST_CASE("group_classes: explicit passthrough") {
    GroupingOptions opts;
    opts.strategy = GroupingStrategy::explicit_groups;
    opts.explicit_list = {{0, 1}, {2, 3}};
    auto spec = group_classes(4, opts, 3);
    CHECK(spec.groups == opts.explicit_list);
    CHECK(spec.per_class_count == 3);
}

TEST_CASE("group_classes: random partition covers all classes") {
    GroupingOptions opts;
    opts.strategy = GroupingStrategy::random;
    opts.n_splits = 5;
    opts.seed = 99;
    auto spec = group_classes(100, opts, 1);
    REQUIRE(spec.num_subtasks() == 5);
    std::vector<int> seen(100, 0);
    for (const auto& g : spec.groups) {
        CHECK(g.size() == 20);
        for (int c : g) seen[c]++;
    }
    for (int c = 0; c < 100; ++c) CHECK(seen[c] == 1);
    // same seed, same grouping
    CHECK(group_classes(100, opts, 1).groups == spec.groups);
}

TEST_CASE("group_classes: semantic grouping keeps supergroups whole") {
    GroupingOptions opts;
    opts.strategy = GroupingStrategy::semantic;
    opts.n_splits = 5;
    for (int c = 0; c < 100; ++c) opts.semantic_table[c] = "super" + std::to_string(c / 5);
    auto spec = group_classes(100, opts, 1);
    REQUIRE(spec.num_subtasks() == 5);
    for (const auto& g : spec.groups) {
        // each supergroup of 5 consecutive ids must be fully inside one group
        std::set<int> members(g.begin(), g.end());
        for (int c : g)
            for (int peer = (c / 5) * 5; peer < (c / 5) * 5 + 5; ++peer)
                CHECK(members.count(peer) == 1);
    }
}

TEST_CASE("group_classes rejects bad input") {
    GroupingOptions opts;
    opts.strategy = GroupingStrategy::explicit_groups;
    opts.explicit_list = {{0, 1}, {}};
    CHECK_THROWS_AS(group_classes(2, opts, 1), std::invalid_argument);
    opts.explicit_list = {{0, 1}, {5}};
    CHECK_THROWS_AS(group_classes(3, opts, 1), std::invalid_argument);
}
