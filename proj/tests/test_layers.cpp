#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "splitens/layers.hpp"
#include "test_util.hpp"

using namespace splitens;
using namespace splitens::testutil;

namespace {

// Backward check against central differences through an arbitrary layer:
// loss = sum(out * probe) with a fixed random probe tensor.
void gradcheck_layer(Layer& layer, const Shape& in_shape, Rng& rng, double tol = 2e-5) {
    Tensor x = random_tensor(3, in_shape.c, in_shape.h, in_shape.w, rng, 0.8);
    const Shape out_shape = layer.out_shape(in_shape);
    Tensor probe = random_tensor(3, out_shape.c, out_shape.h, out_shape.w, rng, 1.0);

    auto loss = [&]() {
        Tensor y = layer.forward(x, ForwardMode::probe);
        double s = 0.0;
        for (size_t i = 0; i < y.size(); ++i) s += y.data[i] * probe.data[i];
        return s;
    };

    loss();  // populate caches
    std::vector<Param*> params;
    layer.collect_params(params);
    for (Param* p : params) p->zero_grad();
    Tensor dx = layer.backward(probe);

    // input gradient
    auto gx = numeric_grad(x.data, loss);
    for (size_t i = 0; i < gx.size(); ++i)
        CHECK(std::abs(dx.data[i] - gx[i]) <=
              tol * std::max({std::abs(gx[i]), std::abs(dx.data[i]), 1.0}));

    // parameter gradients
    for (Param* p : params) {
        auto gp = numeric_grad(p->value.data, loss);
        for (size_t i = 0; i < gp.size(); ++i)
            CHECK(std::abs(p->grad.data[i] - gp[i]) <=
                  tol * std::max({std::abs(gp[i]), std::abs(p->grad.data[i]), 1.0}));
    }
}

}  // namespace

TEST_CASE("conv flops: the 3x3 single-channel case") {
    Conv conv(1, 1, 3, 1, 1, false, nullptr);
    // 4x4 input with pad 1 keeps a 4x4 output: 2 * 9 * 1 * 1 * 16
    CHECK(conv.flops(Shape{1, 4, 4}) == 288);
}

TEST_CASE("linear flops") {
    Linear lin(10, 3, true, nullptr);
    CHECK(lin.flops(Shape{10, 1, 1}) == 60);
}

TEST_CASE("conv backward matches finite differences") {
    Rng rng(21);
    Conv conv(2, 3, 3, 1, 1, true, &rng);
    gradcheck_layer(conv, Shape{2, 5, 5}, rng);
    Conv strided(3, 2, 3, 2, 1, false, &rng);
    gradcheck_layer(strided, Shape{3, 6, 6}, rng);
}

TEST_CASE("linear backward matches finite differences") {
    Rng rng(22);
    Linear lin(12, 5, true, &rng);
    gradcheck_layer(lin, Shape{3, 2, 2}, rng);
}

TEST_CASE("batch norm backward matches finite differences") {
    Rng rng(23);
    BatchNorm bn(3);
    for (auto& v : bn.gamma.value.data) v = 0.5 + rng.uniform01();
    for (auto& v : bn.beta.value.data) v = rng.normal(0.0, 0.3);
    gradcheck_layer(bn, Shape{3, 4, 4}, rng, 1e-4);
}

TEST_CASE("activation and pool backward match finite differences") {
    Rng rng(24);
    Tanh tanh_layer;
    gradcheck_layer(tanh_layer, Shape{2, 3, 3}, rng);
    Pool avg(Pool::Mode::avg, 2, 2);
    gradcheck_layer(avg, Shape{2, 4, 4}, rng);
    Pool gap(Pool::Mode::global_avg, 0, 0);
    gradcheck_layer(gap, Shape{3, 4, 4}, rng);
}

TEST_CASE("relu backward matches finite differences away from the kink") {
    Rng rng(25);
    Relu relu;
    Tensor x = random_tensor(2, 2, 3, 3, rng, 1.0);
    for (auto& v : x.data)
        if (std::abs(v) < 0.05) v = 0.1;  // keep the difference quotient clean
    Tensor probe = random_tensor(2, 2, 3, 3, rng, 1.0);
    auto loss = [&]() {
        Tensor y = relu.forward(x, ForwardMode::probe);
        double s = 0;
        for (size_t i = 0; i < y.size(); ++i) s += y.data[i] * probe.data[i];
        return s;
    };
    loss();
    Tensor dx = relu.backward(probe);
    auto gx = numeric_grad(x.data, loss);
    for (size_t i = 0; i < gx.size(); ++i) CHECK(dx.data[i] == doctest::Approx(gx[i]).epsilon(1e-6));
}

TEST_CASE("max pool routes gradients to the argmax") {
    Pool mp(Pool::Mode::max, 2, 2);
    Tensor x(1, 1, 2, 2);
    x.at(0, 0, 0, 0) = 1.0;
    x.at(0, 0, 0, 1) = 5.0;
    x.at(0, 0, 1, 0) = -2.0;
    x.at(0, 0, 1, 1) = 0.0;
    Tensor y = mp.forward(x, ForwardMode::probe);
    CHECK(y.at(0, 0, 0, 0) == 5.0);
    Tensor dy(1, 1, 1, 1);
    dy.at(0, 0, 0, 0) = 3.0;
    Tensor dx = mp.backward(dy);
    CHECK(dx.at(0, 0, 0, 1) == 3.0);
    CHECK(dx.at(0, 0, 0, 0) == 0.0);
}

TEST_CASE("residual block backward matches finite differences") {
    Rng rng(26);
    SUBCASE("projection skip with bn") {
        ResidualBlock blk(2, 3, 2, true, true, &rng);
        gradcheck_layer(blk, Shape{2, 6, 6}, rng, 1e-4);
    }
    SUBCASE("identity skip") {
        ResidualBlock blk(3, 3, 1, false, false, &rng);
        CHECK_FALSE(blk.has_projection());
        gradcheck_layer(blk, Shape{3, 4, 4}, rng, 1e-4);
    }
}

TEST_CASE("batch norm train vs probe statistics handling") {
    Rng rng(27);
    BatchNorm bn(2);
    Tensor x = random_tensor(8, 2, 3, 3, rng);
    Tensor y_train = bn.forward(x, ForwardMode::train);
    // train-mode output is normalized per channel
    for (int c = 0; c < 2; ++c) {
        double mean = 0;
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 9; ++j) mean += y_train.sample(i)[c * 9 + j];
        mean /= 72.0;
        CHECK(std::abs(mean) < 1e-10);
    }
    // probe mode must not move the running stats
    Tensor rm_before = bn.running_mean;
    Tensor rv_before = bn.running_var;
    bn.forward(x, ForwardMode::probe);
    for (int c = 0; c < 2; ++c) {
        CHECK(bn.running_mean.data[c] == rm_before.data[c]);
        CHECK(bn.running_var.data[c] == rv_before.data[c]);
    }
}

TEST_CASE("conv prune_out keeps surviving channels bit-identical") {
    Rng rng(28);
    Conv conv(2, 4, 3, 1, 1, true, &rng);
    Tensor x = random_tensor(2, 2, 5, 5, rng);
    Tensor before = conv.forward(x, ForwardMode::infer);
    auto clone = conv.clone();
    clone->prune_part(0, {1, 3});
    Tensor after = clone->forward(x, ForwardMode::infer);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 25; ++j) {
            CHECK(after.sample(i)[0 * 25 + j] == before.sample(i)[0 * 25 + j]);
            CHECK(after.sample(i)[1 * 25 + j] == before.sample(i)[2 * 25 + j]);
        }
}

TEST_CASE("linear prune_in removes channel blocks") {
    Rng rng(29);
    Linear lin(12, 2, false, &rng);  // 3 channels x 4 spatial
    Tensor x = random_tensor(1, 3, 2, 2, rng);
    Tensor x_masked = x;
    for (int j = 0; j < 4; ++j) x_masked.data[4 + j] = 0.0;  // zero channel 1
    Tensor want = lin.forward(x_masked, ForwardMode::infer);

    lin.prune_in({1}, 4);
    CHECK(lin.in_features() == 8);
    Tensor x_small(1, 2, 2, 2);
    for (int j = 0; j < 4; ++j) {
        x_small.data[j] = x.data[j];
        x_small.data[4 + j] = x.data[8 + j];
    }
    Tensor got = lin.forward(x_small, ForwardMode::infer);
    for (int j = 0; j < 2; ++j)
        CHECK(got.at2(0, j) == doctest::Approx(want.at2(0, j)).epsilon(1e-12));
}

TEST_CASE("pruning a structure also prunes grads and momentum") {
    Rng rng(33);
    Conv conv(1, 3, 3, 1, 1, true, &rng);
    for (auto& v : conv.weight.velocity.data) v = rng.normal(0.0, 1.0);
    const double keep0 = conv.weight.velocity.data[0];
    conv.prune_part(0, {1});
    CHECK(conv.weight.value.n == 2);
    CHECK(conv.weight.velocity.n == 2);
    CHECK(conv.weight.grad.n == 2);
    CHECK(conv.weight.velocity.data[0] == keep0);
}

TEST_CASE("clone yields independent parameters") {
    Rng rng(30);
    Conv conv(1, 2, 3, 1, 1, true, &rng);
    auto copy = conv.clone();
    const double before = conv.weight.value.data[0];
    static_cast<Conv*>(copy.get())->weight.value.data[0] += 1.0;
    CHECK(conv.weight.value.data[0] == before);
}

TEST_CASE("layer json round trip preserves geometry") {
    Rng rng(31);
    for (const LayerCfg& cfg : BackboneSpec{{.kind = "conv", .out = 4, .k = 3, .stride = 2},
                                            {.kind = "batch_norm"},
                                            {.kind = "relu"},
                                            {.kind = "max_pool", .k = 2, .stride = 2},
                                            {.kind = "residual_block", .out = 5, .stride = 1,
                                             .bn = true, .proj = true}}) {
        Shape in{4, 8, 8};
        if (cfg.kind == "conv") in = Shape{2, 8, 8};
        auto layer = make_layer(cfg, in, rng);
        auto rebuilt = layer_from_json(layer->describe());
        CHECK(rebuilt->kind() == layer->kind());
        CHECK(rebuilt->out_shape(in) == layer->out_shape(in));
        CHECK(rebuilt->param_count() == layer->param_count());
    }
}

TEST_CASE("residual block structure zeroing kills its output contribution") {
    Rng rng(32);
    ResidualBlock blk(2, 3, 1, true, true, &rng);
    Tensor x = random_tensor(2, 2, 4, 4, rng);
    blk.zero_structure(ResidualBlock::kPartOutput, 1);
    Tensor y = blk.forward(x, ForwardMode::probe);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 16; ++j) CHECK(y.sample(i)[16 + j] == 0.0);
}

TEST_CASE("identity-skip blocks refuse channel surgery") {
    Rng rng(34);
    ResidualBlock blk(3, 3, 1, false, false, &rng);
    CHECK_FALSE(blk.in_prunable());
    auto parts = blk.prune_parts();
    for (const PrunePart& p : parts)
        if (p.part == ResidualBlock::kPartOutput) CHECK_FALSE(p.prunable);
    CHECK_THROWS_AS(blk.prune_part(ResidualBlock::kPartOutput, {0}), std::invalid_argument);
    CHECK_THROWS_AS(blk.prune_in({0}, 1), std::invalid_argument);
}
