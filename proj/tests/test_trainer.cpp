#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "splitens/checkpoint.hpp"
#include "splitens/trainer.hpp"
#include "test_util.hpp"

using namespace splitens;
using namespace splitens::testutil;

namespace {

BlobsCfg micro_blobs() {
    BlobsCfg cfg;
    cfg.classes = 4;
    cfg.per_class = 24;
    cfg.height = cfg.width = 10;
    cfg.noise = 0.15;
    cfg.seed = 3;
    return cfg;
}

BackboneSpec micro_backbone() {
    return {{.kind = "conv", .out = 4, .k = 3, .stride = 2, .pad = 1},
            {.kind = "relu"},
            {.kind = "conv", .out = 6, .k = 3, .stride = 2, .pad = 1},
            {.kind = "relu"},
            {.kind = "conv", .out = 8, .k = 3, .stride = 1, .pad = 1},
            {.kind = "relu"}};
}

SubtaskSpec micro_spec(const Dataset& train) {
    GroupingOptions opts;
    opts.strategy = GroupingStrategy::explicit_groups;
    opts.explicit_list = {{0, 1}, {2, 3}};
    return group_classes(train.classes, opts, train.mean_per_class_count());
}

TrainConfig micro_cfg() {
    TrainConfig cfg;
    cfg.epochs = 8;
    cfg.warmup_epochs = 2;
    cfg.lr = 0.05;
    cfg.batch_size = 32;
    cfg.prune_interval = 2;
    cfg.mct_threshold = 0.4;
    cfg.k_fraction = 0.25;
    cfg.n_remove_fraction = 0.15;
    cfg.sensitivity_batch = 48;
    cfg.seed = 12;
    return cfg;
}

}  // namespace

TEST_CASE("cosine schedule: warmup then anneal to zero") {
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.warmup_epochs = 4;
    cfg.lr = 0.8;
    CHECK(cosine_warmup_lr(cfg, 0) == doctest::Approx(0.2));
    CHECK(cosine_warmup_lr(cfg, 3) == doctest::Approx(0.8));
    CHECK(cosine_warmup_lr(cfg, 4) == doctest::Approx(0.8));
    CHECK(cosine_warmup_lr(cfg, 12) == doctest::Approx(0.4));
    CHECK(cosine_warmup_lr(cfg, 19) < 0.02);
    for (int e = 5; e < 20; ++e) CHECK(cosine_warmup_lr(cfg, e) < cosine_warmup_lr(cfg, e - 1));
}

TEST_CASE("events land only on interval epochs after warmup") {
    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    auto model = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    auto history = train(model, train_set, cfg, LossMode::split_ensemble);
    for (const SplitEvent& e : history.splits) {
        CHECK(e.epoch % cfg.prune_interval == 0);
        CHECK(e.epoch > cfg.warmup_epochs);
        CHECK(e.flops_after > e.flops_before);
    }
    for (const PruneEvent& e : history.prunes) {
        CHECK(e.epoch % cfg.prune_interval == 0);
        CHECK(e.epoch > cfg.warmup_epochs);
        CHECK(e.flops_after < e.flops_before);
    }
    CHECK(history.epochs.size() == 8);
    for (const EpochStats& e : history.epochs) CHECK(std::isfinite(e.loss));
}

TEST_CASE("threshold zero never splits; met budget never prunes") {
    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    cfg.mct_threshold = 0.0;
    auto model = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    auto history = train(model, train_set, cfg, LossMode::split_ensemble);
    CHECK(history.splits.empty());
    CHECK(history.prunes.empty());  // no split means FLOPs never exceed the budget
    CHECK(model.nodes.size() == 1);
}

TEST_CASE("fixed seeds reproduce the event log exactly") {
    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    auto run = [&]() {
        auto model = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
        return train(model, train_set, cfg, LossMode::split_ensemble).to_json().dump();
    };
    CHECK(run() == run());
}

TEST_CASE("flops trajectory: down across prunes, up only at splits") {
    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    cfg.epochs = 10;
    auto model = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    const uint64_t budget = model.flops_budget;
    auto history = train(model, train_set, cfg, LossMode::split_ensemble);
    // reconstruct the trajectory from events
    uint64_t current = budget;
    size_t si = 0, pi = 0;
    for (int ep = 1; ep <= cfg.epochs; ++ep) {
        if (si < history.splits.size() && history.splits[si].epoch == ep) {
            CHECK(history.splits[si].flops_before == current);
            current = history.splits[si].flops_after;
            ++si;
        }
        if (pi < history.prunes.size() && history.prunes[pi].epoch == ep) {
            CHECK(history.prunes[pi].flops_before == current);
            current = history.prunes[pi].flops_after;
            ++pi;
        }
    }
    CHECK(current == model.flops());
}

TEST_CASE("divergent training aborts with a diagnostic") {
    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    cfg.lr = 1e14;
    cfg.warmup_epochs = 0;
    auto model = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    CHECK_THROWS_AS(train(model, train_set, cfg, LossMode::split_ensemble),
                    std::runtime_error);
}

TEST_CASE("cross-entropy mode trains a plain single-head classifier") {
    auto train_set = gen_blobs(micro_blobs());
    SubtaskSpec one;
    one.total_classes = 4;
    one.groups = {{0, 1, 2, 3}};
    one.per_class_count = train_set.mean_per_class_count();
    auto cfg = micro_cfg();
    auto model =
        TreeModel::init_shared(micro_backbone(), one, train_set.shape(), cfg.seed, {4});
    auto history = train(model, train_set, cfg, LossMode::cross_entropy);
    CHECK(history.splits.empty());
    CHECK(history.prunes.empty());
    CHECK(history.epochs.back().loss < history.epochs.front().loss);
    CHECK(evaluate_accuracy(model, train_set, LossMode::cross_entropy) > 0.5);
}

TEST_CASE("checkpoint round trip preserves behavior, topology, and resume state") {
    namespace fs = std::filesystem;
    const std::string path =
        (fs::temp_directory_path() / "splitens_ckpt_test.bin").string();

    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    cfg.epochs = 6;
    auto model = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    TrainState state;
    train(model, train_set, cfg, LossMode::split_ensemble, nullptr, nullptr, &state);

    save_checkpoint(path, model, state.history, json{{"tag", "test"}}, cfg.epochs,
                    state.rng.serialize());
    Checkpoint back = load_checkpoint(path);

    CHECK(back.epochs_done == 6);
    CHECK(back.config["tag"] == "test");
    CHECK(back.model.nodes.size() == model.nodes.size());
    CHECK(back.model.to_json().dump() == model.to_json().dump());
    CHECK(back.history.to_json().dump() == state.history.to_json().dump());

    Rng data_rng(4);
    Tensor x = random_tensor(5, 1, 10, 10, data_rng, 0.4);
    auto want = model.forward(x, ForwardMode::infer);
    auto got = back.model.forward(x, ForwardMode::infer);
    for (size_t i = 0; i < want.size(); ++i) CHECK(max_rel_diff(want[i], got[i]) <= 1e-6);

    fs::remove(path);
}

TEST_CASE("resumed training equals uninterrupted training") {
    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    cfg.epochs = 6;

    auto straight = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    auto full_history = train(straight, train_set, cfg, LossMode::split_ensemble);

    auto paused = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    TrainState state;
    TrainConfig first_half = cfg;
    first_half.epochs = 3;
    train(paused, train_set, first_half, LossMode::split_ensemble, nullptr, nullptr, &state);
    train(paused, train_set, cfg, LossMode::split_ensemble, nullptr, nullptr, &state);

    CHECK(state.history.to_json().dump() == full_history.to_json().dump());
    Rng data_rng(5);
    Tensor x = random_tensor(4, 1, 10, 10, data_rng, 0.4);
    auto a = straight.forward(x, ForwardMode::infer);
    auto b = paused.forward(x, ForwardMode::infer);
    for (size_t i = 0; i < a.size(); ++i) CHECK(max_rel_diff(a[i], b[i]) <= 1e-9);
}

TEST_CASE("corrupt checkpoints are rejected with the path in the message") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "splitens_bad_ckpt.bin").string();
    {
        std::ofstream f(path, std::ios::binary);
        f << "definitely not a checkpoint";
    }
    try {
        load_checkpoint(path);
        FAIL("expected a throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find(path) != std::string::npos);
    }
    fs::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
}

TEST_CASE("restoring against a different subtask spec is rejected") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "splitens_spec_guard.bin").string();
    auto train_set = gen_blobs(micro_blobs());
    auto spec = micro_spec(train_set);
    auto cfg = micro_cfg();
    cfg.epochs = 1;
    auto model = TreeModel::init_shared(micro_backbone(), spec, train_set.shape(), cfg.seed);
    TrainState state;
    train(model, train_set, cfg, LossMode::split_ensemble, nullptr, nullptr, &state);
    save_checkpoint(path, model, state.history, json::object(), 1, state.rng.serialize());
    Checkpoint back = load_checkpoint(path);
    CHECK_NOTHROW(ensure_spec_matches(back, spec));
    SubtaskSpec other = spec;
    other.groups = {{0, 2}, {1, 3}};
    CHECK_THROWS_AS(ensure_spec_matches(back, other), std::invalid_argument);
    fs::remove(path);
}

TEST_CASE("subtask spec json round trip and mismatch detection") {
    auto spec = micro_spec(gen_blobs(micro_blobs()));
    auto j = subtask_spec_to_json(spec);
    auto back = subtask_spec_from_json(j);
    CHECK(back == spec);
    j["groups"] = {{0}, {1, 2, 3}};
    CHECK_FALSE(subtask_spec_from_json(j) == spec);
}
