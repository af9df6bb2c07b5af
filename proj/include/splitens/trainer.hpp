#pragma once

#include <functional>
#include <optional>

#include "splitens/data.hpp"
#include "splitens/pruning.hpp"
#include "splitens/sensitivity.hpp"
#include "splitens/tree_model.hpp"

namespace splitens {

struct TrainConfig {
    int epochs = 200;
    int warmup_epochs = 10;  // linear LR ramp; architecture is frozen during warmup
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int batch_size = 256;
    double lambda = 1e-4;       // CE calibration term
    double beta = 0.9999;       // class-balance reweighting
    double mct_threshold = 0.4;
    double k_fraction = 0.2;    // Top-K sensitivity mask retention
    int prune_interval = 5;     // epochs between split/prune checks
    double n_remove_fraction = 0.02;  // of current prunable structures, per prune step
    uint64_t flops_budget = 0;        // 0: the initial (backbone) FLOPs
    uint64_t seed = 0;
    OodTargetMode ood_target_mode = OodTargetMode::ood_aware;
    int sensitivity_batch = 256;
    bool dump_sensitivity = false;

    bool operator==(const TrainConfig&) const = default;
};

enum class LossMode {
    split_ensemble,  // joint CB-BCE + lambda * CE objective
    cross_entropy,   // plain N-way CE (baselines)
};

struct SplitEvent {
    int epoch = 0;  // 1-based
    int node = 0;
    int layer_index = 0;
    std::vector<int> side_s, side_t;
    double mct_value = 0.0;
    uint64_t flops_before = 0, flops_after = 0;
    bool operator==(const SplitEvent&) const = default;
};

struct PruneEvent {
    int epoch = 0;
    int removed = 0;
    uint64_t flops_before = 0, flops_after = 0;
    bool operator==(const PruneEvent&) const = default;
};

struct EpochStats {
    int epoch = 0;
    double loss = 0.0;
    double ce = 0.0;
    double lr = 0.0;
    uint64_t flops = 0;
    double val_accuracy = -1.0;  // -1 when no validation set was given
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    std::vector<SplitEvent> splits;
    std::vector<PruneEvent> prunes;

    json to_json() const;
    static TrainHistory from_json(const json& j);
};

// Resumable trainer state (checkpointed alongside the model).
struct TrainState {
    int next_epoch = 0;  // 0-based index of the next epoch to run
    Rng rng;
    TrainHistory history;
};

// JSONL event stream consumer; receives one json object per line.
using EventSink = std::function<void(const json&)>;

double cosine_warmup_lr(const TrainConfig& cfg, int epoch_index);

// Joint SGD training with interleaved splitting and pruning. Every
// prune_interval epochs (after warmup) at most one split is applied, then
// one prune step when FLOPs exceed the budget. Splitting stops once every
// submodel owns a private branch; the architecture is fixed from the point
// both conditions settle. Throws on divergence (non-finite loss).
TrainHistory train(TreeModel& model, const Dataset& train_set, const TrainConfig& cfg,
                   LossMode loss_mode, const EventSink& sink = nullptr,
                   const Dataset* val_set = nullptr, TrainState* state = nullptr);

// Accuracy of the model on a labeled set (argmax of concatenated ID logits,
// or plain argmax in cross-entropy mode).
double evaluate_accuracy(TreeModel& model, const Dataset& ds, LossMode loss_mode);

}  // namespace splitens
