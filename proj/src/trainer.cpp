#include "splitens/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "splitens/inference.hpp"
#include "splitens/kernels.hpp"

namespace splitens {

namespace {

void sgd_step(TreeModel& model, double lr, double momentum, double weight_decay) {
    for (Param* p : model.params()) {
        double* w = p->value.ptr();
        double* g = p->grad.ptr();
        double* v = p->velocity.ptr();
        const size_t n = p->value.size();
        for (size_t i = 0; i < n; ++i) {
            v[i] = momentum * v[i] - lr * (g[i] + weight_decay * w[i]);
            w[i] += v[i];
        }
    }
}

std::vector<int> sample_indices(int dataset_size, int want, Rng& rng) {
    std::vector<int> idx(dataset_size);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(std::min<size_t>(idx.size(), static_cast<size_t>(want)));
    return idx;
}

Tensor gather_batch(const Dataset& ds, const std::vector<int>& indices, std::vector<int>* labels) {
    Tensor x(static_cast<int>(indices.size()), ds.images.c, ds.images.h, ds.images.w);
    const int feat = ds.images.shape().features();
    for (size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(ds.images.sample(indices[i]), feat, x.sample(static_cast<int>(i)));
        if (labels) labels->push_back(ds.labels[indices[i]]);
    }
    return x;
}

// Plain CE over a single head (baseline objective).
double ce_loss_batch(const Tensor& logits, const std::vector<int>& labels, Tensor* grad) {
    const int b = logits.n;
    const int width = logits.shape().features();
    if (grad) *grad = Tensor(logits.n, logits.c, logits.h, logits.w);
    const double inv_b = 1.0 / b;
    double total = 0.0;
    std::vector<double> row(width), grow;
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < width; ++j) row[j] = logits.at2(i, j);
        total += softmax_cross_entropy(row, labels[i], grad ? &grow : nullptr) * inv_b;
        if (grad)
            for (int j = 0; j < width; ++j) grad->at2(i, j) = grow[j] * inv_b;
    }
    return total;
}

}  // namespace

double cosine_warmup_lr(const TrainConfig& cfg, int epoch_index) {
    if (cfg.warmup_epochs > 0 && epoch_index < cfg.warmup_epochs)
        return cfg.lr * static_cast<double>(epoch_index + 1) / cfg.warmup_epochs;
    const int span = std::max(1, cfg.epochs - cfg.warmup_epochs);
    const double t = static_cast<double>(epoch_index - cfg.warmup_epochs) / span;
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

json TrainHistory::to_json() const {
    json j;
    j["epochs"] = json::array();
    for (const EpochStats& e : epochs)
        j["epochs"].push_back(json{{"epoch", e.epoch},
                                   {"loss", e.loss},
                                   {"ce", e.ce},
                                   {"lr", e.lr},
                                   {"flops", e.flops},
                                   {"val_accuracy", e.val_accuracy}});
    j["splits"] = json::array();
    for (const SplitEvent& e : splits)
        j["splits"].push_back(json{{"epoch", e.epoch},
                                   {"node", e.node},
                                   {"layer", e.layer_index},
                                   {"side_s", e.side_s},
                                   {"side_t", e.side_t},
                                   {"mct", e.mct_value},
                                   {"flops_before", e.flops_before},
                                   {"flops_after", e.flops_after}});
    j["prunes"] = json::array();
    for (const PruneEvent& e : prunes)
        j["prunes"].push_back(json{{"epoch", e.epoch},
                                   {"removed", e.removed},
                                   {"flops_before", e.flops_before},
                                   {"flops_after", e.flops_after}});
    return j;
}

TrainHistory TrainHistory::from_json(const json& j) {
    TrainHistory h;
    for (const auto& e : j.value("epochs", json::array()))
        h.epochs.push_back(EpochStats{e.at("epoch").get<int>(), e.at("loss").get<double>(),
                                      e.at("ce").get<double>(), e.at("lr").get<double>(),
                                      e.at("flops").get<uint64_t>(),
                                      e.value("val_accuracy", -1.0)});
    for (const auto& e : j.value("splits", json::array())) {
        SplitEvent s;
        s.epoch = e.at("epoch").get<int>();
        s.node = e.at("node").get<int>();
        s.layer_index = e.at("layer").get<int>();
        s.side_s = e.at("side_s").get<std::vector<int>>();
        s.side_t = e.at("side_t").get<std::vector<int>>();
        s.mct_value = e.at("mct").get<double>();
        s.flops_before = e.at("flops_before").get<uint64_t>();
        s.flops_after = e.at("flops_after").get<uint64_t>();
        h.splits.push_back(std::move(s));
    }
    for (const auto& e : j.value("prunes", json::array()))
        h.prunes.push_back(PruneEvent{e.at("epoch").get<int>(), e.at("removed").get<int>(),
                                      e.at("flops_before").get<uint64_t>(),
                                      e.at("flops_after").get<uint64_t>()});
    return h;
}

double evaluate_accuracy(TreeModel& model, const Dataset& ds, LossMode loss_mode) {
    if (ds.size() == 0) return 0.0;
    int correct = 0;
    const int batch = 256;
    for (int start = 0; start < ds.size(); start += batch) {
        std::vector<int> idx;
        for (int i = start; i < std::min(ds.size(), start + batch); ++i) idx.push_back(i);
        std::vector<int> labels;
        Tensor x = gather_batch(ds, idx, &labels);
        auto logits = model.forward(x, ForwardMode::infer);
        if (loss_mode == LossMode::cross_entropy) {
            for (int i = 0; i < x.n; ++i) {
                int arg = 0;
                for (int j = 1; j < logits[0].shape().features(); ++j)
                    if (logits[0].at2(i, j) > logits[0].at2(i, arg)) arg = j;
                correct += arg == labels[i] ? 1 : 0;
            }
        } else {
            auto outs = predict_batch(model.subtask_spec, logits);
            for (int i = 0; i < x.n; ++i)
                correct += outs[i].predicted_class == labels[i] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / ds.size();
}

TrainHistory train(TreeModel& model, const Dataset& train_set, const TrainConfig& cfg,
                   LossMode loss_mode, const EventSink& sink, const Dataset* val_set,
                   TrainState* state) {
    if (cfg.prune_interval < 1) throw std::invalid_argument("train: prune_interval must be >= 1");
    if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
    if (cfg.flops_budget > 0) model.flops_budget = cfg.flops_budget;
    if (model.flops_budget == 0) throw std::invalid_argument("train: flops budget is zero");

    const SubtaskSpec& spec = model.subtask_spec;
    const int m = model.num_submodels();

    std::vector<ClassBalancedWeights> cb_weights;
    if (loss_mode == LossMode::split_ensemble)
        for (int i = 0; i < m; ++i)
            cb_weights.push_back(normalize_mean_one(class_balanced_weights(spec, i, cfg.beta)));

    TrainState local;
    TrainState& st = state ? *state : local;
    if (st.next_epoch == 0) st.rng = Rng(mix_seed(cfg.seed, 0x7a71));
    TrainHistory& history = st.history;

    for (int epoch = st.next_epoch; epoch < cfg.epochs; ++epoch) {
        const int ep = epoch + 1;  // 1-based, drives the interval checks
        const double lr = cosine_warmup_lr(cfg, epoch);

        std::vector<int> order(train_set.size());
        std::iota(order.begin(), order.end(), 0);
        {
            Rng shuffle_rng(mix_seed(cfg.seed, 0x0e, static_cast<uint64_t>(epoch)));
            shuffle_rng.shuffle(order);
        }

        double epoch_loss = 0.0, epoch_ce = 0.0;
        int batches = 0;
        for (int start = 0; start < train_set.size(); start += cfg.batch_size, ++batches) {
            std::vector<int> idx(order.begin() + start,
                                 order.begin() + std::min<size_t>(order.size(),
                                                                  start + cfg.batch_size));
            std::vector<int> labels;
            Tensor x = gather_batch(train_set, idx, &labels);
            auto logits = model.forward(x, ForwardMode::train);
            model.zero_grad();

            double loss = 0.0, ce = 0.0;
            std::vector<Tensor> grads;
            if (loss_mode == LossMode::split_ensemble) {
                std::vector<std::vector<TargetVector>> targets(m);
                for (int i = 0; i < m; ++i) {
                    targets[i].reserve(labels.size());
                    for (int y : labels)
                        targets[i].push_back(convert_label(spec, i, y, cfg.ood_target_mode));
                }
                loss = ensemble_loss_batch(spec, logits, targets, cb_weights, labels, cfg.lambda,
                                           &grads, &ce);
            } else {
                grads.resize(1);
                loss = ce = ce_loss_batch(logits[0], labels, &grads[0]);
            }
            if (!std::isfinite(loss))
                throw std::runtime_error("train: loss diverged (non-finite) at epoch " +
                                         std::to_string(ep) + ", batch " +
                                         std::to_string(batches));
            model.backward(grads);
            sgd_step(model, lr, cfg.momentum, cfg.weight_decay);
            epoch_loss += loss;
            epoch_ce += ce;
        }
        epoch_loss /= std::max(1, batches);
        epoch_ce /= std::max(1, batches);

        // ---- iterative splitting and pruning ----
        const bool interval_hit = ep > cfg.warmup_epochs && ep % cfg.prune_interval == 0;
        if (interval_hit && loss_mode == LossMode::split_ensemble) {
            if (!model.all_private()) {
                std::vector<SubtaskBatch> batches_per_sub;
                for (int i = 0; i < m; ++i) {
                    Rng srng(mix_seed(cfg.seed, 0x5e45, static_cast<uint64_t>(epoch) * 131 + i));
                    auto idx = sample_indices(train_set.size(), cfg.sensitivity_batch, srng);
                    SubtaskBatch b;
                    b.x = gather_batch(train_set, idx, &b.labels);
                    batches_per_sub.push_back(std::move(b));
                }
                MaskTable masks = compute_mask_table(model, batches_per_sub, cb_weights,
                                                     cfg.ood_target_mode, cfg.k_fraction);
                if (sink && cfg.dump_sensitivity)
                    sink(json{{"type", "sensitivity"},
                              {"epoch", ep},
                              {"report", sensitivity_report(model, masks)}});
                if (auto decision = find_split(model, masks, cfg.mct_threshold)) {
                    SplitEvent ev;
                    ev.epoch = ep;
                    ev.node = decision->node;
                    ev.layer_index = decision->layer_index;
                    ev.side_s = decision->side_s;
                    ev.side_t = decision->side_t;
                    ev.mct_value = decision->mct_value;
                    ev.flops_before = model.flops();
                    model.split_at(decision->node, decision->layer_index, decision->side_s,
                                   decision->side_t);
                    ev.flops_after = model.flops();
                    history.splits.push_back(ev);
                    if (sink)
                        sink(json{{"type", "split"},
                                  {"epoch", ep},
                                  {"node", ev.node},
                                  {"layer", ev.layer_index},
                                  {"side_s", ev.side_s},
                                  {"side_t", ev.side_t},
                                  {"mct", ev.mct_value},
                                  {"flops_before", ev.flops_before},
                                  {"flops_after", ev.flops_after}});
                }
            }
            if (model.flops() > model.flops_budget) {
                std::vector<std::vector<ImportanceScore>> scores;
                for (int i = 0; i < m; ++i) {
                    Rng prng(mix_seed(cfg.seed, 0x9c4e, static_cast<uint64_t>(epoch) * 131 + i));
                    auto idx = sample_indices(train_set.size(), cfg.sensitivity_batch, prng);
                    SubtaskBatch b;
                    b.x = gather_batch(train_set, idx, &b.labels);
                    scores.push_back(
                        structural_importance(model, i, b, cb_weights[i], cfg.ood_target_mode));
                }
                const int total = total_prunable(model);
                const int n_remove = std::max(
                    1, static_cast<int>(std::lround(cfg.n_remove_fraction * total)));
                PrunePlan plan = plan_prune(scores, model, n_remove);
                if (!plan.empty()) {
                    apply_prune(model, plan);
                    PruneEvent ev;
                    ev.epoch = ep;
                    ev.removed = static_cast<int>(plan.removals.size());
                    ev.flops_before = plan.flops_before;
                    ev.flops_after = plan.flops_after;
                    history.prunes.push_back(ev);
                    if (sink) {
                        json structures = json::array();
                        for (const StructureId& s : plan.removals)
                            structures.push_back({s.node, s.layer, s.part, s.index});
                        sink(json{{"type", "prune"},
                                  {"epoch", ep},
                                  {"removed", ev.removed},
                                  {"flops_before", ev.flops_before},
                                  {"flops_after", ev.flops_after},
                                  {"structures", structures}});
                    }
                } else if (sink) {
                    sink(json{{"type", "prune_noop"}, {"epoch", ep}, {"flops", model.flops()}});
                }
            }
        }

        EpochStats stats;
        stats.epoch = ep;
        stats.loss = epoch_loss;
        stats.ce = epoch_ce;
        stats.lr = lr;
        stats.flops = model.flops();
        if (val_set) stats.val_accuracy = evaluate_accuracy(model, *val_set, loss_mode);
        history.epochs.push_back(stats);
        if (sink) {
            json line{{"type", "epoch"}, {"epoch", ep},         {"loss", epoch_loss},
                      {"ce", epoch_ce},  {"lr", lr},            {"flops", stats.flops}};
            if (val_set) line["val_accuracy"] = stats.val_accuracy;
            sink(line);
        }
        st.next_epoch = epoch + 1;
    }
    return history;
}

}  // namespace splitens
