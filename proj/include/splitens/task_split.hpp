#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "splitens/tensor.hpp"

namespace splitens {

// Complementary decomposition of an N-class task: each class belongs to
// exactly one group, subtask i classifies among its K_i classes plus a
// trailing reject slot at index K_i for everything outside the group.
struct SubtaskSpec {
    int total_classes = 0;                 // N
    std::vector<std::vector<int>> groups;  // group i holds K_i original class ids
    int per_class_count = 1;               // n, training samples per original class

    int num_subtasks() const { return static_cast<int>(groups.size()); }
    int group_size(int i) const { return static_cast<int>(groups[i].size()); }
    // Output slots of subtask i (K_i ID slots + 1 OOD slot).
    int head_width(int i) const { return group_size(i) + 1; }

    // (subtask, position within group) of an original class id.
    std::pair<int, int> locate(int original_label) const;

    // Throws std::invalid_argument when groups are not a partition of
    // {0..N-1} or per_class_count < 1.
    void validate() const;

    bool operator==(const SubtaskSpec&) const = default;
};

// Eq-style per-slot loss weights correcting the (N-K)x data excess of the
// OOD slot relative to each ID class.
struct ClassBalancedWeights {
    double beta = 0.0;
    std::vector<double> weights;  // length K_i + 1
};

struct TargetVector {
    std::vector<double> values;  // length K_i + 1, entries sum to 1
};

enum class OodTargetMode {
    ood_aware,  // soft target: 1/N per ID slot, (N-K)/N on the OOD slot
    one_hot,    // plain one-hot on the OOD slot (ablation mode)
};

// Convert an original label into subtask i's target. ID members of the group
// get a one-hot at their within-group position; everything else gets the OOD
// target selected by `mode`.
TargetVector convert_label(const SubtaskSpec& spec, int subtask_index, int original_label,
                           OodTargetMode mode = OodTargetMode::ood_aware);

// Weights (1-beta)/(1-beta^n) for ID slots and (1-beta)/(1-beta^{(N-K)n}) for
// the OOD slot, evaluated via expm1/log so large exponents stay accurate.
ClassBalancedWeights class_balanced_weights(const SubtaskSpec& spec, int subtask_index,
                                            double beta);

// Same weights rescaled to mean 1 over the K+1 slots. Relative weighting is
// untouched; the rescale keeps gradient magnitudes in a plain-BCE range at
// large beta (the convention of the class-balance method the weights come
// from). This is what the trainer feeds into the loss.
ClassBalancedWeights normalize_mean_one(ClassBalancedWeights w);

// Weighted sigmoid BCE over one logit vector. Probabilities are clamped to
// [eps, 1-eps], eps = 1e-7, so the loss is finite for any finite logits.
double cb_bce_loss(const std::vector<double>& logits, const TargetVector& target,
                   const ClassBalancedWeights& weights);

// Batched form, mean over samples. If grad != nullptr it receives
// d(mean loss)/d(logits), same dims as `logits`.
double cb_bce_loss(const Tensor& logits, const std::vector<TargetVector>& targets,
                   const ClassBalancedWeights& weights, Tensor* grad = nullptr);

// Softmax cross entropy over the N concatenated ID logits (OOD slots are not
// part of the concatenation).
double softmax_cross_entropy(const std::vector<double>& logits, int label,
                             std::vector<double>* grad = nullptr);

// Joint training objective: sum of per-submodel CB-BCE terms plus
// lambda * CE(concatenated ID logits, original label). Single-sample form.
double ensemble_loss(const SubtaskSpec& spec,
                     const std::vector<std::vector<double>>& submodel_logits,
                     const std::vector<TargetVector>& converted_targets,
                     const std::vector<ClassBalancedWeights>& weights, int original_label,
                     double lambda);

// Concatenate ID slots in group order; width = N. Row-batched.
Tensor concat_id_logits(const SubtaskSpec& spec, const std::vector<Tensor>& submodel_logits);

// Batched joint objective with gradients, mean over the batch. Returns total
// loss; fills per-submodel logit gradients and reports the CE component.
double ensemble_loss_batch(const SubtaskSpec& spec, const std::vector<Tensor>& submodel_logits,
                           const std::vector<std::vector<TargetVector>>& targets,
                           const std::vector<ClassBalancedWeights>& weights,
                           const std::vector<int>& labels, double lambda,
                           std::vector<Tensor>* grads, double* ce_component = nullptr);

enum class GroupingStrategy { semantic, random, explicit_groups };

struct GroupingOptions {
    GroupingStrategy strategy = GroupingStrategy::random;
    int n_splits = 2;
    uint64_t seed = 0;
    // strategy == explicit_groups: taken verbatim.
    std::vector<std::vector<int>> explicit_list;
    // strategy == semantic: class id -> supergroup name; whole supergroups are
    // never divided across subtasks.
    std::map<int, std::string> semantic_table;
};

SubtaskSpec group_classes(int total_classes, const GroupingOptions& opts, int per_class_count);

}  // namespace splitens
