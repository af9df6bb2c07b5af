#pragma once

#include <vector>

#include "splitens/sensitivity.hpp"
#include "splitens/tree_model.hpp"

namespace splitens {

// Identifies one prunable structure (conv filter / linear neuron / residual
// group) in the tree.
struct StructureId {
    int node = 0;
    int layer = 0;
    int part = 0;
    int index = 0;
    auto operator<=>(const StructureId&) const = default;
};

struct ImportanceScore {
    StructureId structure;
    int submodel = 0;
    double score = 0.0;  // squared weight-gradient inner product, >= 0
};

struct PrunePlan {
    std::vector<StructureId> removals;  // sorted
    uint64_t flops_before = 0;
    uint64_t flops_after = 0;

    bool empty() const { return removals.empty(); }
};

// Structures that may be removed at all: classifier heads never qualify, and
// neither do structures whose removal would unbalance an identity-skip
// residual add downstream.
std::vector<StructureId> prunable_structures(const TreeModel& model);

// Total prunable structure count (basis for the per-step removal budget).
int total_prunable(const TreeModel& model);

// Squared inner product of structure weights and the submodel's loss
// gradient, one score per prunable structure on the submodel's path. Scores
// are comparable across layers; no per-layer normalization.
std::vector<ImportanceScore> structural_importance(TreeModel& model, int submodel,
                                                   const SubtaskBatch& batch,
                                                   const ClassBalancedWeights& weights,
                                                   OodTargetMode mode);

// Importance from gradients already present in the model (one submodel's
// loss backward must have run).
std::vector<ImportanceScore> importance_from_grads(const TreeModel& model, int submodel);

// Per submodel, rank ascending and keep the bottom-n_remove candidate set; a
// structure is planned only when every submodel sharing its layer agrees.
// Each layer part keeps at least one survivor. Deterministic: ties break on
// (node, layer, part, index).
PrunePlan plan_prune(const std::vector<std::vector<ImportanceScore>>& scores,
                     const TreeModel& model, int n_remove);

// Executes the plan: removes structures and reindexes downstream consumers
// (in-channel slices across node boundaries, heads included).
void apply_prune(TreeModel& model, const PrunePlan& plan);

}  // namespace splitens
