#pragma once

#include <map>
#include <optional>
#include <utility>
#include <vector>

#include "splitens/task_split.hpp"
#include "splitens/tree_model.hpp"

namespace splitens {

// Top-K most sensitive weight elements of one layer for one submodel's
// subtask loss. `selected` holds flat indices into the layer's weight
// matrix, sorted ascending.
struct SensitivityMask {
    LayerRef layer{};
    int submodel = 0;
    double k_fraction = 0.0;
    std::vector<int> selected;
};

// Weighted complete graph over the submodels sharing a layer; edge weights
// are pairwise mask IoU scores in [0, 1].
struct CorrelationGraph {
    std::vector<int> vertices;               // submodel ids, sorted
    std::vector<std::vector<double>> weight;  // symmetric, indexed by position

    int size() const { return static_cast<int>(vertices.size()); }
    double edge(int u, int v) const { return weight[u][v]; }
};

struct SubtaskBatch {
    Tensor x;
    std::vector<int> labels;
};

// Single gradient pass for one submodel: zero grads, forward in probe mode
// (batch statistics, no running-stat update), backward only that submodel's
// class-balanced loss. Returns the loss value; gradients stay in the model.
double submodel_loss_backward(TreeModel& model, int submodel, const SubtaskBatch& batch,
                              const ClassBalancedWeights& weights, OodTargetMode mode);

// Per-element saliency |w * dL/dw| of a layer's weight matrix, normalized to
// sum 1 (1e-12 regularizer keeps zero-gradient layers defined). Reads the
// gradients currently stored in the layer.
std::vector<double> sensitivity_from_grads(const Layer& layer);

// One-shot sensitivity of `layer` to `submodel`'s subtask loss on one batch;
// no weights are updated.
std::vector<double> snip_sensitivity(TreeModel& model, const LayerRef& layer, int submodel,
                                     const SubtaskBatch& batch,
                                     const ClassBalancedWeights& weights, OodTargetMode mode);

// Indices of the ceil(k * len) largest sensitivities; ties resolved toward
// the lower index.
SensitivityMask topk_mask(const std::vector<double>& sensitivities, double k_fraction);

double iou(const SensitivityMask& a, const SensitivityMask& b);

// Minimal cutting threshold: min over bipartitions (S,T) of the maximum
// crossing edge weight. Computed as the minimum edge weight on the maximum
// spanning tree.
double mct(const CorrelationGraph& graph);

// Exhaustive bipartition minimax, |V| <= 20. The oracle mct() must match.
double mct_bruteforce(const CorrelationGraph& graph);

// A bipartition (as submodel ids) achieving mct(graph); deterministic
// tie-break: lexicographically smallest side containing the first vertex.
std::pair<std::vector<int>, std::vector<int>> mct_partition(const CorrelationGraph& graph);

// submodel -> mask, per weighted layer.
using LayerMasks = std::map<int, SensitivityMask>;

struct MaskTable {
    // (node id, layer index) -> masks of the submodels sharing that layer
    std::map<std::pair<int, int>, LayerMasks> layers;
};

// Masks for every weighted layer still shared by two or more submodels.
// One forward/backward per submodel on its own batch.
MaskTable compute_mask_table(TreeModel& model, const std::vector<SubtaskBatch>& batches,
                             const std::vector<ClassBalancedWeights>& weights,
                             OodTargetMode mode, double k_fraction);

struct SplitDecision {
    int node = 0;
    int layer_index = 0;
    std::vector<int> side_s, side_t;  // submodel ids
    double mct_value = 0.0;
};

// Scans shared branches front to back (root layers first) and returns the
// earliest weighted layer whose correlation graph has MCT < threshold,
// together with the cut. Bipartitions at inner nodes are restricted so
// existing child subtrees stay whole. Absent result means no layer
// qualifies or every submodel already has a private branch.
std::optional<SplitDecision> find_split(const TreeModel& model, const MaskTable& masks,
                                        double threshold);

// Diagnostics: per-layer IoU matrices and MCT profile.
json sensitivity_report(const TreeModel& model, const MaskTable& masks);

}  // namespace splitens
