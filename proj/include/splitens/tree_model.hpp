#pragma once

#include <memory>
#include <string>
#include <vector>

#include "splitens/layers.hpp"
#include "splitens/task_split.hpp"
#include "splitens/tensor.hpp"

namespace splitens {

// One branch of the tree: a sequence of layers shared by every submodel
// listed in `submodels`. The root carries all submodels; leaves carry the
// classifier heads of their submodels.
struct TreeNode {
    int id = 0;
    int parent = -1;
    std::vector<int> children;
    std::vector<int> submodels;  // sorted, never empty
    std::vector<std::unique_ptr<Layer>> layers;

    TreeNode() = default;
    TreeNode(const TreeNode&) = delete;
    TreeNode(TreeNode&&) = default;
    TreeNode& operator=(TreeNode&&) = default;
};

struct LayerRef {
    int node = 0;
    int layer = 0;
    bool operator==(const LayerRef&) const = default;
};

// Tree-structured ensemble network: a shared trunk branching into
// per-submodel paths, each ending in its own fully-connected head.
class TreeModel {
 public:
    TreeModel() = default;
    TreeModel(TreeModel&&) = default;
    TreeModel& operator=(TreeModel&&) = default;
    TreeModel(const TreeModel&) = delete;

    // Single-trunk tree over the backbone; every submodel shares all layers
    // and gets an independent head. Default head width is group size + 1
    // (the OOD slot); `head_widths` overrides it (plain N-way baselines).
    static TreeModel init_shared(const BackboneSpec& backbone, const SubtaskSpec& spec,
                                 const Shape& input, uint64_t seed,
                                 const std::vector<int>& head_widths = {});

    TreeModel clone() const;

    // One logits tensor [batch, width_i] per submodel. Shared nodes are
    // evaluated exactly once per call.
    std::vector<Tensor> forward(const Tensor& batch, ForwardMode mode);

    // Backprop from per-submodel logit grads; empty tensors contribute
    // nothing, so a single submodel's loss can be isolated. Parameter grads
    // accumulate across calls.
    void backward(const std::vector<Tensor>& dlogits);

    void zero_grad();
    std::vector<Param*> params();

    // Duplicate layers [layer_index, end) of `node_id` into two children and
    // route side_s through one copy, side_t through the other. Exact weight
    // copies keep every submodel's function unchanged. Existing child
    // subtrees must fall entirely on one side.
    void split_at(int node_id, int layer_index, const std::vector<int>& side_s,
                  const std::vector<int>& side_t);

    // Per-sample cost, each node counted once (shared evaluation).
    uint64_t flops() const;

    int num_submodels() const { return static_cast<int>(heads.size()); }
    bool all_private() const;
    int64_t param_count() const;

    Shape node_input_shape(int id) const;
    Shape node_output_shape(int id) const;

    // Depth-then-id order; the root's layers are the network's earliest.
    std::vector<int> bfs_order() const;
    int node_depth(int id) const;

    // Weighted layers in front-to-back scan order (split candidates).
    std::vector<LayerRef> weighted_layers() const;

    // How often each node ran in the last forward (shared-eval contract).
    const std::vector<int>& last_eval_counts() const { return eval_counts_; }

    json to_json() const;
    std::string to_dot() const;

    void validate() const;  // tree + channel-compatibility invariants

    Shape input_shape{};
    SubtaskSpec subtask_spec;
    uint64_t flops_budget = 0;
    std::vector<TreeNode> nodes;
    std::vector<std::unique_ptr<Linear>> heads;
    std::vector<int> head_node;  // leaf node id per submodel

 private:
    std::vector<Tensor> node_out_;   // per node, kept for backward routing
    std::vector<int> eval_counts_;
};

}  // namespace splitens
