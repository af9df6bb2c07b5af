#include "splitens/pruning.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>

namespace splitens {

namespace {

void check_arg(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// Would removing output channels of (node, layer) run into a consumer that
// cannot drop input channels (identity-skip residual add)? Walks past
// channel-transparent layers, across node boundaries, into child branches.
bool downstream_accepts_channel_removal(const TreeModel& model, int node_id, int layer_index) {
    const TreeNode& node = model.nodes[node_id];
    for (int li = layer_index + 1; li < static_cast<int>(node.layers.size()); ++li) {
        const Layer& l = *node.layers[li];
        if (l.channel_transparent()) continue;
        return l.in_prunable();
    }
    for (int child : node.children)
        if (!downstream_accepts_channel_removal(model, child, -1)) return false;
    // heads always accept in-feature removal
    return true;
}

}  // namespace

std::vector<StructureId> prunable_structures(const TreeModel& model) {
    std::vector<StructureId> out;
    for (int node_id : model.bfs_order()) {
        const TreeNode& node = model.nodes[node_id];
        for (int li = 0; li < static_cast<int>(node.layers.size()); ++li) {
            for (const PrunePart& part : node.layers[li]->prune_parts()) {
                if (!part.prunable) continue;
                if (part.changes_output &&
                    !downstream_accepts_channel_removal(model, node_id, li))
                    continue;
                for (int idx = 0; idx < part.count; ++idx)
                    out.push_back(StructureId{node_id, li, part.part, idx});
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

int total_prunable(const TreeModel& model) {
    return static_cast<int>(prunable_structures(model).size());
}

std::vector<ImportanceScore> importance_from_grads(const TreeModel& model, int submodel) {
    std::vector<ImportanceScore> scores;
    for (const StructureId& s : prunable_structures(model)) {
        const auto& subs = model.nodes[s.node].submodels;
        if (std::find(subs.begin(), subs.end(), submodel) == subs.end()) continue;
        double inner = 0.0;
        model.nodes[s.node].layers[s.layer]->for_each_structure_param(
            s.part, s.index, [&](double w, double g) { inner += w * g; });
        scores.push_back(ImportanceScore{s, submodel, inner * inner});
    }
    return scores;
}

std::vector<ImportanceScore> structural_importance(TreeModel& model, int submodel,
                                                   const SubtaskBatch& batch,
                                                   const ClassBalancedWeights& weights,
                                                   OodTargetMode mode) {
    submodel_loss_backward(model, submodel, batch, weights, mode);
    return importance_from_grads(model, submodel);
}

PrunePlan plan_prune(const std::vector<std::vector<ImportanceScore>>& scores,
                     const TreeModel& model, int n_remove) {
    check_arg(n_remove >= 1, "plan_prune: n_remove must be >= 1");
    PrunePlan plan;
    plan.flops_before = model.flops();
    plan.flops_after = plan.flops_before;

    // Bottom-n_remove candidate set per submodel (global ranking across its
    // whole path, scores are cross-layer comparable).
    std::map<int, std::set<StructureId>> bottom;
    for (const auto& submodel_scores : scores) {
        if (submodel_scores.empty()) continue;
        const int sub = submodel_scores.front().submodel;
        std::vector<const ImportanceScore*> ranked;
        ranked.reserve(submodel_scores.size());
        for (const auto& s : submodel_scores) ranked.push_back(&s);
        std::sort(ranked.begin(), ranked.end(), [](const ImportanceScore* a,
                                                   const ImportanceScore* b) {
            if (a->score != b->score) return a->score < b->score;
            return a->structure < b->structure;
        });
        auto& set = bottom[sub];
        for (int i = 0; i < std::min<int>(n_remove, static_cast<int>(ranked.size())); ++i)
            set.insert(ranked[i]->structure);
    }
    if (bottom.empty()) return plan;

    // A shared structure is removed only when it sits in the bottom set of
    // every submodel routed through it.
    std::set<StructureId> candidates;
    std::map<StructureId, double> combined;  // summed score, for survivor picks
    for (const auto& submodel_scores : scores)
        for (const auto& s : submodel_scores)
            combined[s.structure] += s.score;
    for (const auto& [structure, _] : combined) {
        bool everyone = true;
        for (int sub : model.nodes[structure.node].submodels) {
            auto it = bottom.find(sub);
            if (it == bottom.end() || !it->second.count(structure)) {
                everyone = false;
                break;
            }
        }
        if (everyone) candidates.insert(structure);
    }
    if (candidates.empty()) return plan;

    // Keep at least one survivor per layer part: when a part would be
    // emptied, spare the candidate with the largest combined score.
    std::map<std::tuple<int, int, int>, std::vector<StructureId>> per_part;
    for (const StructureId& s : candidates)
        per_part[{s.node, s.layer, s.part}].push_back(s);
    for (auto& [key, list] : per_part) {
        const auto& [node_id, li, part_id] = key;
        int part_count = 0;
        for (const PrunePart& p : model.nodes[node_id].layers[li]->prune_parts())
            if (p.part == part_id) part_count = p.count;
        while (static_cast<int>(list.size()) >= part_count) {
            auto spare = std::max_element(list.begin(), list.end(),
                                          [&](const StructureId& a, const StructureId& b) {
                                              if (combined[a] != combined[b])
                                                  return combined[a] < combined[b];
                                              return a < b;
                                          });
            list.erase(spare);
        }
        for (const StructureId& s : list) plan.removals.push_back(s);
    }
    std::sort(plan.removals.begin(), plan.removals.end());

    if (!plan.removals.empty()) {
        TreeModel probe = model.clone();
        PrunePlan raw;
        raw.removals = plan.removals;
        apply_prune(probe, raw);
        plan.flops_after = probe.flops();
    }
    return plan;
}

namespace {

// Remove input channels of everything downstream of (node_id, layer_index).
// `remove` holds channel indices in the producer's output space; `shapes`
// must be the shapes BEFORE any of this plan's surgery (spatial sizes do not
// change under channel pruning, which is all that is read from them).
void propagate_in_removal(TreeModel& model, int node_id, int layer_index,
                          const std::vector<int>& remove) {
    TreeNode& node = model.nodes[node_id];
    for (int li = layer_index + 1; li < static_cast<int>(node.layers.size()); ++li) {
        Layer& l = *node.layers[li];
        if (l.channel_transparent()) {
            l.prune_channels(remove);
            continue;
        }
        if (l.kind() == "linear") {
            const Shape in = [&] {
                Shape s = model.node_input_shape(node_id);
                for (int j = 0; j < li; ++j) s = node.layers[j]->out_shape(s);
                return s;
            }();
            l.prune_in(remove, in.h * in.w);
        } else {
            l.prune_in(remove, 1);
        }
        return;  // consumer absorbs the change; nothing further downstream moves
    }
    for (int child : node.children) propagate_in_removal(model, child, -1, remove);
    for (size_t i = 0; i < model.head_node.size(); ++i) {
        if (model.head_node[i] != node_id) continue;
        const Shape leaf = model.node_output_shape(node_id);
        // leaf shape already reflects the producer's pruned width; only the
        // spatial extent is needed for the block size.
        model.heads[i]->prune_in(remove, leaf.h * leaf.w);
    }
}

}  // namespace

void apply_prune(TreeModel& model, const PrunePlan& plan) {
    if (plan.removals.empty()) return;

    // Group removals per (node, layer, part); indices refer to pre-plan
    // numbering, which grouping preserves because each part is cut once.
    std::map<std::tuple<int, int, int>, std::vector<int>> grouped;
    for (const StructureId& s : plan.removals) {
        check_arg(s.node >= 0 && s.node < static_cast<int>(model.nodes.size()),
                  "apply_prune: bad node in plan");
        const auto parts = model.nodes[s.node].layers[s.layer]->prune_parts();
        bool ok = false;
        for (const PrunePart& p : parts)
            ok = ok || (p.part == s.part && s.index >= 0 && s.index < p.count && p.prunable);
        check_arg(ok, "apply_prune: structure does not match the model");
        grouped[{s.node, s.layer, s.part}].push_back(s.index);
    }

    for (auto& [key, indices] : grouped) {
        const auto& [node_id, li, part_id] = key;
        Layer& layer = *model.nodes[node_id].layers[li];
        bool changes_output = false;
        for (const PrunePart& p : layer.prune_parts())
            if (p.part == part_id) changes_output = p.changes_output;
        layer.prune_part(part_id, indices);
        if (changes_output) propagate_in_removal(model, node_id, li, indices);
    }
    model.validate();
}

}  // namespace splitens
