#include "splitens/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace splitens {

namespace {
constexpr double kNormEps = 1e-12;

void check_arg(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

bool layer_on_path(const TreeModel& model, int node_id, int submodel) {
    const auto& subs = model.nodes[node_id].submodels;
    return std::find(subs.begin(), subs.end(), submodel) != subs.end();
}
}  // namespace

double submodel_loss_backward(TreeModel& model, int submodel, const SubtaskBatch& batch,
                              const ClassBalancedWeights& weights, OodTargetMode mode) {
    check_arg(submodel >= 0 && submodel < model.num_submodels(),
              "submodel_loss_backward: bad submodel");
    auto logits = model.forward(batch.x, ForwardMode::probe);
    std::vector<TargetVector> targets;
    targets.reserve(batch.labels.size());
    for (int y : batch.labels)
        targets.push_back(convert_label(model.subtask_spec, submodel, y, mode));
    Tensor grad;
    const double loss = cb_bce_loss(logits[submodel], targets, weights, &grad);
    model.zero_grad();
    std::vector<Tensor> dlogits(model.num_submodels());
    dlogits[submodel] = std::move(grad);
    model.backward(dlogits);
    return loss;
}

std::vector<double> sensitivity_from_grads(const Layer& layer) {
    std::vector<const Param*> ws;
    layer.weight_elements(ws);
    check_arg(!ws.empty(), "sensitivity_from_grads: layer has no weight matrix");
    std::vector<double> s;
    for (const Param* p : ws)
        for (size_t j = 0; j < p->value.size(); ++j)
            s.push_back(std::abs(p->value.data[j] * p->grad.data[j]) + kNormEps);
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    for (double& v : s) v /= total;
    return s;
}

std::vector<double> snip_sensitivity(TreeModel& model, const LayerRef& layer, int submodel,
                                     const SubtaskBatch& batch,
                                     const ClassBalancedWeights& weights, OodTargetMode mode) {
    check_arg(layer.node >= 0 && layer.node < static_cast<int>(model.nodes.size()),
              "snip_sensitivity: bad node");
    check_arg(layer_on_path(model, layer.node, submodel),
              "snip_sensitivity: layer not on the submodel's path");
    submodel_loss_backward(model, submodel, batch, weights, mode);
    return sensitivity_from_grads(*model.nodes[layer.node].layers[layer.layer]);
}

SensitivityMask topk_mask(const std::vector<double>& sensitivities, double k_fraction) {
    check_arg(!sensitivities.empty(), "topk_mask: empty sensitivity vector");
    check_arg(k_fraction > 0.0 && k_fraction <= 1.0, "topk_mask: k_fraction out of (0,1]");
    const int len = static_cast<int>(sensitivities.size());
    const int keep = static_cast<int>(std::ceil(k_fraction * len));
    std::vector<int> idx(len);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (sensitivities[a] != sensitivities[b]) return sensitivities[a] > sensitivities[b];
        return a < b;
    });
    SensitivityMask m;
    m.k_fraction = k_fraction;
    m.selected.assign(idx.begin(), idx.begin() + keep);
    std::sort(m.selected.begin(), m.selected.end());
    return m;
}

double iou(const SensitivityMask& a, const SensitivityMask& b) {
    check_arg(a.layer == b.layer, "iou: masks come from different layers");
    size_t inter = 0, ia = 0, ib = 0;
    while (ia < a.selected.size() && ib < b.selected.size()) {
        if (a.selected[ia] == b.selected[ib]) {
            ++inter;
            ++ia;
            ++ib;
        } else if (a.selected[ia] < b.selected[ib]) {
            ++ia;
        } else {
            ++ib;
        }
    }
    const size_t uni = a.selected.size() + b.selected.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// The bottleneck of the maximum spanning tree equals the bipartition
// minimax: removing the tree's weakest edge yields a cut whose maximum
// crossing weight is that edge (any heavier crossing edge would have
// displaced it in the tree), and every bipartition is crossed by some tree
// edge at least that heavy.
double mct(const CorrelationGraph& graph) {
    const int v = graph.size();
    check_arg(v >= 2, "mct: need at least two vertices");
    // Prim over the complete graph, keeping the minimum edge adopted.
    std::vector<char> used(v, 0);
    std::vector<double> best(v, -1.0);
    used[0] = 1;
    for (int i = 1; i < v; ++i) best[i] = graph.edge(0, i);
    double bottleneck = 2.0;
    for (int step = 1; step < v; ++step) {
        int pick = -1;
        for (int i = 0; i < v; ++i)
            if (!used[i] && (pick < 0 || best[i] > best[pick])) pick = i;
        bottleneck = std::min(bottleneck, best[pick]);
        used[pick] = 1;
        for (int i = 0; i < v; ++i)
            if (!used[i]) best[i] = std::max(best[i], graph.edge(pick, i));
    }
    return bottleneck;
}

double mct_bruteforce(const CorrelationGraph& graph) {
    const int v = graph.size();
    check_arg(v >= 2 && v <= 20, "mct_bruteforce: vertex count out of range");
    double result = 2.0;
    const uint32_t limit = 1u << (v - 1);
    for (uint32_t mask = 1; mask < limit; ++mask) {
        // vertex 0 always on side T (complement); mask selects S among 1..v-1
        double cross_max = -1.0;
        for (int a = 0; a < v; ++a) {
            const bool a_in_s = a > 0 && (mask >> (a - 1)) & 1u;
            for (int b = a + 1; b < v; ++b) {
                const bool b_in_s = b > 0 && (mask >> (b - 1)) & 1u;
                if (a_in_s != b_in_s) cross_max = std::max(cross_max, graph.edge(a, b));
            }
        }
        result = std::min(result, cross_max);
    }
    return result;
}

std::pair<std::vector<int>, std::vector<int>> mct_partition(const CorrelationGraph& graph) {
    const int v = graph.size();
    check_arg(v >= 2, "mct_partition: need at least two vertices");
    const double target = mct(graph);

    if (v <= 20) {
        // Enumerate cuts achieving the target; keep the lexicographically
        // smallest side containing vertex 0.
        std::vector<int> best_s;
        const uint32_t limit = 1u << (v - 1);
        for (uint32_t mask = 0; mask < limit; ++mask) {
            // side containing position 0 = {0} + positions where bit unset
            std::vector<char> with0(v, 0);
            with0[0] = 1;
            for (int i = 1; i < v; ++i) with0[i] = ((mask >> (i - 1)) & 1u) ? 0 : 1;
            bool proper = false;
            double cross_max = -1.0;
            for (int a = 0; a < v; ++a)
                for (int b = a + 1; b < v; ++b)
                    if (with0[a] != with0[b]) {
                        proper = true;
                        cross_max = std::max(cross_max, graph.edge(a, b));
                    }
            if (!proper || cross_max != target) continue;
            std::vector<int> s;
            for (int i = 0; i < v; ++i)
                if (with0[i]) s.push_back(i);
            if (best_s.empty() || s < best_s) best_s = s;
        }
        std::vector<int> side_s, side_t;
        std::vector<char> in_s(v, 0);
        for (int p : best_s) in_s[p] = 1;
        for (int i = 0; i < v; ++i)
            (in_s[i] ? side_s : side_t).push_back(graph.vertices[i]);
        return {side_s, side_t};
    }

    // Large graphs: cut at the bottleneck edge of the maximum spanning tree.
    std::vector<int> parent(v, 0);
    std::vector<char> used(v, 0);
    std::vector<double> best(v, -1.0);
    used[0] = 1;
    for (int i = 1; i < v; ++i) best[i] = graph.edge(0, i);
    int weak_child = -1;
    double weak_w = 2.0;
    std::vector<std::pair<int, int>> tree_edges;
    for (int step = 1; step < v; ++step) {
        int pick = -1;
        for (int i = 0; i < v; ++i)
            if (!used[i] && (pick < 0 || best[i] > best[pick])) pick = i;
        tree_edges.emplace_back(parent[pick], pick);
        if (best[pick] < weak_w) {
            weak_w = best[pick];
            weak_child = pick;
        }
        used[pick] = 1;
        for (int i = 0; i < v; ++i)
            if (!used[i] && graph.edge(pick, i) > best[i]) {
                best[i] = graph.edge(pick, i);
                parent[i] = pick;
            }
    }
    // component of weak_child after removing its parent edge
    std::vector<std::vector<int>> adj(v);
    for (auto [a, b] : tree_edges) {
        if (b == weak_child) continue;
        adj[a].push_back(b);
        adj[b].push_back(a);
    }
    std::vector<char> in_t(v, 0);
    std::vector<int> stack{weak_child};
    in_t[weak_child] = 1;
    while (!stack.empty()) {
        int cur = stack.back();
        stack.pop_back();
        for (int nx : adj[cur])
            if (!in_t[nx]) {
                in_t[nx] = 1;
                stack.push_back(nx);
            }
    }
    std::vector<int> side_s, side_t;
    for (int i = 0; i < v; ++i)
        (in_t[i] ? side_t : side_s).push_back(graph.vertices[i]);
    return {side_s, side_t};
}

MaskTable compute_mask_table(TreeModel& model, const std::vector<SubtaskBatch>& batches,
                             const std::vector<ClassBalancedWeights>& weights,
                             OodTargetMode mode, double k_fraction) {
    check_arg(static_cast<int>(batches.size()) == model.num_submodels(),
              "compute_mask_table: one batch per submodel expected");
    MaskTable table;
    const auto refs = model.weighted_layers();
    for (int sub = 0; sub < model.num_submodels(); ++sub) {
        bool shares_anything = false;
        for (const LayerRef& ref : refs)
            if (model.nodes[ref.node].submodels.size() >= 2 &&
                layer_on_path(model, ref.node, sub)) {
                shares_anything = true;
                break;
            }
        if (!shares_anything) continue;
        submodel_loss_backward(model, sub, batches[sub], weights[sub], mode);
        for (const LayerRef& ref : refs) {
            if (model.nodes[ref.node].submodels.size() < 2) continue;
            if (!layer_on_path(model, ref.node, sub)) continue;
            auto sens = sensitivity_from_grads(*model.nodes[ref.node].layers[ref.layer]);
            SensitivityMask m = topk_mask(sens, k_fraction);
            m.layer = ref;
            m.submodel = sub;
            table.layers[{ref.node, ref.layer}][sub] = std::move(m);
        }
    }
    return table;
}

namespace {

// Split units of a node: each child subtree is one unit (it must stay
// whole), each directly attached head is its own unit.
std::vector<std::vector<int>> node_split_units(const TreeModel& model, int node_id) {
    std::vector<std::vector<int>> units;
    for (int child : model.nodes[node_id].children)
        units.push_back(model.nodes[child].submodels);
    for (size_t i = 0; i < model.head_node.size(); ++i)
        if (model.head_node[i] == node_id) units.push_back({static_cast<int>(i)});
    std::sort(units.begin(), units.end());
    return units;
}

// Contract submodel vertices into units; the crossing maximum is preserved
// by giving each unit pair the max of the underlying edges.
CorrelationGraph contract_graph(const CorrelationGraph& g,
                                const std::vector<std::vector<int>>& units) {
    CorrelationGraph c;
    const int u = static_cast<int>(units.size());
    c.vertices.resize(u);
    std::iota(c.vertices.begin(), c.vertices.end(), 0);
    c.weight.assign(u, std::vector<double>(u, 0.0));
    std::map<int, int> pos;
    for (int i = 0; i < g.size(); ++i) pos[g.vertices[i]] = i;
    for (int a = 0; a < u; ++a)
        for (int b = a + 1; b < u; ++b) {
            double mx = 0.0;
            for (int va : units[a])
                for (int vb : units[b]) mx = std::max(mx, g.edge(pos.at(va), pos.at(vb)));
            c.weight[a][b] = c.weight[b][a] = mx;
        }
    return c;
}

}  // namespace

std::optional<SplitDecision> find_split(const TreeModel& model, const MaskTable& masks,
                                        double threshold) {
    if (model.all_private()) return std::nullopt;

    for (int node_id : model.bfs_order()) {
        const TreeNode& node = model.nodes[node_id];
        if (node.submodels.size() < 2) continue;
        const auto units = node_split_units(model, node_id);
        if (units.size() < 2) continue;

        for (int li = 0; li < static_cast<int>(node.layers.size()); ++li) {
            auto it = masks.layers.find({node_id, li});
            if (it == masks.layers.end()) continue;
            const LayerMasks& lm = it->second;

            CorrelationGraph g;
            g.vertices = node.submodels;
            const int v = g.size();
            g.weight.assign(v, std::vector<double>(v, 0.0));
            bool complete = true;
            for (int a = 0; a < v && complete; ++a) {
                for (int b = a + 1; b < v; ++b) {
                    auto ma = lm.find(g.vertices[a]);
                    auto mb = lm.find(g.vertices[b]);
                    if (ma == lm.end() || mb == lm.end()) {
                        complete = false;
                        break;
                    }
                    const double j = iou(ma->second, mb->second);
                    g.weight[a][b] = g.weight[b][a] = j;
                }
            }
            if (!complete) continue;

            const CorrelationGraph contracted = contract_graph(g, units);
            const double value = mct(contracted);
            if (value >= threshold) continue;

            auto [us, ut] = mct_partition(contracted);
            SplitDecision d;
            d.node = node_id;
            d.layer_index = li;
            d.mct_value = value;
            for (int unit : us)
                d.side_s.insert(d.side_s.end(), units[unit].begin(), units[unit].end());
            for (int unit : ut)
                d.side_t.insert(d.side_t.end(), units[unit].begin(), units[unit].end());
            std::sort(d.side_s.begin(), d.side_s.end());
            std::sort(d.side_t.begin(), d.side_t.end());
            return d;
        }
    }
    return std::nullopt;
}

json sensitivity_report(const TreeModel& model, const MaskTable& masks) {
    json report = json::array();
    for (const auto& [key, lm] : masks.layers) {
        const auto& [node_id, li] = key;
        json entry;
        entry["node"] = node_id;
        entry["layer"] = li;
        entry["kind"] = model.nodes[node_id].layers[li]->kind();
        std::vector<int> subs;
        for (const auto& [sub, _] : lm) subs.push_back(sub);
        entry["submodels"] = subs;
        json matrix = json::array();
        double layer_mct = -1.0;
        if (subs.size() >= 2) {
            CorrelationGraph g;
            g.vertices = subs;
            const int v = g.size();
            g.weight.assign(v, std::vector<double>(v, 0.0));
            for (int a = 0; a < v; ++a) {
                json row = json::array();
                for (int b = 0; b < v; ++b) {
                    double j = a == b ? 1.0 : iou(lm.at(subs[a]), lm.at(subs[b]));
                    if (a != b) g.weight[a][b] = j;
                    row.push_back(j);
                }
                matrix.push_back(row);
            }
            layer_mct = mct(g);
        }
        entry["iou"] = matrix;
        entry["mct"] = layer_mct;
        report.push_back(entry);
    }
    return report;
}

}  // namespace splitens
