#include "splitens/tree_model.hpp"

#include <algorithm>
#include <deque>
#include <set>
#include <sstream>
#include <stdexcept>

#include "splitens/kernels.hpp"

namespace splitens {

namespace {
void check_arg(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}
}  // namespace

TreeModel TreeModel::init_shared(const BackboneSpec& backbone, const SubtaskSpec& spec,
                                 const Shape& input, uint64_t seed,
                                 const std::vector<int>& head_widths) {
    check_arg(!backbone.empty(), "init_shared: empty backbone");
    spec.validate();

    TreeModel model;
    model.input_shape = input;
    model.subtask_spec = spec;

    Rng rng(mix_seed(seed, 0xbac0));
    TreeNode root;
    root.id = 0;
    root.parent = -1;
    for (int i = 0; i < spec.num_subtasks(); ++i) root.submodels.push_back(i);

    Shape cur = input;
    for (const LayerCfg& cfg : backbone) {
        auto layer = make_layer(cfg, cur, rng);
        cur = layer->out_shape(cur);
        root.layers.push_back(std::move(layer));
    }
    model.nodes.push_back(std::move(root));

    for (int i = 0; i < spec.num_subtasks(); ++i) {
        const int width = head_widths.empty() ? spec.head_width(i)
                                              : head_widths.at(static_cast<size_t>(i));
        model.heads.push_back(std::make_unique<Linear>(cur.features(), width, true, &rng));
        model.head_node.push_back(0);
    }
    model.flops_budget = model.flops();
    model.validate();
    return model;
}

TreeModel TreeModel::clone() const {
    TreeModel copy;
    copy.input_shape = input_shape;
    copy.subtask_spec = subtask_spec;
    copy.flops_budget = flops_budget;
    copy.head_node = head_node;
    copy.nodes.reserve(nodes.size());
    for (const TreeNode& n : nodes) {
        TreeNode cn;
        cn.id = n.id;
        cn.parent = n.parent;
        cn.children = n.children;
        cn.submodels = n.submodels;
        for (const auto& l : n.layers) cn.layers.push_back(l->clone());
        copy.nodes.push_back(std::move(cn));
    }
    for (const auto& h : heads)
        copy.heads.push_back(std::unique_ptr<Linear>(static_cast<Linear*>(h->clone().release())));
    return copy;
}

std::vector<int> TreeModel::bfs_order() const {
    std::vector<int> order;
    std::deque<int> queue{0};
    while (!queue.empty()) {
        const int id = queue.front();
        queue.pop_front();
        order.push_back(id);
        auto children = nodes[id].children;
        std::sort(children.begin(), children.end());
        for (int c : children) queue.push_back(c);
    }
    return order;
}

int TreeModel::node_depth(int id) const {
    int d = 0;
    while (nodes[id].parent >= 0) {
        id = nodes[id].parent;
        ++d;
    }
    return d;
}

std::vector<Tensor> TreeModel::forward(const Tensor& batch, ForwardMode mode) {
    check_arg(batch.shape() == input_shape, "forward: input shape mismatch");
    node_out_.assign(nodes.size(), Tensor());
    eval_counts_.assign(nodes.size(), 0);

    for (int id : bfs_order()) {
        TreeNode& node = nodes[id];
        Tensor x = node.parent < 0 ? batch : node_out_[node.parent];
        for (auto& layer : node.layers) x = layer->forward(x, mode);
        node_out_[id] = std::move(x);
        eval_counts_[id] = 1;
    }

    std::vector<Tensor> logits(heads.size());
    for (size_t i = 0; i < heads.size(); ++i)
        logits[i] = heads[i]->forward(node_out_[head_node[i]], mode);
    return logits;
}

void TreeModel::backward(const std::vector<Tensor>& dlogits) {
    check_arg(dlogits.size() == heads.size(), "backward: head-grad count mismatch");
    check_arg(node_out_.size() == nodes.size(), "backward before forward");

    std::vector<Tensor> node_grad(nodes.size());
    auto accumulate = [&](int id, Tensor&& g) {
        if (node_grad[id].empty()) {
            node_grad[id] = std::move(g);
        } else {
            kern::ops().axpy(1.0, g.ptr(), node_grad[id].ptr(), g.size());
        }
    };

    for (size_t i = 0; i < heads.size(); ++i) {
        if (dlogits[i].empty()) continue;
        accumulate(head_node[i], heads[i]->backward(dlogits[i]));
    }

    auto order = bfs_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int id = *it;
        if (node_grad[id].empty()) continue;
        TreeNode& node = nodes[id];
        Tensor g = std::move(node_grad[id]);
        for (auto lit = node.layers.rbegin(); lit != node.layers.rend(); ++lit)
            g = (*lit)->backward(g);
        if (node.parent >= 0) accumulate(node.parent, std::move(g));
    }
}

void TreeModel::zero_grad() {
    for (Param* p : params()) p->zero_grad();
}

std::vector<Param*> TreeModel::params() {
    std::vector<Param*> out;
    for (TreeNode& node : nodes)
        for (auto& layer : node.layers) layer->collect_params(out);
    for (auto& head : heads) head->collect_params(out);
    return out;
}

void TreeModel::split_at(int node_id, int layer_index, const std::vector<int>& side_s,
                         const std::vector<int>& side_t) {
    check_arg(node_id >= 0 && node_id < static_cast<int>(nodes.size()), "split_at: bad node");
    TreeNode& node = nodes[node_id];
    check_arg(layer_index >= 0 && layer_index < static_cast<int>(node.layers.size()),
              "split_at: layer index out of range");
    check_arg(!side_s.empty() && !side_t.empty(), "split_at: degenerate partition");

    std::set<int> s(side_s.begin(), side_s.end()), t(side_t.begin(), side_t.end());
    std::set<int> all(node.submodels.begin(), node.submodels.end());
    std::set<int> merged = s;
    merged.insert(t.begin(), t.end());
    check_arg(s.size() + t.size() == merged.size(), "split_at: partition sides overlap");
    check_arg(merged == all, "split_at: partition must cover the node's submodels");

    // Existing child subtrees must fall entirely on one side; decide the
    // routing before any mutation so a rejected partition leaves the model
    // untouched.
    std::vector<bool> child_to_s;
    for (int child_id : node.children) {
        const TreeNode& child = nodes[child_id];
        const bool in_s = std::all_of(child.submodels.begin(), child.submodels.end(),
                                      [&](int m) { return s.count(m) > 0; });
        const bool in_t = std::all_of(child.submodels.begin(), child.submodels.end(),
                                      [&](int m) { return t.count(m) > 0; });
        check_arg(in_s || in_t, "split_at: partition crosses an existing child subtree");
        child_to_s.push_back(in_s);
    }

    const int a_id = static_cast<int>(nodes.size());
    const int b_id = a_id + 1;
    TreeNode a, b;
    a.id = a_id;
    b.id = b_id;
    a.parent = b.parent = node_id;
    a.submodels.assign(s.begin(), s.end());
    b.submodels.assign(t.begin(), t.end());
    for (size_t i = layer_index; i < node.layers.size(); ++i) {
        a.layers.push_back(node.layers[i]->clone());
        b.layers.push_back(node.layers[i]->clone());
    }
    node.layers.resize(layer_index);

    for (size_t ci = 0; ci < node.children.size(); ++ci) {
        TreeNode& child = nodes[node.children[ci]];
        TreeNode& side = child_to_s[ci] ? a : b;
        side.children.push_back(child.id);
        child.parent = side.id;
    }
    node.children = {a_id, b_id};

    for (size_t i = 0; i < head_node.size(); ++i) {
        if (head_node[i] != node_id) continue;
        head_node[i] = s.count(static_cast<int>(i)) ? a_id : b_id;
    }

    nodes.push_back(std::move(a));
    nodes.push_back(std::move(b));
    validate();
}

Shape TreeModel::node_input_shape(int id) const {
    check_arg(id >= 0 && id < static_cast<int>(nodes.size()), "node_input_shape: bad node");
    if (nodes[id].parent < 0) return input_shape;
    return node_output_shape(nodes[id].parent);
}

Shape TreeModel::node_output_shape(int id) const {
    Shape s = node_input_shape(id);
    for (const auto& layer : nodes[id].layers) s = layer->out_shape(s);
    return s;
}

uint64_t TreeModel::flops() const {
    uint64_t total = 0;
    for (const TreeNode& node : nodes) {
        Shape s = node_input_shape(node.id);
        for (const auto& layer : node.layers) {
            total += layer->flops(s);
            s = layer->out_shape(s);
        }
    }
    for (const auto& head : heads) total += head->flops(Shape{head->in_features(), 1, 1});
    return total;
}

bool TreeModel::all_private() const {
    for (size_t i = 0; i < heads.size(); ++i)
        if (nodes[head_node[i]].submodels.size() != 1) return false;
    return true;
}

int64_t TreeModel::param_count() const {
    int64_t total = 0;
    for (const TreeNode& node : nodes)
        for (const auto& layer : node.layers) total += layer->param_count();
    for (const auto& head : heads) total += head->param_count();
    return total;
}

std::vector<LayerRef> TreeModel::weighted_layers() const {
    std::vector<LayerRef> refs;
    for (int id : bfs_order()) {
        const TreeNode& node = nodes[id];
        for (int li = 0; li < static_cast<int>(node.layers.size()); ++li) {
            std::vector<const Param*> ws;
            node.layers[li]->weight_elements(ws);
            if (!ws.empty()) refs.push_back(LayerRef{id, li});
        }
    }
    return refs;
}

void TreeModel::validate() const {
    check_arg(!nodes.empty() && nodes[0].parent == -1, "validate: bad root");
    for (const TreeNode& node : nodes) {
        check_arg(!node.submodels.empty(), "validate: node serves no submodel");
        for (int c : node.children) {
            check_arg(nodes[c].parent == node.id, "validate: broken parent link");
        }
        if (node.parent >= 0) {
            const auto& siblings = nodes[node.parent].children;
            check_arg(std::find(siblings.begin(), siblings.end(), node.id) != siblings.end(),
                      "validate: orphan node");
        }
        // submodels of a node = union of children's (or its heads')
        std::set<int> expect;
        for (int c : node.children)
            expect.insert(nodes[c].submodels.begin(), nodes[c].submodels.end());
        for (size_t i = 0; i < head_node.size(); ++i)
            if (head_node[i] == node.id) expect.insert(static_cast<int>(i));
        std::set<int> actual(node.submodels.begin(), node.submodels.end());
        check_arg(expect == actual, "validate: submodel routing out of sync");
    }
    // channel compatibility along every path, and head widths
    for (size_t i = 0; i < heads.size(); ++i) {
        const Shape leaf = node_output_shape(head_node[i]);  // throws on mismatch
        check_arg(leaf.features() == heads[i]->in_features(),
                  "validate: head in-features out of sync");
    }
}

json TreeModel::to_json() const {
    json j;
    j["input"] = {input_shape.c, input_shape.h, input_shape.w};
    j["flops"] = flops();
    j["flops_budget"] = flops_budget;
    j["params"] = param_count();
    j["nodes"] = json::array();
    for (int id : bfs_order()) {
        const TreeNode& node = nodes[id];
        json nj;
        nj["id"] = node.id;
        nj["parent"] = node.parent;
        nj["submodels"] = node.submodels;
        nj["layers"] = json::array();
        Shape s = node_input_shape(id);
        for (const auto& layer : node.layers) {
            json lj = layer->describe();
            s = layer->out_shape(s);
            lj["out_shape"] = {s.c, s.h, s.w};
            nj["layers"].push_back(lj);
        }
        j["nodes"].push_back(nj);
    }
    j["heads"] = json::array();
    for (size_t i = 0; i < heads.size(); ++i) {
        j["heads"].push_back(json{{"submodel", i},
                                  {"node", head_node[i]},
                                  {"in", heads[i]->in_features()},
                                  {"out", heads[i]->out_features()}});
    }
    return j;
}

std::string TreeModel::to_dot() const {
    std::ostringstream os;
    os << "digraph splitens {\n  rankdir=TB;\n  node [shape=box, fontname=\"monospace\"];\n";
    for (int id : bfs_order()) {
        const TreeNode& node = nodes[id];
        os << "  n" << id << " [label=\"node " << id << "\\nsubmodels:";
        for (int m : node.submodels) os << " " << m;
        os << "\\n";
        Shape s = node_input_shape(id);
        for (const auto& layer : node.layers) {
            s = layer->out_shape(s);
            os << layer->kind();
            if (layer->kind() == "conv" || layer->kind() == "residual_block" ||
                layer->kind() == "linear")
                os << "(" << s.c << ")";
            os << "\\n";
        }
        os << "\"];\n";
        if (node.parent >= 0) os << "  n" << node.parent << " -> n" << id << ";\n";
    }
    for (size_t i = 0; i < heads.size(); ++i) {
        os << "  h" << i << " [shape=ellipse, label=\"head " << i << " ("
           << heads[i]->out_features() << ")\"];\n";
        os << "  n" << head_node[i] << " -> h" << i << ";\n";
    }
    os << "}\n";
    return os.str();
}

}  // namespace splitens
