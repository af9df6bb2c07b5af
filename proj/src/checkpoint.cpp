#include "splitens/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace splitens {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'N', 'S', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void check_io(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

// Canonical payload order: nodes ascending by id, layers in order, for each
// layer params (value, velocity) then aux state tensors; heads follow the
// same scheme. Gradients are not persisted.
template <typename ModelT, typename Fn>
void walk_payload(ModelT& model, Fn&& fn) {
    for (auto& node : model.nodes) {
        for (auto& layer : node.layers) {
            std::vector<Param*> ps;
            layer->collect_params(ps);
            for (Param* p : ps) {
                fn(p->value);
                fn(p->velocity);
            }
            std::vector<Tensor*> state;
            layer->collect_state(state);
            for (Tensor* t : state) fn(*t);
        }
    }
    for (auto& head : model.heads) {
        std::vector<Param*> ps;
        head->collect_params(ps);
        for (Param* p : ps) {
            fn(p->value);
            fn(p->velocity);
        }
    }
}

}  // namespace

json subtask_spec_to_json(const SubtaskSpec& spec) {
    return json{{"total_classes", spec.total_classes},
                {"groups", spec.groups},
                {"per_class_count", spec.per_class_count}};
}

SubtaskSpec subtask_spec_from_json(const json& j) {
    SubtaskSpec spec;
    spec.total_classes = j.at("total_classes").get<int>();
    spec.groups = j.at("groups").get<std::vector<std::vector<int>>>();
    spec.per_class_count = j.at("per_class_count").get<int>();
    spec.validate();
    return spec;
}

void ensure_spec_matches(const Checkpoint& ckpt, const SubtaskSpec& expected) {
    if (!(ckpt.model.subtask_spec == expected))
        throw std::invalid_argument(
            "checkpoint subtask decomposition does not match the requested one");
}

void save_checkpoint(const std::string& path, const TreeModel& model,
                     const TrainHistory& history, const json& config, int epochs_done,
                     const std::string& rng_state) {
    json header;
    header["schema"] = "splitens.checkpoint";
    header["version"] = kVersion;
    header["epochs_done"] = epochs_done;
    header["rng_state"] = rng_state;
    header["config"] = config;
    header["history"] = history.to_json();

    json mj;
    mj["input"] = {model.input_shape.c, model.input_shape.h, model.input_shape.w};
    mj["flops_budget"] = model.flops_budget;
    mj["subtask_spec"] = subtask_spec_to_json(model.subtask_spec);
    mj["head_node"] = model.head_node;
    mj["nodes"] = json::array();
    for (const TreeNode& node : model.nodes) {
        json nj;
        nj["id"] = node.id;
        nj["parent"] = node.parent;
        nj["children"] = node.children;
        nj["submodels"] = node.submodels;
        nj["layers"] = json::array();
        for (const auto& layer : node.layers) nj["layers"].push_back(layer->describe());
        mj["nodes"].push_back(nj);
    }
    mj["heads"] = json::array();
    for (const auto& head : model.heads) mj["heads"].push_back(head->describe());
    header["model"] = mj;

    json dims = json::array();
    uint64_t payload_doubles = 0;
    walk_payload(const_cast<TreeModel&>(model), [&](Tensor& t) {
        dims.push_back({t.n, t.c, t.h, t.w});
        payload_doubles += t.size();
    });
    header["tensors"] = dims;

    std::ofstream f(path, std::ios::binary);
    check_io(f.good(), "save_checkpoint: cannot open " + path);
    f.write(kMagic, sizeof(kMagic));
    uint32_t version = kVersion;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::string hs = header.dump();
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    walk_payload(const_cast<TreeModel&>(model), [&](Tensor& t) {
        f.write(reinterpret_cast<const char*>(t.ptr()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    });
    check_io(f.good(), "save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check_io(f.good(), "load_checkpoint: cannot open " + path);
    char magic[sizeof(kMagic)];
    f.read(magic, sizeof(magic));
    check_io(f.gcount() == sizeof(magic) && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
             "load_checkpoint: bad magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    check_io(version == kVersion, "load_checkpoint: unsupported version in " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    check_io(f.gcount() == static_cast<std::streamsize>(hlen),
             "load_checkpoint: truncated header in " + path);
    json header;
    try {
        header = json::parse(hs);
    } catch (const std::exception& e) {
        throw std::runtime_error("load_checkpoint: corrupt header in " + path + ": " + e.what());
    }
    check_io(header.value("schema", "") == "splitens.checkpoint",
             "load_checkpoint: wrong schema tag in " + path);

    Checkpoint ckpt;
    ckpt.epochs_done = header.at("epochs_done").get<int>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.config = header.at("config");
    ckpt.history = TrainHistory::from_json(header.at("history"));

    const json& mj = header.at("model");
    TreeModel& model = ckpt.model;
    model.input_shape = Shape{mj.at("input")[0].get<int>(), mj.at("input")[1].get<int>(),
                              mj.at("input")[2].get<int>()};
    model.flops_budget = mj.at("flops_budget").get<uint64_t>();
    model.subtask_spec = subtask_spec_from_json(mj.at("subtask_spec"));
    model.head_node = mj.at("head_node").get<std::vector<int>>();
    for (const json& nj : mj.at("nodes")) {
        TreeNode node;
        node.id = nj.at("id").get<int>();
        node.parent = nj.at("parent").get<int>();
        node.children = nj.at("children").get<std::vector<int>>();
        node.submodels = nj.at("submodels").get<std::vector<int>>();
        for (const json& lj : nj.at("layers")) node.layers.push_back(layer_from_json(lj));
        model.nodes.push_back(std::move(node));
    }
    for (const json& hj : mj.at("heads")) {
        auto layer = layer_from_json(hj);
        model.heads.push_back(std::unique_ptr<Linear>(static_cast<Linear*>(layer.release())));
    }

    const json& dims = header.at("tensors");
    size_t cursor = 0;
    walk_payload(model, [&](Tensor& t) {
        check_io(cursor < dims.size(), "load_checkpoint: tensor list shorter than model");
        const json& d = dims[cursor++];
        check_io(t.n == d[0].get<int>() && t.c == d[1].get<int>() && t.h == d[2].get<int>() &&
                     t.w == d[3].get<int>(),
                 "load_checkpoint: tensor shape mismatch in " + path);
        f.read(reinterpret_cast<char*>(t.ptr()),
               static_cast<std::streamsize>(t.size() * sizeof(double)));
        check_io(f.gcount() == static_cast<std::streamsize>(t.size() * sizeof(double)),
                 "load_checkpoint: truncated payload in " + path);
    });
    check_io(cursor == dims.size(), "load_checkpoint: tensor list longer than model");
    model.validate();
    return ckpt;
}

}  // namespace splitens
