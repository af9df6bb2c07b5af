#include "splitens/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace splitens {

namespace {

json blobs_to_json(const BlobsCfg& b) {
    return json{{"classes", b.classes},
                {"per_class", b.per_class},
                {"height", b.height},
                {"width", b.width},
                {"channels", b.channels},
                {"blob_sigma", b.blob_sigma},
                {"center_jitter", b.center_jitter},
                {"amplitude_jitter", b.amplitude_jitter},
                {"noise", b.noise},
                {"ring_radius_frac", b.ring_radius_frac},
                {"ood_angle_deg", b.ood_angle_deg},
                {"seed", b.seed}};
}

BlobsCfg blobs_from_json(const json& j) {
    BlobsCfg b;
    b.classes = j.value("classes", b.classes);
    b.per_class = j.value("per_class", b.per_class);
    b.height = j.value("height", b.height);
    b.width = j.value("width", b.width);
    b.channels = j.value("channels", b.channels);
    b.blob_sigma = j.value("blob_sigma", b.blob_sigma);
    b.center_jitter = j.value("center_jitter", b.center_jitter);
    b.amplitude_jitter = j.value("amplitude_jitter", b.amplitude_jitter);
    b.noise = j.value("noise", b.noise);
    b.ring_radius_frac = j.value("ring_radius_frac", b.ring_radius_frac);
    b.ood_angle_deg = j.value("ood_angle_deg", b.ood_angle_deg);
    b.seed = j.value("seed", b.seed);
    return b;
}

}  // namespace

std::string ood_mode_name(OodTargetMode mode) {
    return mode == OodTargetMode::ood_aware ? "ood_aware" : "one_hot";
}

OodTargetMode ood_mode_from_name(const std::string& name) {
    if (name == "ood_aware") return OodTargetMode::ood_aware;
    if (name == "one_hot") return OodTargetMode::one_hot;
    throw std::invalid_argument("unknown ood_target_mode: " + name);
}

bool operator==(const LayerCfg& a, const LayerCfg& b) {
    return a.kind == b.kind && a.out == b.out && a.k == b.k && a.stride == b.stride &&
           a.pad == b.pad && a.bias == b.bias && a.bn == b.bn && a.proj == b.proj;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    return a.dataset == b.dataset && a.ood_sets == b.ood_sets && a.backbone == b.backbone &&
           a.subtasks == b.subtasks && a.train == b.train && a.baseline == b.baseline &&
           a.ensemble_size == b.ensemble_size && a.output_dir == b.output_dir;
}

json ExperimentConfig::to_json() const {
    json j;
    json dj{{"kind", dataset.kind}};
    if (dataset.kind == "blobs") {
        dj["blobs"] = blobs_to_json(dataset.blobs);
        dj["blobs_test_per_class"] = dataset.blobs_test_per_class;
    } else if (dataset.kind == "cifar_bin") {
        dj["train_paths"] = dataset.train_paths;
        dj["test_paths"] = dataset.test_paths;
        dj["classes"] = dataset.classes;
        dj["channels"] = dataset.channels;
        dj["height"] = dataset.height;
        dj["width"] = dataset.width;
        dj["label_bytes"] = dataset.label_bytes;
    } else if (dataset.kind == "image_dir") {
        dj["train_dir"] = dataset.train_dir;
        dj["train_labels"] = dataset.train_labels;
        dj["test_dir"] = dataset.test_dir;
        dj["test_labels"] = dataset.test_labels;
    } else if (dataset.kind == "file") {
        dj["train_file"] = dataset.train_file;
        dj["test_file"] = dataset.test_file;
    }
    j["dataset"] = dj;

    j["ood_sets"] = json::array();
    for (const OodSetCfg& o : ood_sets) {
        json oj{{"name", o.name}, {"kind", o.kind}};
        if (o.kind == "file") {
            oj["path"] = o.path;
        } else {
            oj["count"] = o.count;
            oj["seed"] = o.seed;
        }
        if (o.kind == "blobs_ood") {
            oj["angle_deg"] = o.angle_deg;
            oj["radius_frac"] = o.radius_frac;
        }
        j["ood_sets"].push_back(oj);
    }

    j["backbone"] = json::array();
    for (const LayerCfg& l : backbone) j["backbone"].push_back(layer_cfg_to_json(l));

    json sj{{"n_splits", subtasks.n_splits}, {"strategy", subtasks.strategy},
            {"seed", subtasks.seed}};
    if (!subtasks.groups.empty()) sj["groups"] = subtasks.groups;
    if (!subtasks.semantic_table.empty()) {
        json t = json::object();
        for (const auto& [cls, name] : subtasks.semantic_table) t[std::to_string(cls)] = name;
        sj["semantic_table"] = t;
    }
    if (!subtasks.semantic_table_path.empty())
        sj["semantic_table_path"] = subtasks.semantic_table_path;
    j["subtasks"] = sj;

    j["train"] = json{{"epochs", train.epochs},
                      {"warmup_epochs", train.warmup_epochs},
                      {"lr", train.lr},
                      {"momentum", train.momentum},
                      {"weight_decay", train.weight_decay},
                      {"batch_size", train.batch_size},
                      {"lambda", train.lambda},
                      {"beta", train.beta},
                      {"mct_threshold", train.mct_threshold},
                      {"k_fraction", train.k_fraction},
                      {"prune_interval", train.prune_interval},
                      {"n_remove_fraction", train.n_remove_fraction},
                      {"flops_budget", train.flops_budget},
                      {"seed", train.seed},
                      {"ood_target_mode", ood_mode_name(train.ood_target_mode)},
                      {"sensitivity_batch", train.sensitivity_batch},
                      {"dump_sensitivity", train.dump_sensitivity}};

    j["baseline"] = baseline;
    j["ensemble_size"] = ensemble_size;
    j["output_dir"] = output_dir;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig cfg;
    if (j.contains("dataset")) {
        const json& dj = j["dataset"];
        cfg.dataset.kind = dj.value("kind", cfg.dataset.kind);
        if (dj.contains("blobs")) cfg.dataset.blobs = blobs_from_json(dj["blobs"]);
        cfg.dataset.blobs_test_per_class =
            dj.value("blobs_test_per_class", cfg.dataset.blobs_test_per_class);
        cfg.dataset.train_paths = dj.value("train_paths", cfg.dataset.train_paths);
        cfg.dataset.test_paths = dj.value("test_paths", cfg.dataset.test_paths);
        cfg.dataset.classes = dj.value("classes", cfg.dataset.classes);
        cfg.dataset.channels = dj.value("channels", cfg.dataset.channels);
        cfg.dataset.height = dj.value("height", cfg.dataset.height);
        cfg.dataset.width = dj.value("width", cfg.dataset.width);
        cfg.dataset.label_bytes = dj.value("label_bytes", cfg.dataset.label_bytes);
        cfg.dataset.train_dir = dj.value("train_dir", cfg.dataset.train_dir);
        cfg.dataset.train_labels = dj.value("train_labels", cfg.dataset.train_labels);
        cfg.dataset.test_dir = dj.value("test_dir", cfg.dataset.test_dir);
        cfg.dataset.test_labels = dj.value("test_labels", cfg.dataset.test_labels);
        cfg.dataset.train_file = dj.value("train_file", cfg.dataset.train_file);
        cfg.dataset.test_file = dj.value("test_file", cfg.dataset.test_file);
    }
    for (const json& oj : j.value("ood_sets", json::array())) {
        OodSetCfg o;
        o.name = oj.value("name", "");
        o.kind = oj.value("kind", o.kind);
        o.count = oj.value("count", o.count);
        o.seed = oj.value("seed", o.seed);
        o.path = oj.value("path", o.path);
        o.angle_deg = oj.value("angle_deg", o.angle_deg);
        o.radius_frac = oj.value("radius_frac", o.radius_frac);
        if (o.name.empty()) o.name = o.kind;
        cfg.ood_sets.push_back(std::move(o));
    }
    for (const json& lj : j.value("backbone", json::array()))
        cfg.backbone.push_back(layer_cfg_from_json(lj));
    if (j.contains("subtasks")) {
        const json& sj = j["subtasks"];
        cfg.subtasks.n_splits = sj.value("n_splits", cfg.subtasks.n_splits);
        cfg.subtasks.strategy = sj.value("strategy", cfg.subtasks.strategy);
        cfg.subtasks.seed = sj.value("seed", cfg.subtasks.seed);
        cfg.subtasks.groups =
            sj.value("groups", std::vector<std::vector<int>>{});
        if (sj.contains("semantic_table"))
            for (const auto& [key, value] : sj["semantic_table"].items())
                cfg.subtasks.semantic_table[std::stoi(key)] = value.get<std::string>();
        cfg.subtasks.semantic_table_path =
            sj.value("semantic_table_path", cfg.subtasks.semantic_table_path);
    }
    if (j.contains("train")) {
        const json& tj = j["train"];
        TrainConfig& t = cfg.train;
        t.epochs = tj.value("epochs", t.epochs);
        t.warmup_epochs = tj.value("warmup_epochs", t.warmup_epochs);
        t.lr = tj.value("lr", t.lr);
        t.momentum = tj.value("momentum", t.momentum);
        t.weight_decay = tj.value("weight_decay", t.weight_decay);
        t.batch_size = tj.value("batch_size", t.batch_size);
        t.lambda = tj.value("lambda", t.lambda);
        t.beta = tj.value("beta", t.beta);
        t.mct_threshold = tj.value("mct_threshold", t.mct_threshold);
        t.k_fraction = tj.value("k_fraction", t.k_fraction);
        t.prune_interval = tj.value("prune_interval", t.prune_interval);
        t.n_remove_fraction = tj.value("n_remove_fraction", t.n_remove_fraction);
        t.flops_budget = tj.value("flops_budget", t.flops_budget);
        t.seed = tj.value("seed", t.seed);
        if (tj.contains("ood_target_mode"))
            t.ood_target_mode = ood_mode_from_name(tj["ood_target_mode"].get<std::string>());
        t.sensitivity_batch = tj.value("sensitivity_batch", t.sensitivity_batch);
        t.dump_sensitivity = tj.value("dump_sensitivity", t.dump_sensitivity);
    }
    cfg.baseline = j.value("baseline", cfg.baseline);
    cfg.ensemble_size = j.value("ensemble_size", cfg.ensemble_size);
    cfg.output_dir = j.value("output_dir", cfg.output_dir);
    return cfg;
}

void ExperimentConfig::validate() const {
    namespace fs = std::filesystem;
    std::vector<std::string> bad;
    auto must_exist = [&bad](const std::string& path, const std::string& key) {
        if (!path.empty() && !fs::exists(path)) bad.push_back(key + " (missing: " + path + ")");
    };
    if (dataset.kind == "cifar_bin") {
        for (const auto& p : dataset.train_paths) must_exist(p, "dataset.train_paths");
        for (const auto& p : dataset.test_paths) must_exist(p, "dataset.test_paths");
    } else if (dataset.kind == "image_dir") {
        must_exist(dataset.train_labels, "dataset.train_labels");
        must_exist(dataset.test_labels, "dataset.test_labels");
    } else if (dataset.kind == "file") {
        must_exist(dataset.train_file, "dataset.train_file");
        must_exist(dataset.test_file, "dataset.test_file");
    }
    must_exist(subtasks.semantic_table_path, "subtasks.semantic_table_path");
    if (dataset.kind != "blobs" && dataset.kind != "cifar_bin" && dataset.kind != "image_dir" &&
        dataset.kind != "file")
        bad.push_back("dataset.kind");
    if (backbone.empty()) bad.push_back("backbone");
    if (subtasks.n_splits < 1) bad.push_back("subtasks.n_splits");
    if (subtasks.strategy != "random" && subtasks.strategy != "semantic" &&
        subtasks.strategy != "explicit")
        bad.push_back("subtasks.strategy");
    if (train.epochs < 1) bad.push_back("train.epochs");
    if (train.batch_size < 1) bad.push_back("train.batch_size");
    if (train.prune_interval < 1) bad.push_back("train.prune_interval");
    if (!(train.beta >= 0.0 && train.beta < 1.0)) bad.push_back("train.beta");
    if (train.lambda < 0.0) bad.push_back("train.lambda");
    if (!(train.k_fraction > 0.0 && train.k_fraction <= 1.0)) bad.push_back("train.k_fraction");
    if (baseline != "split_ensemble" && baseline != "single_model" &&
        baseline != "naive_ensemble")
        bad.push_back("baseline");
    for (size_t i = 0; i < ood_sets.size(); ++i) {
        const OodSetCfg& o = ood_sets[i];
        if (o.kind != "gaussian" && o.kind != "uniform" && o.kind != "blobs_ood" &&
            o.kind != "file")
            bad.push_back("ood_sets[" + std::to_string(i) + "].kind");
    }
    if (!bad.empty()) {
        std::ostringstream os;
        os << "invalid config keys:";
        for (const auto& k : bad) os << ' ' << k;
        throw std::invalid_argument(os.str());
    }
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw std::runtime_error("load_config_file: cannot open " + path);
    json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("load_config_file: parse error in " + path + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

void apply_override(json& config_json, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("override must look like key.path=value: " + assignment);
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    json* cursor = &config_json;
    std::istringstream is(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(is, part, '.')) parts.push_back(part);
    if (parts.empty()) throw std::invalid_argument("empty override path");
    for (size_t i = 0; i + 1 < parts.size(); ++i) cursor = &((*cursor)[parts[i]]);

    json value;
    try {
        value = json::parse(raw);
    } catch (...) {
        value = raw;  // plain string
    }
    (*cursor)[parts.back()] = value;
}

}  // namespace splitens
