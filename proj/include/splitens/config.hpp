#pragma once

#include <map>
#include <string>
#include <vector>

#include "splitens/data.hpp"
#include "splitens/layers.hpp"
#include "splitens/task_split.hpp"
#include "splitens/trainer.hpp"

namespace splitens {

struct DatasetCfg {
    std::string kind = "blobs";  // blobs | cifar_bin | image_dir | file
    // blobs
    BlobsCfg blobs;
    int blobs_test_per_class = 100;
    // cifar_bin
    std::vector<std::string> train_paths, test_paths;
    int classes = 0, channels = 3, height = 32, width = 32, label_bytes = 1;
    // image_dir
    std::string train_dir, train_labels, test_dir, test_labels;
    // file (flat binary datasets)
    std::string train_file, test_file;

    bool operator==(const DatasetCfg&) const = default;
};

inline bool operator==(const BlobsCfg& a, const BlobsCfg& b) {
    return a.classes == b.classes && a.per_class == b.per_class && a.height == b.height &&
           a.width == b.width && a.channels == b.channels && a.blob_sigma == b.blob_sigma &&
           a.center_jitter == b.center_jitter && a.amplitude_jitter == b.amplitude_jitter &&
           a.noise == b.noise && a.ring_radius_frac == b.ring_radius_frac &&
           a.ood_angle_deg == b.ood_angle_deg && a.seed == b.seed;
}

struct OodSetCfg {
    std::string name;
    std::string kind = "gaussian";  // gaussian | uniform | blobs_ood | file
    int count = 1000;
    uint64_t seed = 1;
    std::string path;         // kind == file
    double angle_deg = -2.0;  // blobs_ood: cluster angle; -2 inherits the dataset's
    double radius_frac = -1.0;  // blobs_ood: cluster radius; -1 inherits the ring

    bool operator==(const OodSetCfg&) const = default;
};

struct SubtasksCfg {
    int n_splits = 2;
    std::string strategy = "random";  // random | semantic | explicit
    std::vector<std::vector<int>> groups;       // explicit
    std::map<int, std::string> semantic_table;  // inline class -> supergroup
    std::string semantic_table_path;            // or a JSON file {"0": "name", ...}
    uint64_t seed = 0;

    bool operator==(const SubtasksCfg&) const = default;
};

struct ExperimentConfig {
    DatasetCfg dataset;
    std::vector<OodSetCfg> ood_sets;
    BackboneSpec backbone;
    SubtasksCfg subtasks;
    TrainConfig train;
    std::string baseline = "split_ensemble";  // split_ensemble | single_model | naive_ensemble
    int ensemble_size = 0;                    // naive ensemble members; 0 -> n_splits
    std::string output_dir = "runs/out";

    json to_json() const;
    static ExperimentConfig from_json(const json& j);

    // Lists every offending key in one error.
    void validate() const;
};

bool operator==(const LayerCfg& a, const LayerCfg& b);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

ExperimentConfig load_config_file(const std::string& path);

// "train.epochs=5" style dotted-path override onto a config document.
// Values parse as JSON when possible, otherwise as strings.
void apply_override(json& config_json, const std::string& assignment);

std::string ood_mode_name(OodTargetMode mode);
OodTargetMode ood_mode_from_name(const std::string& name);

}  // namespace splitens
