#pragma once

#include <string>
#include <utility>
#include <vector>

#include "splitens/checkpoint.hpp"
#include "splitens/config.hpp"
#include "splitens/evaluation.hpp"

namespace splitens {

struct LoadedData {
    Dataset train;
    Dataset test;
    std::vector<std::pair<std::string, Dataset>> ood_sets;
};

// Shared by every baseline mode: identical pipelines, identical splits.
LoadedData load_data(const ExperimentConfig& cfg, bool load_ood = true);

SubtaskSpec build_subtask_spec(const ExperimentConfig& cfg, const Dataset& train);

// Resolves $SPLITENS_OUT_ROOT against relative output dirs.
std::string resolve_output_dir(const std::string& dir);

struct TrainOutcome {
    std::string run_dir;
    TrainHistory history;
    double test_accuracy = 0.0;
    uint64_t final_flops = 0;
    uint64_t flops_budget = 0;
};

// Trains per config (all baseline modes), writing into the run directory:
// resolved_config.json, events.jsonl, model.ckpt (model_<k>.ckpt for naive
// ensembles), arch.json, arch.dot.
TrainOutcome cmd_train(const ExperimentConfig& cfg);

// Evaluates a finished run directory: ID accuracy plus one metrics row per
// OOD set and a mean row. Writes metrics.json / metrics.csv and returns the
// JSON document.
json cmd_eval(const std::string& run_dir);

// Ablation grid over ood_target_mode / mct_threshold / n_splits / grouping
// strategy, optionally multi-seed. Cell failures are recorded and the grid
// continues. Writes ablate.json / ablate.csv under the base output dir.
json cmd_ablate(const ExperimentConfig& base, const json& grid);

void cmd_export_arch(const std::string& checkpoint_path, const std::string& out_prefix);

void cmd_gen_ood(const std::string& kind, const Shape& shape, int count, uint64_t seed,
                 const std::string& out_path);

// OOD detection scores for a run's model(s) on a dataset, under the run's
// baseline convention (product score / MSP / mean-logit MSP).
std::vector<double> score_dataset(const std::string& run_dir, const Dataset& ds);

}  // namespace splitens
