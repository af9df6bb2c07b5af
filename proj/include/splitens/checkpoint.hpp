#pragma once

#include <string>

#include "splitens/trainer.hpp"
#include "splitens/tree_model.hpp"

namespace splitens {

// Versioned binary checkpoint: JSON header (schema tag, topology, history,
// resolved config, trainer RNG) followed by the raw parameter payload, which
// includes SGD momentum so training resumes where it stopped.
struct Checkpoint {
    TreeModel model;
    TrainHistory history;
    json config;  // opaque resolved experiment config
    int epochs_done = 0;
    std::string rng_state;
};

void save_checkpoint(const std::string& path, const TreeModel& model,
                     const TrainHistory& history, const json& config, int epochs_done,
                     const std::string& rng_state);

// Throws std::runtime_error with the path on missing/corrupt files.
Checkpoint load_checkpoint(const std::string& path);

json subtask_spec_to_json(const SubtaskSpec& spec);
SubtaskSpec subtask_spec_from_json(const json& j);

// Resume guard: the checkpoint must have been trained on the same subtask
// decomposition the caller is about to continue with.
void ensure_spec_matches(const Checkpoint& ckpt, const SubtaskSpec& expected);

}  // namespace splitens
