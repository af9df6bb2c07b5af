#pragma once

#include <vector>

#include "splitens/task_split.hpp"
#include "splitens/tensor.hpp"

namespace splitens {

// Ensemble view of one input: concatenated ID logits, per-submodel reject
// probabilities, the argmax class and the product uncertainty score.
struct EnsembleOutput {
    std::vector<double> concatenated_id_logits;  // width N, group order
    std::vector<double> per_submodel_ood_prob;
    int predicted_class = -1;  // original class id
    double uncertainty_score = 0.0;
};

// Per class y owned by submodel i: p(y|z) = softmax_i(y) * (1 - softmax_i(OOD)),
// softmax over submodel i's own slots. The score is the max over all N
// classes; classification is the argmax of the raw concatenated ID logits.
EnsembleOutput predict(const SubtaskSpec& spec,
                       const std::vector<std::vector<double>>& submodel_logits);

std::vector<EnsembleOutput> predict_batch(const SubtaskSpec& spec,
                                          const std::vector<Tensor>& submodel_logits);

enum class Verdict { id, ood };

// OOD iff score < threshold (strict).
Verdict ood_decision(double score, double threshold);

// Max softmax probability, the single-model baseline score.
double max_softmax_probability(const std::vector<double>& logits);

}  // namespace splitens
