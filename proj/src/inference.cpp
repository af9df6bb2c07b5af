#include "splitens/inference.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace splitens {

namespace {
// Stable softmax; tolerates -inf entries (they get probability zero).
std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : logits) mx = std::max(mx, x);
    std::vector<double> p(logits.size(), 0.0);
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}
}  // namespace

double max_softmax_probability(const std::vector<double>& logits) {
    auto p = softmax(logits);
    return *std::max_element(p.begin(), p.end());
}

EnsembleOutput predict(const SubtaskSpec& spec,
                       const std::vector<std::vector<double>>& submodel_logits) {
    const int m = spec.num_subtasks();
    if (static_cast<int>(submodel_logits.size()) != m)
        throw std::invalid_argument("predict: submodel count mismatch");

    EnsembleOutput out;
    out.concatenated_id_logits.reserve(spec.total_classes);
    out.per_submodel_ood_prob.resize(m);

    double best_score = -1.0;
    double best_logit = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i) {
        const auto& logits = submodel_logits[i];
        const int k = spec.group_size(i);
        if (static_cast<int>(logits.size()) != k + 1)
            throw std::invalid_argument("predict: logits width mismatch");
        const auto p = softmax(logits);
        const double p_valid = 1.0 - p[k];  // p(f_i | z)
        out.per_submodel_ood_prob[i] = p[k];
        for (int j = 0; j < k; ++j) {
            out.concatenated_id_logits.push_back(logits[j]);
            if (logits[j] > best_logit) {
                best_logit = logits[j];
                out.predicted_class = spec.groups[i][j];
            }
            best_score = std::max(best_score, p[j] * p_valid);
        }
    }
    out.uncertainty_score = best_score;
    return out;
}

std::vector<EnsembleOutput> predict_batch(const SubtaskSpec& spec,
                                          const std::vector<Tensor>& submodel_logits) {
    const int m = spec.num_subtasks();
    if (static_cast<int>(submodel_logits.size()) != m)
        throw std::invalid_argument("predict_batch: submodel count mismatch");
    const int b = m > 0 ? submodel_logits[0].n : 0;
    std::vector<EnsembleOutput> out;
    out.reserve(b);
    std::vector<std::vector<double>> row(m);
    for (int s = 0; s < b; ++s) {
        for (int i = 0; i < m; ++i) {
            const int width = submodel_logits[i].shape().features();
            row[i].resize(width);
            for (int j = 0; j < width; ++j) row[i][j] = submodel_logits[i].at2(s, j);
        }
        out.push_back(predict(spec, row));
    }
    return out;
}

Verdict ood_decision(double score, double threshold) {
    return score < threshold ? Verdict::ood : Verdict::id;
}

}  // namespace splitens
