#include "splitens/task_split.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "splitens/rng.hpp"

namespace splitens {

namespace {
constexpr double kSigmoidEps = 1e-7;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double clamp_prob(double p) {
    return std::min(1.0 - kSigmoidEps, std::max(kSigmoidEps, p));
}
}  // namespace

std::pair<int, int> SubtaskSpec::locate(int original_label) const {
    for (int i = 0; i < num_subtasks(); ++i) {
        const auto& g = groups[i];
        for (int j = 0; j < static_cast<int>(g.size()); ++j)
            if (g[j] == original_label) return {i, j};
    }
    throw std::invalid_argument("SubtaskSpec::locate: label " + std::to_string(original_label) +
                                " not covered by any group");
}

void SubtaskSpec::validate() const {
    if (total_classes < 1) throw std::invalid_argument("SubtaskSpec: total_classes < 1");
    if (per_class_count < 1) throw std::invalid_argument("SubtaskSpec: per_class_count < 1");
    if (groups.empty()) throw std::invalid_argument("SubtaskSpec: no groups");
    std::vector<int> seen(total_classes, 0);
    for (const auto& g : groups) {
        if (g.empty()) throw std::invalid_argument("SubtaskSpec: empty group");
        for (int cls : g) {
            if (cls < 0 || cls >= total_classes)
                throw std::invalid_argument("SubtaskSpec: class id out of range");
            if (seen[cls]++) throw std::invalid_argument("SubtaskSpec: class in two groups");
        }
    }
    for (int cls = 0; cls < total_classes; ++cls)
        if (!seen[cls])
            throw std::invalid_argument("SubtaskSpec: class " + std::to_string(cls) +
                                        " not assigned to any group");
}

TargetVector convert_label(const SubtaskSpec& spec, int subtask_index, int original_label,
                           OodTargetMode mode) {
    if (subtask_index < 0 || subtask_index >= spec.num_subtasks())
        throw std::invalid_argument("convert_label: bad subtask index");
    if (original_label < 0 || original_label >= spec.total_classes)
        throw std::invalid_argument("convert_label: label out of range");

    const int k = spec.group_size(subtask_index);
    TargetVector t;
    t.values.assign(k + 1, 0.0);

    const auto& g = spec.groups[subtask_index];
    auto it = std::find(g.begin(), g.end(), original_label);
    if (it != g.end()) {
        t.values[static_cast<size_t>(it - g.begin())] = 1.0;
        return t;
    }
    if (mode == OodTargetMode::one_hot) {
        t.values[k] = 1.0;
        return t;
    }
    // ID slots get 1/N (not 1/(K+1)) so maximum ID confidence on an OOD input
    // is comparable across submodels with different group sizes.
    const double n = static_cast<double>(spec.total_classes);
    for (int j = 0; j < k; ++j) t.values[j] = 1.0 / n;
    t.values[k] = static_cast<double>(spec.total_classes - k) / n;
    return t;
}

namespace {
// 1 - beta^m without cancellation for beta close to 1 and large m.
double one_minus_pow(double beta, double m) {
    if (beta == 0.0) return 1.0;
    return -std::expm1(m * std::log(beta));
}
}  // namespace

ClassBalancedWeights class_balanced_weights(const SubtaskSpec& spec, int subtask_index,
                                            double beta) {
    if (subtask_index < 0 || subtask_index >= spec.num_subtasks())
        throw std::invalid_argument("class_balanced_weights: bad subtask index");
    if (!(beta >= 0.0 && beta < 1.0))
        throw std::invalid_argument("class_balanced_weights: beta must be in [0,1)");

    const int k = spec.group_size(subtask_index);
    const double n = static_cast<double>(spec.per_class_count);
    const double n_ood = static_cast<double>(spec.total_classes - k) * n;

    ClassBalancedWeights cb;
    cb.beta = beta;
    cb.weights.assign(k + 1, 1.0);
    if (beta > 0.0) {
        const double w_id = (1.0 - beta) / one_minus_pow(beta, n);
        const double w_ood = (1.0 - beta) / one_minus_pow(beta, n_ood);
        for (int j = 0; j < k; ++j) cb.weights[j] = w_id;
        cb.weights[k] = n_ood > 0 ? w_ood : w_id;
    }
    return cb;
}

ClassBalancedWeights normalize_mean_one(ClassBalancedWeights w) {
    double sum = 0.0;
    for (double v : w.weights) sum += v;
    if (sum <= 0.0) return w;
    const double scale = static_cast<double>(w.weights.size()) / sum;
    for (double& v : w.weights) v *= scale;
    return w;
}

double cb_bce_loss(const std::vector<double>& logits, const TargetVector& target,
                   const ClassBalancedWeights& weights) {
    if (logits.size() != target.values.size() || logits.size() != weights.weights.size())
        throw std::invalid_argument("cb_bce_loss: shape mismatch");
    double loss = 0.0;
    for (size_t j = 0; j < logits.size(); ++j) {
        const double p = clamp_prob(sigmoid(logits[j]));
        const double y = target.values[j];
        loss -= weights.weights[j] * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    return loss;
}

double cb_bce_loss(const Tensor& logits, const std::vector<TargetVector>& targets,
                   const ClassBalancedWeights& weights, Tensor* grad) {
    const int b = logits.n;
    const int width = logits.c * logits.h * logits.w;
    if (static_cast<int>(targets.size()) != b)
        throw std::invalid_argument("cb_bce_loss: batch size mismatch");
    if (width != static_cast<int>(weights.weights.size()))
        throw std::invalid_argument("cb_bce_loss: width mismatch");
    if (grad) {
        *grad = Tensor(logits.n, logits.c, logits.h, logits.w);
    }
    double total = 0.0;
    const double inv_b = 1.0 / static_cast<double>(b);
    for (int i = 0; i < b; ++i) {
        if (static_cast<int>(targets[i].values.size()) != width)
            throw std::invalid_argument("cb_bce_loss: target width mismatch");
        for (int j = 0; j < width; ++j) {
            const double x = logits.at2(i, j);
            const double s = sigmoid(x);
            const double p = clamp_prob(s);
            const double y = targets[i].values[j];
            const double w = weights.weights[j];
            total -= w * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
            if (grad) grad->at2(i, j) = w * (s - y) * inv_b;
        }
    }
    return total * inv_b;
}

double softmax_cross_entropy(const std::vector<double>& logits, int label,
                             std::vector<double>* grad) {
    if (label < 0 || label >= static_cast<int>(logits.size()))
        throw std::invalid_argument("softmax_cross_entropy: label out of range");
    const double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double x : logits) sum += std::exp(x - mx);
    const double logz = mx + std::log(sum);
    if (grad) {
        grad->resize(logits.size());
        for (size_t j = 0; j < logits.size(); ++j) {
            (*grad)[j] = std::exp(logits[j] - logz);
        }
        (*grad)[label] -= 1.0;
    }
    return logz - logits[label];
}

double ensemble_loss(const SubtaskSpec& spec,
                     const std::vector<std::vector<double>>& submodel_logits,
                     const std::vector<TargetVector>& converted_targets,
                     const std::vector<ClassBalancedWeights>& weights, int original_label,
                     double lambda) {
    const int m = spec.num_subtasks();
    if (static_cast<int>(submodel_logits.size()) != m ||
        static_cast<int>(converted_targets.size()) != m ||
        static_cast<int>(weights.size()) != m)
        throw std::invalid_argument("ensemble_loss: submodel count mismatch");
    if (lambda < 0.0) throw std::invalid_argument("ensemble_loss: lambda < 0");

    double total = 0.0;
    std::vector<double> concat(spec.total_classes, 0.0);
    int pos = 0;
    for (int i = 0; i < m; ++i) {
        total += cb_bce_loss(submodel_logits[i], converted_targets[i], weights[i]);
        for (int j = 0; j < spec.group_size(i); ++j) concat[pos++] = submodel_logits[i][j];
    }
    // Concatenated argmax order follows group order, so the label index in
    // concat space is the rank of the class inside the flattened groups.
    int concat_label = 0;
    {
        auto [si, within] = spec.locate(original_label);
        for (int i = 0; i < si; ++i) concat_label += spec.group_size(i);
        concat_label += within;
    }
    if (lambda > 0.0) total += lambda * softmax_cross_entropy(concat, concat_label);
    return total;
}

Tensor concat_id_logits(const SubtaskSpec& spec, const std::vector<Tensor>& submodel_logits) {
    const int m = spec.num_subtasks();
    if (static_cast<int>(submodel_logits.size()) != m)
        throw std::invalid_argument("concat_id_logits: submodel count mismatch");
    const int b = submodel_logits.empty() ? 0 : submodel_logits[0].n;
    Tensor out = Tensor::batch_vec(b, spec.total_classes);
    int pos = 0;
    for (int i = 0; i < m; ++i) {
        if (submodel_logits[i].n != b || submodel_logits[i].shape().features() != spec.head_width(i))
            throw std::invalid_argument("concat_id_logits: logits width mismatch");
        for (int s = 0; s < b; ++s)
            for (int j = 0; j < spec.group_size(i); ++j)
                out.at2(s, pos + j) = submodel_logits[i].at2(s, j);
        pos += spec.group_size(i);
    }
    return out;
}

double ensemble_loss_batch(const SubtaskSpec& spec, const std::vector<Tensor>& submodel_logits,
                           const std::vector<std::vector<TargetVector>>& targets,
                           const std::vector<ClassBalancedWeights>& weights,
                           const std::vector<int>& labels, double lambda,
                           std::vector<Tensor>* grads, double* ce_component) {
    const int m = spec.num_subtasks();
    if (static_cast<int>(submodel_logits.size()) != m || static_cast<int>(targets.size()) != m)
        throw std::invalid_argument("ensemble_loss_batch: submodel count mismatch");
    const int b = static_cast<int>(labels.size());

    if (grads) grads->resize(m);
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
        Tensor* g = grads ? &(*grads)[i] : nullptr;
        total += cb_bce_loss(submodel_logits[i], targets[i], weights[i], g);
    }

    // Map original label -> index in the concatenated ID vector.
    std::vector<int> concat_index(spec.total_classes, -1);
    {
        int pos = 0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < spec.group_size(i); ++j) concat_index[spec.groups[i][j]] = pos++;
    }

    double ce = 0.0;
    if (lambda > 0.0) {
        Tensor concat = concat_id_logits(spec, submodel_logits);
        const double inv_b = 1.0 / static_cast<double>(b);
        std::vector<double> row(spec.total_classes), grad_row;
        for (int s = 0; s < b; ++s) {
            for (int j = 0; j < spec.total_classes; ++j) row[j] = concat.at2(s, j);
            ce += softmax_cross_entropy(row, concat_index[labels[s]],
                                        grads ? &grad_row : nullptr) * inv_b;
            if (grads) {
                int pos = 0;
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < spec.group_size(i); ++j)
                        (*grads)[i].at2(s, j) += lambda * grad_row[pos + j] * inv_b;
                    pos += spec.group_size(i);
                }
            }
        }
        total += lambda * ce;
    }
    if (ce_component) *ce_component = ce;
    return total;
}

SubtaskSpec group_classes(int total_classes, const GroupingOptions& opts, int per_class_count) {
    SubtaskSpec spec;
    spec.total_classes = total_classes;
    spec.per_class_count = per_class_count;

    switch (opts.strategy) {
        case GroupingStrategy::explicit_groups:
            spec.groups = opts.explicit_list;
            break;
        case GroupingStrategy::random: {
            if (opts.n_splits < 1 || opts.n_splits > total_classes)
                throw std::invalid_argument("group_classes: bad n_splits");
            std::vector<int> ids(total_classes);
            std::iota(ids.begin(), ids.end(), 0);
            Rng rng(opts.seed);
            rng.shuffle(ids);
            spec.groups.assign(opts.n_splits, {});
            const int base = total_classes / opts.n_splits;
            const int extra = total_classes % opts.n_splits;
            int pos = 0;
            for (int i = 0; i < opts.n_splits; ++i) {
                const int sz = base + (i < extra ? 1 : 0);
                spec.groups[i].assign(ids.begin() + pos, ids.begin() + pos + sz);
                std::sort(spec.groups[i].begin(), spec.groups[i].end());
                pos += sz;
            }
            break;
        }
        case GroupingStrategy::semantic: {
            if (opts.n_splits < 1) throw std::invalid_argument("group_classes: bad n_splits");
            if (opts.semantic_table.empty())
                throw std::invalid_argument("group_classes: semantic strategy needs a table");
            // supergroup name -> member classes
            std::map<std::string, std::vector<int>> supers;
            for (int cls = 0; cls < total_classes; ++cls) {
                auto it = opts.semantic_table.find(cls);
                if (it == opts.semantic_table.end())
                    throw std::invalid_argument("group_classes: class " + std::to_string(cls) +
                                                " missing from semantic table");
                supers[it->second].push_back(cls);
            }
            if (static_cast<int>(supers.size()) < opts.n_splits)
                throw std::invalid_argument("group_classes: fewer supergroups than splits");
            // Largest supergroups first, each to the currently smallest subtask,
            // so whole supergroups stay together and sizes balance out.
            std::vector<std::pair<std::string, std::vector<int>>> ordered(supers.begin(),
                                                                          supers.end());
            std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
                return a.second.size() > b.second.size();
            });
            spec.groups.assign(opts.n_splits, {});
            for (auto& [name, members] : ordered) {
                int best = 0;
                for (int i = 1; i < opts.n_splits; ++i)
                    if (spec.groups[i].size() < spec.groups[best].size()) best = i;
                spec.groups[best].insert(spec.groups[best].end(), members.begin(), members.end());
            }
            for (auto& g : spec.groups) std::sort(g.begin(), g.end());
            break;
        }
    }
    spec.validate();
    return spec;
}

}  // namespace splitens
