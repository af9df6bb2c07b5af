#include "splitens/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "splitens/rng.hpp"

namespace splitens {

namespace {
void check_arg(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}
}  // namespace

double threshold_at_tpr(const std::vector<double>& id_scores, double tpr) {
    check_arg(!id_scores.empty(), "threshold_at_tpr: empty score set");
    check_arg(tpr > 0.0 && tpr <= 1.0, "threshold_at_tpr: tpr out of (0,1]");
    std::vector<double> sorted = id_scores;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    const int need = static_cast<int>(
        std::ceil(tpr * static_cast<double>(sorted.size()) - 1e-12));
    return sorted[need - 1];  // the need-th largest: any higher cut loses it
}

std::pair<double, double> fpr_detection_error(const std::vector<double>& id_scores,
                                              const std::vector<double>& ood_scores,
                                              double tpr) {
    check_arg(!id_scores.empty() && !ood_scores.empty(), "fpr_detection_error: empty scores");
    const double thr = threshold_at_tpr(id_scores, tpr);
    int fp = 0;
    for (double s : ood_scores) fp += s >= thr ? 1 : 0;
    const double fpr = static_cast<double>(fp) / static_cast<double>(ood_scores.size());
    const double det_error = 0.5 * (1.0 - tpr) + 0.5 * fpr;
    return {fpr, det_error};
}

double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores) {
    check_arg(!id_scores.empty() && !ood_scores.empty(), "auroc: empty scores");
    // Mann-Whitney U via average ranks over the pooled sample.
    struct Entry {
        double score;
        bool positive;
    };
    std::vector<Entry> pooled;
    pooled.reserve(id_scores.size() + ood_scores.size());
    for (double s : id_scores) pooled.push_back({s, true});
    for (double s : ood_scores) pooled.push_back({s, false});
    std::sort(pooled.begin(), pooled.end(),
              [](const Entry& a, const Entry& b) { return a.score < b.score; });
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < pooled.size()) {
        size_t j = i;
        while (j < pooled.size() && pooled[j].score == pooled[i].score) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (size_t t = i; t < j; ++t)
            if (pooled[t].positive) rank_sum_pos += avg_rank;
        i = j;
    }
    const double n_pos = static_cast<double>(id_scores.size());
    const double n_neg = static_cast<double>(ood_scores.size());
    const double u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    return u / (n_pos * n_neg);
}

double aupr(const std::vector<double>& id_scores, const std::vector<double>& ood_scores) {
    check_arg(!id_scores.empty() && !ood_scores.empty(), "aupr: empty scores");
    struct Entry {
        double score;
        bool positive;
    };
    std::vector<Entry> pooled;
    for (double s : id_scores) pooled.push_back({s, true});
    for (double s : ood_scores) pooled.push_back({s, false});
    std::sort(pooled.begin(), pooled.end(),
              [](const Entry& a, const Entry& b) { return a.score > b.score; });
    const double n_pos = static_cast<double>(id_scores.size());
    double tp = 0.0, fp = 0.0, area = 0.0, prev_recall = 0.0;
    size_t i = 0;
    while (i < pooled.size()) {
        size_t j = i;
        while (j < pooled.size() && pooled[j].score == pooled[i].score) ++j;
        for (size_t t = i; t < j; ++t) (pooled[t].positive ? tp : fp) += 1.0;
        const double recall = tp / n_pos;
        const double precision = tp / (tp + fp);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return area;
}

MetricsReport compute_metrics(double accuracy, const std::vector<double>& id_scores,
                              const std::vector<double>& ood_scores) {
    MetricsReport r;
    r.accuracy = accuracy;
    auto [fpr, det] = fpr_detection_error(id_scores, ood_scores, 0.95);
    r.fpr_at_95tpr = fpr;
    r.detection_error_at_95tpr = det;
    r.auroc = auroc(id_scores, ood_scores);
    r.aupr = aupr(id_scores, ood_scores);
    return r;
}

Dataset gen_noise_ood(NoiseKind kind, const Shape& shape, int count, uint64_t seed) {
    check_arg(count >= 1, "gen_noise_ood: count must be >= 1");
    Dataset ds;
    ds.images = Tensor(count, shape.c, shape.h, shape.w);
    ds.labels.assign(count, -1);
    ds.classes = 0;
    Rng rng(mix_seed(seed, kind == NoiseKind::gaussian ? 0x6a5 : 0x0f1));
    if (kind == NoiseKind::gaussian) {
        for (double& v : ds.images.data)
            v = std::clamp(rng.normal(0.5, 0.25), 0.0, 1.0);
    } else {
        for (double& v : ds.images.data) v = rng.uniform01();
    }
    return ds;
}

}  // namespace splitens
