#pragma once

#include <vector>

#include "splitens/data.hpp"

namespace splitens {

// All rates as fractions in [0, 1]; reporting layers scale to percent.
struct MetricsReport {
    double accuracy = 0.0;
    double fpr_at_95tpr = 0.0;
    double detection_error_at_95tpr = 0.0;
    double auroc = 0.0;
    double aupr = 0.0;
};

// Largest threshold that keeps at least `tpr` of the ID scores at or above
// it (lower-interpolation quantile).
double threshold_at_tpr(const std::vector<double>& id_scores, double tpr);

// FPR = fraction of OOD scores >= threshold; detection error is the
// equal-prior error 0.5*(1-tpr) + 0.5*fpr at that threshold.
std::pair<double, double> fpr_detection_error(const std::vector<double>& id_scores,
                                              const std::vector<double>& ood_scores,
                                              double tpr = 0.95);

// Rank statistic with half credit for ties; ID is the positive class.
double auroc(const std::vector<double>& id_scores, const std::vector<double>& ood_scores);

// Area under precision-recall, step interpolation, ID positive.
double aupr(const std::vector<double>& id_scores, const std::vector<double>& ood_scores);

// One OOD row: all four detection metrics at the 95%-TPR operating point.
MetricsReport compute_metrics(double accuracy, const std::vector<double>& id_scores,
                              const std::vector<double>& ood_scores);

enum class NoiseKind { gaussian, uniform };

// Synthetic noise OOD imagery: gaussian pixels N(0.5, 0.25^2) clipped to
// [0,1], or uniform U[0,1]. Byte-identical per seed.
Dataset gen_noise_ood(NoiseKind kind, const Shape& shape, int count, uint64_t seed);

}  // namespace splitens
