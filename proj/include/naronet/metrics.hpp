#pragma once

#include "naronet/common.hpp"

#include <vector>

namespace naronet::metrics {

struct CurvePoint {
    double x;
    double y;
    double threshold;
};

/// ROC points (fpr, tpr) from descending thresholds; tied scores move diagonally.
std::vector<CurvePoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& positive);
/// Precision-recall points (recall, precision).
std::vector<CurvePoint> pr_curve(const std::vector<double>& scores, const std::vector<int>& positive);
double auc_trapezoid(const std::vector<CurvePoint>& roc);
/// P(score_pos > score_neg) + 0.5 P(tie), computed from midranks.
double auc_rank(const std::vector<double>& scores, const std::vector<int>& positive);

/// Binary: AUC of the class-1 probability. Multi-class: mean one-vs-rest AUC over
/// classes present in both roles. NaN when undefined.
double auc_from_probabilities(const Mat& proba, const std::vector<int>& labels);

/// Row = true class, column = predicted class.
Eigen::MatrixXi confusion_matrix(const std::vector<int>& truth, const std::vector<int>& predicted, int classes);

struct Interval {
    double lower;
    double upper;
};

double accuracy(const std::vector<int>& truth, const std::vector<int>& predicted);
/// 95% normal-approximation interval clipped to [0, 1].
Interval accuracy_ci(double acc, std::size_t n);

std::vector<int> argmax_rows(const Mat& proba);

} // namespace naronet::metrics
