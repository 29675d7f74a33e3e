#include "naronet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace naronet::metrics {

namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& positive) {
    if (scores.size() != positive.size()) {
        throw std::invalid_argument("scores and labels differ in length");
    }
}

std::vector<std::size_t> descending_order(const std::vector<double>& scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

} // namespace

std::vector<CurvePoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& positive) {
    check_inputs(scores, positive);
    const double P = static_cast<double>(std::count(positive.begin(), positive.end(), 1));
    const double N = static_cast<double>(positive.size()) - P;
    std::vector<CurvePoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
    const auto order = descending_order(scores);
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (positive[order[i]] ? tp : fp) += 1.0;
        if (i + 1 == order.size() || scores[order[i + 1]] != scores[order[i]]) {
            out.push_back({N > 0 ? fp / N : 0.0, P > 0 ? tp / P : 0.0, scores[order[i]]});
        }
    }
    return out;
}

std::vector<CurvePoint> pr_curve(const std::vector<double>& scores, const std::vector<int>& positive) {
    check_inputs(scores, positive);
    const double P = static_cast<double>(std::count(positive.begin(), positive.end(), 1));
    std::vector<CurvePoint> out{{0.0, 1.0, std::numeric_limits<double>::infinity()}};
    const auto order = descending_order(scores);
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (positive[order[i]] ? tp : fp) += 1.0;
        if (i + 1 == order.size() || scores[order[i + 1]] != scores[order[i]]) {
            out.push_back({P > 0 ? tp / P : 0.0, tp / (tp + fp), scores[order[i]]});
        }
    }
    return out;
}

double auc_trapezoid(const std::vector<CurvePoint>& roc) {
    double area = 0.0;
    for (std::size_t i = 1; i < roc.size(); ++i) {
        area += (roc[i].x - roc[i - 1].x) * (roc[i].y + roc[i - 1].y) / 2.0;
    }
    return area;
}

double auc_rank(const std::vector<double>& scores, const std::vector<int>& positive) {
    check_inputs(scores, positive);
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) {
            ++j;
        }
        const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            rank[order[k]] = mid;
        }
        i = j + 1;
    }
    double P = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (positive[i]) {
            P += 1.0;
            rank_sum += rank[i];
        }
    }
    const double N = static_cast<double>(n) - P;
    if (P == 0.0 || N == 0.0) {
        return std::numeric_limits<double>::quiet_NaN();
    }
    return (rank_sum - P * (P + 1.0) / 2.0) / (P * N);
}

double auc_from_probabilities(const Mat& proba, const std::vector<int>& labels) {
    const Eigen::Index C = proba.cols();
    auto one_vs_rest = [&](Eigen::Index c) {
        std::vector<double> s(labels.size());
        std::vector<int> pos(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            s[i] = proba(static_cast<Eigen::Index>(i), c);
            pos[i] = labels[i] == c ? 1 : 0;
        }
        return auc_rank(s, pos);
    };
    if (C == 2) {
        return one_vs_rest(1);
    }
    double total = 0.0;
    int used = 0;
    for (Eigen::Index c = 0; c < C; ++c) {
        const double a = one_vs_rest(c);
        if (!std::isnan(a)) {
            total += a;
            ++used;
        }
    }
    return used ? total / used : std::numeric_limits<double>::quiet_NaN();
}

Eigen::MatrixXi confusion_matrix(const std::vector<int>& truth, const std::vector<int>& predicted, int classes) {
    if (truth.size() != predicted.size()) {
        throw std::invalid_argument("truth and prediction lengths differ");
    }
    Eigen::MatrixXi m = Eigen::MatrixXi::Zero(classes, classes);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ++m(truth[i], predicted[i]);
    }
    return m;
}

double accuracy(const std::vector<int>& truth, const std::vector<int>& predicted) {
    if (truth.empty() || truth.size() != predicted.size()) {
        throw std::invalid_argument("accuracy needs equal, non-empty label vectors");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        hits += truth[i] == predicted[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

Interval accuracy_ci(double acc, std::size_t n) {
    const double half = n ? 1.959963984540054 * std::sqrt(acc * (1.0 - acc) / static_cast<double>(n)) : 0.0;
    return {std::max(0.0, acc - half), std::min(1.0, acc + half)};
}

std::vector<int> argmax_rows(const Mat& proba) {
    std::vector<int> out(static_cast<std::size_t>(proba.rows()));
    for (Eigen::Index r = 0; r < proba.rows(); ++r) {
        Eigen::Index c;
        proba.row(r).maxCoeff(&c);
        out[static_cast<std::size_t>(r)] = static_cast<int>(c);
    }
    return out;
}

} // namespace naronet::metrics
