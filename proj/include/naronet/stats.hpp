#pragma once

#include <cstddef>
#include <vector>

namespace naronet::stats {

/// 1-based ranks with ties replaced by their average.
std::vector<double> midranks(const std::vector<double>& values);

struct MannWhitneyResult {
    /// U statistic of the first sample.
    double u = 0.0;
    /// Two-sided p-value in (0, 1].
    double p = 1.0;
    bool exact = false;
};

/// Largest group size for which the exact null distribution is enumerated.
inline constexpr std::size_t kExactLimit = 8;

/// Two-sided Mann-Whitney U test. Exact (tie-aware permutation distribution of the rank
/// sum) when both groups have at most kExactLimit members, otherwise the normal
/// approximation with tie and continuity corrections.
MannWhitneyResult mann_whitney(const std::vector<double>& x, const std::vector<double>& y);

/// Exact two-sided p-value by enumerating every assignment of the pooled midranks.
double mann_whitney_exact_p(const std::vector<double>& x, const std::vector<double>& y);
double mann_whitney_normal_p(const std::vector<double>& x, const std::vector<double>& y);

/// Benjamini-Hochberg step-up adjusted p-values, in input order.
std::vector<double> benjamini_hochberg(const std::vector<double>& p);

double median(std::vector<double> v);

} // namespace naronet::stats
