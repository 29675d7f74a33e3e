#include "naronet/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace naronet::stats {

std::vector<double> midranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double mid = (static_cast<double>(i + j) / 2.0) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            rank[order[k]] = mid;
        }
        i = j + 1;
    }
    return rank;
}

namespace {

void require_nonempty(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.empty() || y.empty()) {
        throw std::invalid_argument("Mann-Whitney test needs two non-empty samples");
    }
}

std::vector<double> pooled(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> all = x;
    all.insert(all.end(), y.begin(), y.end());
    return all;
}

} // namespace

double mann_whitney_exact_p(const std::vector<double>& x, const std::vector<double>& y) {
    require_nonempty(x, y);
    const std::vector<double> ranks = midranks(pooled(x, y));
    const std::size_t n1 = x.size(), n = ranks.size();
    // Doubled midranks are integers, so the rank-sum distribution is a subset-sum count.
    std::vector<int> r2(n);
    for (std::size_t i = 0; i < n; ++i) {
        r2[i] = static_cast<int>(std::lround(2.0 * ranks[i]));
    }
    const int max_sum = std::accumulate(r2.begin(), r2.end(), 0);
    std::vector<std::vector<double>> ways(n1 + 1, std::vector<double>(static_cast<std::size_t>(max_sum) + 1, 0.0));
    ways[0][0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = std::min(n1, i + 1); k >= 1; --k) {
            for (int s = max_sum; s >= r2[i]; --s) {
                ways[k][s] += ways[k - 1][s - r2[i]];
            }
        }
    }
    int observed = 0;
    for (std::size_t i = 0; i < n1; ++i) {
        observed += r2[i];
    }
    // Expected doubled rank sum: n1 (n + 1).
    const long centre2 = static_cast<long>(n1) * static_cast<long>(n + 1);
    const long dev = std::labs(static_cast<long>(observed) - centre2);
    double total = 0.0, extreme = 0.0;
    for (int s = 0; s <= max_sum; ++s) {
        const double w = ways[n1][s];
        if (w == 0.0) {
            continue;
        }
        total += w;
        if (std::labs(static_cast<long>(s) - centre2) >= dev) {
            extreme += w;
        }
    }
    return std::min(1.0, extreme / total);
}

double mann_whitney_normal_p(const std::vector<double>& x, const std::vector<double>& y) {
    require_nonempty(x, y);
    const std::vector<double> all = pooled(x, y);
    const std::vector<double> ranks = midranks(all);
    const double n1 = static_cast<double>(x.size()), n2 = static_cast<double>(y.size());
    const double n = n1 + n2;
    double r1 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        r1 += ranks[i];
    }
    const double u = r1 - n1 * (n1 + 1.0) / 2.0;
    std::vector<double> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    double tie_term = 0.0;
    for (std::size_t i = 0; i < sorted.size();) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j] == sorted[i]) {
            ++j;
        }
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if (var <= 0.0) {
        return 1.0;
    }
    const double z = std::max(0.0, std::abs(u - n1 * n2 / 2.0) - 0.5) / std::sqrt(var);
    return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

MannWhitneyResult mann_whitney(const std::vector<double>& x, const std::vector<double>& y) {
    require_nonempty(x, y);
    MannWhitneyResult r;
    const std::vector<double> ranks = midranks(pooled(x, y));
    double r1 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        r1 += ranks[i];
    }
    r.u = r1 - static_cast<double>(x.size()) * (static_cast<double>(x.size()) + 1.0) / 2.0;
    r.exact = x.size() <= kExactLimit && y.size() <= kExactLimit;
    r.p = r.exact ? mann_whitney_exact_p(x, y) : mann_whitney_normal_p(x, y);
    return r;
}

std::vector<double> benjamini_hochberg(const std::vector<double>& p) {
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> adj(m);
    double running = 1.0;
    for (std::size_t k = m; k-- > 0;) {
        const double v = p[order[k]] * static_cast<double>(m) / static_cast<double>(k + 1);
        running = std::min(running, v);
        adj[order[k]] = std::min(1.0, running);
    }
    return adj;
}

double median(std::vector<double> v) {
    if (v.empty()) {
        throw std::invalid_argument("median of empty sample");
    }
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

} // namespace naronet::stats
