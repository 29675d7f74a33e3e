#include "naronet/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace naronet::cluster {

std::vector<Merge> ward_linkage(const Mat& x) {
    const int M = static_cast<int>(x.rows());
    std::vector<Merge> merges;
    if (M < 2) {
        return merges;
    }
    Mat d(M, M);
    for (int i = 0; i < M; ++i) {
        for (int j = 0; j < M; ++j) {
            d(i, j) = (x.row(i) - x.row(j)).squaredNorm();
        }
    }
    std::vector<int> id(M), size(M, 1);
    std::iota(id.begin(), id.end(), 0);
    std::vector<bool> active(M, true);
    for (int step = 0; step < M - 1; ++step) {
        int bi = -1, bj = -1;
        double best = std::numeric_limits<double>::infinity();
        for (int i = 0; i < M; ++i) {
            if (!active[i]) {
                continue;
            }
            for (int j = i + 1; j < M; ++j) {
                if (active[j] && d(i, j) < best) {
                    best = d(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        merges.push_back({std::min(id[bi], id[bj]), std::max(id[bi], id[bj]), std::sqrt(std::max(0.0, best))});
        for (int k = 0; k < M; ++k) {
            if (!active[k] || k == bi || k == bj) {
                continue;
            }
            const double ni = size[bi], nj = size[bj], nk = size[k];
            const double v = ((ni + nk) * d(bi, k) + (nj + nk) * d(bj, k) - nk * d(bi, bj)) / (ni + nj + nk);
            d(bi, k) = d(k, bi) = v;
        }
        size[bi] += size[bj];
        active[bj] = false;
        id[bi] = M + step;
    }
    return merges;
}

std::vector<int> cut_tree(const std::vector<Merge>& merges, int leaves, int k) {
    k = std::clamp(k, 1, std::max(1, leaves));
    std::vector<int> parent(static_cast<std::size_t>(2 * leaves), -1);
    const int applied = leaves - k;
    for (int i = 0; i < applied; ++i) {
        parent[merges[i].a] = leaves + i;
        parent[merges[i].b] = leaves + i;
    }
    std::vector<int> labels(leaves);
    std::map<int, int> relabel;
    for (int i = 0; i < leaves; ++i) {
        int root = i;
        while (parent[root] >= 0) {
            root = parent[root];
        }
        auto it = relabel.find(root);
        if (it == relabel.end()) {
            it = relabel.emplace(root, static_cast<int>(relabel.size())).first;
        }
        labels[i] = it->second;
    }
    return labels;
}

double silhouette(const Mat& x, const std::vector<int>& labels) {
    const int M = static_cast<int>(x.rows());
    const int k = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    if (k < 2) {
        return 0.0;
    }
    std::vector<int> count(k, 0);
    for (int l : labels) {
        ++count[l];
    }
    double total = 0.0;
    for (int i = 0; i < M; ++i) {
        if (count[labels[i]] == 1) {
            continue;
        }
        std::vector<double> sum(k, 0.0);
        for (int j = 0; j < M; ++j) {
            if (j != i) {
                sum[labels[j]] += (x.row(i) - x.row(j)).norm();
            }
        }
        const double a = sum[labels[i]] / (count[labels[i]] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            if (c != labels[i] && count[c] > 0) {
                b = std::min(b, sum[c] / count[c]);
            }
        }
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / M;
}

Mat standardize_columns(const Mat& x) {
    Mat out = x;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double mu = x.col(c).mean();
        const double sd = std::sqrt((x.col(c).array() - mu).square().mean());
        if (sd > 1e-12 * std::max(1.0, std::abs(mu))) {
            out.col(c) = (x.col(c).array() - mu) / sd;
        } else {
            out.col(c).setZero();
        }
    }
    return out;
}

Subcategories patient_subcategories(const Mat& pir) {
    const int M = static_cast<int>(pir.rows());
    Subcategories best;
    best.labels.assign(M, 0);
    if (M < 4) {
        return best;
    }
    const Mat z = standardize_columns(pir);
    bool all_equal = true;
    for (int i = 1; i < M && all_equal; ++i) {
        all_equal = (z.row(i) - z.row(0)).norm() <= 1e-12;
    }
    if (all_equal) {
        return best;
    }
    const auto merges = ward_linkage(z);
    best.silhouette = -std::numeric_limits<double>::infinity();
    for (int k = 2; k <= std::min(8, M - 1); ++k) {
        auto labels = cut_tree(merges, M, k);
        const double s = silhouette(z, labels);
        if (s > best.silhouette + 1e-12) {
            best.silhouette = s;
            best.k = k;
            best.labels = std::move(labels);
        }
    }
    return best;
}

} // namespace naronet::cluster
