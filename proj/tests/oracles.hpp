#pragma once

// Brute-force reference implementations shared by unit and acceptance tests.

#include "naronet/common.hpp"
#include "naronet/graphbuild.hpp"

#include <cmath>
#include <vector>

namespace naronet::test {

/// Direct evaluation: every anchor against every other row, cosine similarity / tau.
inline double nt_xent_oracle(const Mat& z, double tau) {
    const Eigen::Index n = z.rows();
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index pos = (i % 2 == 0) ? i + 1 : i - 1;
        double denom = 0.0, num = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
            if (k == i) {
                continue;
            }
            double dot = 0.0, ni = 0.0, nk = 0.0;
            for (Eigen::Index c = 0; c < z.cols(); ++c) {
                dot += z(i, c) * z(k, c);
                ni += z(i, c) * z(i, c);
                nk += z(k, c) * z(k, c);
            }
            const double e = std::exp(dot / std::sqrt(ni * nk) / tau);
            denom += e;
            if (k == pos) {
                num = e;
            }
        }
        total += -std::log(num / denom);
    }
    return total / static_cast<double>(n);
}

inline Mat softmax_oracle(const Mat& x) {
    Mat out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            z += std::exp(x(r, c) - m);
        }
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
            out(r, c) = std::exp(x(r, c) - m) / z;
        }
    }
    return out;
}

/// Max-sum pooling on post-activation rows, first maximum on ties.
inline RowVec pool_oracle(const Mat& s, bool use_max) {
    RowVec out = RowVec::Zero(s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < s.cols(); ++c) {
            if (s(r, c) > s(r, best)) {
                best = c;
            }
        }
        for (Eigen::Index c = 0; c < s.cols(); ++c) {
            if (!use_max || c == best) {
                out(c) += s(r, c);
            }
        }
    }
    return out;
}

/// A(d, s) = 1 for every directed edge (s, d).
inline Mat dense_adjacency(const graph::PatchGraph& g) {
    Mat a = Mat::Zero(g.num_nodes(), g.num_nodes());
    for (const auto& [s, d] : g.edges) {
        a(d, s) = 1.0;
    }
    return a;
}

/// D^-1 (A + I) built densely.
inline Mat dense_mean_propagation(const graph::PatchGraph& g) {
    Mat a = dense_adjacency(g) + Mat::Identity(g.num_nodes(), g.num_nodes());
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        a.row(r) /= a.row(r).sum();
    }
    return a;
}

/// K hops of relu(M H W_k), adding H first when residual and widths match.
inline Mat dense_gnn(const Mat& m, const Mat& z, const std::vector<Mat>& weights, bool residual) {
    Mat h = z;
    for (const auto& w : weights) {
        Mat next = m * h * w;
        if (residual && next.cols() == h.cols()) {
            next += h;
        }
        h = next.cwiseMax(0.0);
    }
    return h;
}

} // namespace naronet::test
