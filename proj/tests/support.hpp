#pragma once

#include "naronet/autograd.hpp"
#include "naronet/common.hpp"
#include "naronet/graphbuild.hpp"
#include "naronet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace naronet::test {

namespace fs = std::filesystem;

/// Fresh, empty directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("naronet_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = n(rng);
    }
    return m;
}

inline Mat random_uniform(Eigen::Index r, Eigen::Index c, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = u(rng);
    }
    return m;
}

/// Random symmetric graph without self-loops or duplicates.
inline graph::PatchGraph random_graph(int nodes, int dim, double edge_prob, Rng& rng, int label = 0) {
    graph::PatchGraph g;
    g.patient_id = "g";
    g.label = label;
    g.Z = random_mat(nodes, dim, rng);
    for (int i = 0; i < nodes; ++i) {
        for (int j = i + 1; j < nodes; ++j) {
            if (uniform01(rng) < edge_prob) {
                g.edges.emplace_back(i, j);
                g.edges.emplace_back(j, i);
            }
        }
        g.coords.push_back({0, 0, i});
    }
    g.images.push_back({"img", 1, nodes, 10});
    return g;
}

struct GradCheck {
    double max_rel = 0.0;
    std::string worst;
    int checked = 0;
};

/// Compares the reverse-mode gradient of `loss` with central differences for every
/// entry of every tensor in `params`. Relative error uses max(|a|, |n|, floor).
/// An entry that disagrees is re-probed with smaller steps before it counts, since a
/// step can straddle a ReLU or max-filter kink.
inline GradCheck gradient_check(std::vector<std::pair<std::string, ag::Var>>& params,
                                const std::function<ag::Var()>& loss, double h = 1e-6, double floor = 1e-3) {
    for (auto& [name, p] : params) {
        p.zero_grad();
    }
    loss().backward();
    std::vector<Mat> analytic;
    for (auto& [name, p] : params) {
        analytic.push_back(p.grad().size() == 0 ? Mat::Zero(p.rows(), p.cols()) : p.grad());
    }
    auto eval = [&]() {
        ag::NoGradGuard guard;
        return loss().scalar();
    };
    GradCheck out;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Mat& v = params[k].second.mutable_value();
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            const double a = analytic[k].data()[i];
            double best = std::numeric_limits<double>::infinity();
            for (double step : {h, h * 0.1, h * 0.01}) {
                const double orig = v.data()[i];
                v.data()[i] = orig + step;
                const double up = eval();
                v.data()[i] = orig - step;
                const double down = eval();
                v.data()[i] = orig;
                const double n = (up - down) / (2.0 * step);
                const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
                best = std::min(best, rel);
                if (best < 1e-5) {
                    break;
                }
            }
            ++out.checked;
            if (best > out.max_rel) {
                out.max_rel = best;
                out.worst = params[k].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return out;
}

} // namespace naronet::test
