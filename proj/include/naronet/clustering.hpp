#pragma once

#include "naronet/common.hpp"

#include <vector>

namespace naronet::cluster {

struct Merge {
    int a;
    int b;
    double height;
};

/// Ward agglomeration over the rows of x (Lance-Williams on squared Euclidean distances).
/// Clusters are numbered 0..M-1 for leaves and M+i for the i-th merge.
std::vector<Merge> ward_linkage(const Mat& x);

/// Flat labels for k clusters, numbered by first appearance.
std::vector<int> cut_tree(const std::vector<Merge>& merges, int leaves, int k);

/// Mean silhouette width; 0 when there is a single cluster.
double silhouette(const Mat& x, const std::vector<int>& labels);

/// Column z-scores; zero-variance columns become 0.
Mat standardize_columns(const Mat& x);

struct Subcategories {
    std::vector<int> labels;
    int k = 1;
    double silhouette = 0.0;
};

/// Ward clustering of standardized rows, k chosen by maximum silhouette over
/// [2, min(8, M-1)] (smallest k on ties). All-equal rows give one cluster.
Subcategories patient_subcategories(const Mat& pir);

} // namespace naronet::cluster
