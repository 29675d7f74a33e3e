#pragma once

#include "naronet/common.hpp"

#include <Eigen/SparseCore>

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

/// Minimal reverse-mode automatic differentiation over dense row-major matrices.
///
/// A `Var` is a handle to a node in a dynamically built expression graph. Parameters
/// are long-lived leaf nodes whose gradients accumulate across `backward()` calls until
/// cleared by the optimizer; intermediate nodes are released with their last handle.
namespace naronet::ag {

using SparseMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct Node;
using BackwardFn = std::function<void(Node&)>;

struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    BackwardFn backward_fn;

    void accumulate(const Mat& g);
    Node& parent(std::size_t i) { return *parents[i]; }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Mat value);
    static Var parameter(Mat value);

    bool defined() const { return static_cast<bool>(node_); }
    const Mat& value() const { return node_->value; }
    Mat& mutable_value() { return node_->value; }
    /// Empty matrix when no gradient has reached this node.
    const Mat& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double scalar() const;

    /// Backpropagates from this 1x1 node, accumulating into every reachable leaf.
    void backward() const;
    void zero_grad() { node_->grad.resize(0, 0); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// While alive on a thread, ops on that thread record no graph (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool active();
};

/// Builds a result node. `fn` is only attached when some parent requires a gradient.
Var make_op(Mat value, std::initializer_list<Var> parents, BackwardFn fn);
Var make_op(Mat value, const std::vector<Var>& parents, BackwardFn fn);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a (R x C) + row (1 x C) broadcast over rows.
Var add_row(const Var& a, const Var& row);
Var scale(const Var& a, double s);
Var add_const(const Var& a, const Mat& c);
/// a (R x C) times a 1x1 variable.
Var mul_scalar(const Var& a, const Var& s);
/// a (R x C) divided by a 1x1 variable.
Var div_scalar(const Var& a, const Var& s);

Var relu(const Var& a);
Var sigmoid(const Var& a);
/// x log x elementwise with 0 log 0 = 0. Entries must be non-negative.
Var xlogx(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Keeps the maximum of each row and zeroes the rest (first maximum on ties).
Var keep_row_max(const Var& a);
/// Divides every row by its sum. Row sums must be positive.
Var row_normalize(const Var& a);
Var add_identity(const Var& a);

/// Column sums as a 1 x C row.
Var col_sum(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var frobenius_norm(const Var& a);
Var transpose(const Var& a);
Var pick(const Var& a, Eigen::Index r, Eigen::Index c);
Var concat_cols(const std::vector<Var>& parts);

/// Sparse constant matrix times variable.
Var spmm(std::shared_ptr<const SparseMat> m, const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

} // namespace naronet::ag
