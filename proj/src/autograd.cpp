#include "naronet/autograd.hpp"

#include <cmath>
#include <unordered_set>
#include <utility>

namespace naronet::ag {

void Node::accumulate(const Mat& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Var Var::constant(Mat value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::parameter(Mat value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

double Var::scalar() const {
    if (node_->value.size() != 1) {
        throw std::logic_error("Var::scalar on non-scalar node");
    }
    return node_->value(0, 0);
}

void Var::backward() const {
    if (node_->value.size() != 1) {
        throw std::logic_error("backward() requires a scalar root");
    }
    if (!node_->requires_grad) {
        return;
    }

    // Iterative post-order DFS gives a topological order of the gradient-carrying subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->accumulate(Mat::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) {
            n->backward_fn(*n);
        }
    }
}

namespace {
thread_local int no_grad_depth = 0;
} // namespace

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool NoGradGuard::active() { return no_grad_depth > 0; }

namespace {

template <typename Parents>
Var make_op_impl(Mat value, const Parents& parents, BackwardFn fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (NoGradGuard::active()) {
        return Var(std::move(n));
    }
    for (const auto& p : parents) {
        if (p.requires_grad()) {
            n->requires_grad = true;
        }
    }
    if (n->requires_grad) {
        for (const auto& p : parents) {
            n->parents.push_back(p.node());
        }
        n->backward_fn = std::move(fn);
    }
    return Var(std::move(n));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
}

} // namespace

Var make_op(Mat value, std::initializer_list<Var> parents, BackwardFn fn) {
    return make_op_impl(std::move(value), parents, std::move(fn));
}

Var make_op(Mat value, const std::vector<Var>& parents, BackwardFn fn) {
    return make_op_impl(std::move(value), parents, std::move(fn));
}

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ");
    }
    return make_op(a.value() * b.value(), {a, b}, [](Node& self) {
        Node& pa = self.parent(0);
        Node& pb = self.parent(1);
        if (pa.requires_grad) {
            pa.accumulate(self.grad * pb.value.transpose());
        }
        if (pb.requires_grad) {
            pb.accumulate(pa.value.transpose() * self.grad);
        }
    });
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    return make_op(a.value() + b.value(), {a, b}, [](Node& self) {
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                p->accumulate(self.grad);
            }
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    return make_op(a.value() - b.value(), {a, b}, [](Node& self) {
        if (self.parent(0).requires_grad) {
            self.parent(0).accumulate(self.grad);
        }
        if (self.parent(1).requires_grad) {
            self.parent(1).accumulate(-self.grad);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    return make_op(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
        Node& pa = self.parent(0);
        Node& pb = self.parent(1);
        if (pa.requires_grad) {
            pa.accumulate(self.grad.cwiseProduct(pb.value));
        }
        if (pb.requires_grad) {
            pb.accumulate(self.grad.cwiseProduct(pa.value));
        }
    });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row: row must be 1 x cols(a)");
    }
    Mat out = a.value();
    out.rowwise() += row.value().row(0);
    return make_op(std::move(out), {a, row}, [](Node& self) {
        if (self.parent(0).requires_grad) {
            self.parent(0).accumulate(self.grad);
        }
        if (self.parent(1).requires_grad) {
            self.parent(1).accumulate(self.grad.colwise().sum());
        }
    });
}

Var scale(const Var& a, double s) {
    return make_op(a.value() * s, {a}, [s](Node& self) { self.parent(0).accumulate(self.grad * s); });
}

Var add_const(const Var& a, const Mat& c) {
    if (c.rows() != a.rows() || c.cols() != a.cols()) {
        throw std::invalid_argument("add_const: shape mismatch");
    }
    return make_op(a.value() + c, {a}, [](Node& self) { self.parent(0).accumulate(self.grad); });
}

Var mul_scalar(const Var& a, const Var& s) {
    if (s.value().size() != 1) {
        throw std::invalid_argument("mul_scalar: s must be 1x1");
    }
    return make_op(a.value() * s.scalar(), {a, s}, [](Node& self) {
        Node& pa = self.parent(0);
        Node& ps = self.parent(1);
        const double sv = ps.value(0, 0);
        if (pa.requires_grad) {
            pa.accumulate(self.grad * sv);
        }
        if (ps.requires_grad) {
            ps.accumulate(Mat::Constant(1, 1, self.grad.cwiseProduct(pa.value).sum()));
        }
    });
}

Var div_scalar(const Var& a, const Var& s) {
    if (s.value().size() != 1) {
        throw std::invalid_argument("div_scalar: s must be 1x1");
    }
    return make_op(a.value() / s.scalar(), {a, s}, [](Node& self) {
        Node& pa = self.parent(0);
        Node& ps = self.parent(1);
        const double sv = ps.value(0, 0);
        if (pa.requires_grad) {
            pa.accumulate(self.grad / sv);
        }
        if (ps.requires_grad) {
            const double g = -self.grad.cwiseProduct(pa.value).sum() / (sv * sv);
            ps.accumulate(Mat::Constant(1, 1, g));
        }
    });
}

Var relu(const Var& a) {
    return make_op(a.value().cwiseMax(0.0), {a}, [](Node& self) {
        Node& pa = self.parent(0);
        pa.accumulate((pa.value.array() > 0.0).select(self.grad, 0.0));
    });
}

Var sigmoid(const Var& a) {
    Mat y = (1.0 + (-a.value().array()).exp()).inverse().matrix();
    return make_op(y, {a}, [y](Node& self) {
        self.parent(0).accumulate((self.grad.array() * y.array() * (1.0 - y.array())).matrix());
    });
}

Var xlogx(const Var& a) {
    if ((a.value().array() < 0.0).any()) {
        throw std::invalid_argument("xlogx: negative entry");
    }
    Mat y = a.value().unaryExpr([](double x) { return x > 0.0 ? x * std::log(x) : 0.0; });
    return make_op(std::move(y), {a}, [](Node& self) {
        Node& pa = self.parent(0);
        Mat d = pa.value.unaryExpr([](double x) { return std::log(std::max(x, 1e-12)) + 1.0; });
        pa.accumulate(self.grad.cwiseProduct(d));
    });
}

namespace {

Mat softmax_rows_value(const Mat& x) {
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        y.row(r) = (x.row(r).array() - m).exp().matrix();
        y.row(r) /= y.row(r).sum();
    }
    return y;
}

} // namespace

Var softmax_rows(const Var& a) {
    Mat y = softmax_rows_value(a.value());
    return make_op(y, {a}, [y](Node& self) {
        const Eigen::VectorXd dots = self.grad.cwiseProduct(y).rowwise().sum();
        Mat g = self.grad;
        g.colwise() -= dots;
        self.parent(0).accumulate(g.cwiseProduct(y));
    });
}

Var log_softmax_rows(const Var& a) {
    const Mat& x = a.value();
    Mat y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        const double lse = m + std::log((x.row(r).array() - m).exp().sum());
        y.row(r) = x.row(r).array() - lse;
    }
    Mat p = y.array().exp().matrix();
    return make_op(std::move(y), {a}, [p](Node& self) {
        const Eigen::VectorXd gsum = self.grad.rowwise().sum();
        Mat g = self.grad;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            g.row(r) -= gsum(r) * p.row(r);
        }
        self.parent(0).accumulate(g);
    });
}

Var keep_row_max(const Var& a) {
    const Mat& x = a.value();
    Mat mask = Mat::Zero(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        Eigen::Index c = 0;
        x.row(r).maxCoeff(&c);
        mask(r, c) = 1.0;
    }
    return make_op(x.cwiseProduct(mask), {a}, [mask](Node& self) {
        self.parent(0).accumulate(self.grad.cwiseProduct(mask));
    });
}

Var row_normalize(const Var& a) {
    const Mat& x = a.value();
    const Eigen::VectorXd s = x.rowwise().sum();
    if ((s.array() <= 0.0).any()) {
        throw std::invalid_argument("row_normalize: non-positive row sum");
    }
    Mat y = s.cwiseInverse().asDiagonal() * x;
    return make_op(std::move(y), {a}, [s](Node& self) {
        Node& pa = self.parent(0);
        const Eigen::VectorXd dots = self.grad.cwiseProduct(pa.value).rowwise().sum();
        Mat g = self.grad;
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            g.row(r) = (g.row(r).array() / s(r) - dots(r) / (s(r) * s(r))).matrix();
        }
        pa.accumulate(g);
    });
}

Var add_identity(const Var& a) {
    if (a.rows() != a.cols()) {
        throw std::invalid_argument("add_identity: matrix must be square");
    }
    return add_const(a, Mat::Identity(a.rows(), a.cols()));
}

Var col_sum(const Var& a) {
    return make_op(a.value().colwise().sum(), {a}, [](Node& self) {
        Node& pa = self.parent(0);
        Mat g(pa.value.rows(), pa.value.cols());
        g.rowwise() = self.grad.row(0);
        pa.accumulate(g);
    });
}

Var sum(const Var& a) {
    return make_op(Mat::Constant(1, 1, a.value().sum()), {a}, [](Node& self) {
        Node& pa = self.parent(0);
        pa.accumulate(Mat::Constant(pa.value.rows(), pa.value.cols(), self.grad(0, 0)));
    });
}

Var mean(const Var& a) {
    const auto n = static_cast<double>(a.value().size());
    return scale(sum(a), 1.0 / n);
}

Var frobenius_norm(const Var& a) {
    const double n = a.value().norm();
    return make_op(Mat::Constant(1, 1, n), {a}, [n](Node& self) {
        if (n > 0.0) {
            Node& pa = self.parent(0);
            pa.accumulate(pa.value * (self.grad(0, 0) / n));
        }
    });
}

Var transpose(const Var& a) {
    return make_op(a.value().transpose(), {a}, [](Node& self) {
        self.parent(0).accumulate(self.grad.transpose());
    });
}

Var pick(const Var& a, Eigen::Index r, Eigen::Index c) {
    if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) {
        throw std::out_of_range("pick: index out of range");
    }
    return make_op(Mat::Constant(1, 1, a.value()(r, c)), {a}, [r, c](Node& self) {
        Node& pa = self.parent(0);
        Mat g = Mat::Zero(pa.value.rows(), pa.value.cols());
        g(r, c) = self.grad(0, 0);
        pa.accumulate(g);
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no inputs");
    }
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) {
            throw std::invalid_argument("concat_cols: row mismatch");
        }
        cols += p.cols();
    }
    Mat out(rows, cols);
    std::vector<Eigen::Index> offsets;
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    // make_op keeps every input as a parent, so offsets line up with self.parents.
    return make_op(std::move(out), parts, [offsets](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            Node& p = *self.parents[i];
            if (p.requires_grad) {
                p.accumulate(self.grad.middleCols(offsets[i], p.value.cols()));
            }
        }
    });
}

Var spmm(std::shared_ptr<const SparseMat> m, const Var& x) {
    if (m->cols() != x.rows()) {
        throw std::invalid_argument("spmm: dimension mismatch");
    }
    Mat y = (*m) * x.value();
    return make_op(std::move(y), {x}, [m](Node& self) {
        self.parent(0).accumulate(m->transpose() * self.grad);
    });
}

} // namespace naronet::ag
