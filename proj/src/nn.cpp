#include "naronet/nn.hpp"

#include <cmath>
#include <random>

namespace naronet::nn {

ag::Var ParamSet::add(std::string name, Mat init) {
    if (contains(name)) {
        throw std::invalid_argument("duplicate parameter name: " + name);
    }
    auto var = ag::Var::parameter(std::move(init));
    items_.emplace_back(std::move(name), var);
    return var;
}

const ag::Var& ParamSet::get(std::string_view name) const {
    for (const auto& [n, v] : items_) {
        if (n == name) {
            return v;
        }
    }
    throw std::out_of_range("unknown parameter: " + std::string(name));
}

bool ParamSet::contains(std::string_view name) const {
    for (const auto& item : items_) {
        if (item.first == name) {
            return true;
        }
    }
    return false;
}

void ParamSet::zero_grad() {
    for (auto& item : items_) {
        item.second.zero_grad();
    }
}

ParamSet ParamSet::clone() const {
    ParamSet out;
    for (const auto& [n, v] : items_) {
        out.add(n, v.value());
    }
    return out;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& item : items_) {
        n += static_cast<std::size_t>(item.second.value().size());
    }
    return n;
}

Mat kaiming_normal(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = dist(rng);
    }
    return m;
}

ag::Var linear(const ag::Var& x, const ag::Var& weight, const ag::Var& bias) {
    return ag::add_row(ag::matmul(x, weight), bias);
}

void Adam::step(ParamSet& params) {
    auto& items = params.items();
    if (m_.empty()) {
        for (const auto& item : items) {
            m_.push_back(Mat::Zero(item.second.rows(), item.second.cols()));
            v_.push_back(Mat::Zero(item.second.rows(), item.second.cols()));
        }
    }
    if (m_.size() != items.size()) {
        throw std::logic_error("Adam stepped with a different ParamSet");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& var = items[i].second;
        const Mat& g = var.grad();
        if (g.size() == 0) {
            continue;
        }
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
        if (lr_ != 0.0) {
            var.mutable_value().array() -=
                lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + eps_);
        }
        var.zero_grad();
    }
}

namespace {

// Builds the (batch*Ho*Wo) x (k*k*Cin) patch matrix for HWC samples.
Mat im2col(const Mat& x, const ConvShape& s) {
    const int ho = s.out_height();
    const int wo = s.out_width();
    const int kk = s.kernel * s.kernel * s.in_channels;
    const Eigen::Index batch = x.rows();
    Mat cols = Mat::Zero(batch * ho * wo, kk);
    for (Eigen::Index b = 0; b < batch; ++b) {
        const double* src = x.row(b).data();
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                double* dst = cols.row(b * ho * wo + oy * wo + ox).data();
                for (int ky = 0; ky < s.kernel; ++ky) {
                    const int iy = oy * s.stride - s.pad + ky;
                    if (iy < 0 || iy >= s.height) {
                        continue;
                    }
                    for (int kx = 0; kx < s.kernel; ++kx) {
                        const int ix = ox * s.stride - s.pad + kx;
                        if (ix < 0 || ix >= s.width) {
                            continue;
                        }
                        const double* px = src + (iy * s.width + ix) * s.in_channels;
                        double* out = dst + (ky * s.kernel + kx) * s.in_channels;
                        for (int c = 0; c < s.in_channels; ++c) {
                            out[c] = px[c];
                        }
                    }
                }
            }
        }
    }
    return cols;
}

Mat col2im(const Mat& cols, Eigen::Index batch, const ConvShape& s) {
    const int ho = s.out_height();
    const int wo = s.out_width();
    Mat x = Mat::Zero(batch, static_cast<Eigen::Index>(s.height) * s.width * s.in_channels);
    for (Eigen::Index b = 0; b < batch; ++b) {
        double* dst = x.row(b).data();
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                const double* src = cols.row(b * ho * wo + oy * wo + ox).data();
                for (int ky = 0; ky < s.kernel; ++ky) {
                    const int iy = oy * s.stride - s.pad + ky;
                    if (iy < 0 || iy >= s.height) {
                        continue;
                    }
                    for (int kx = 0; kx < s.kernel; ++kx) {
                        const int ix = ox * s.stride - s.pad + kx;
                        if (ix < 0 || ix >= s.width) {
                            continue;
                        }
                        double* px = dst + (iy * s.width + ix) * s.in_channels;
                        const double* in = src + (ky * s.kernel + kx) * s.in_channels;
                        for (int c = 0; c < s.in_channels; ++c) {
                            px[c] += in[c];
                        }
                    }
                }
            }
        }
    }
    return x;
}

} // namespace

ag::Var conv2d(const ag::Var& x, const ag::Var& weight, const ag::Var& bias, const ConvShape& shape) {
    const Eigen::Index in_width = static_cast<Eigen::Index>(shape.height) * shape.width * shape.in_channels;
    if (x.cols() != in_width) {
        throw std::invalid_argument("conv2d: input width does not match shape");
    }
    if (weight.rows() != shape.kernel * shape.kernel * shape.in_channels || weight.cols() != shape.out_channels) {
        throw std::invalid_argument("conv2d: weight shape mismatch");
    }
    const Eigen::Index batch = x.rows();
    const Eigen::Index spatial = static_cast<Eigen::Index>(shape.out_height()) * shape.out_width();
    auto cols = std::make_shared<Mat>(im2col(x.value(), shape));
    Mat flat = (*cols) * weight.value();
    flat.rowwise() += bias.value().row(0);
    Mat out = Eigen::Map<Mat>(flat.data(), batch, spatial * shape.out_channels);

    return ag::make_op(std::move(out), {x, weight, bias}, [cols, shape, batch, spatial](ag::Node& self) {
        ag::Node& px = self.parent(0);
        ag::Node& pw = self.parent(1);
        ag::Node& pb = self.parent(2);
        Eigen::Map<const Mat> g(self.grad.data(), batch * spatial, shape.out_channels);
        if (pw.requires_grad) {
            pw.accumulate(cols->transpose() * g);
        }
        if (pb.requires_grad) {
            pb.accumulate(g.colwise().sum());
        }
        if (px.requires_grad) {
            Mat dcols = g * pw.value.transpose();
            px.accumulate(col2im(dcols, batch, shape));
        }
    });
}

ag::Var global_avg_pool(const ag::Var& x, int spatial, int channels) {
    if (x.cols() != static_cast<Eigen::Index>(spatial) * channels) {
        throw std::invalid_argument("global_avg_pool: width mismatch");
    }
    const Eigen::Index batch = x.rows();
    Mat out = Mat::Zero(batch, channels);
    for (Eigen::Index b = 0; b < batch; ++b) {
        Eigen::Map<const Mat> sample(x.value().row(b).data(), spatial, channels);
        out.row(b) = sample.colwise().mean();
    }
    return ag::make_op(std::move(out), {x}, [spatial, channels, batch](ag::Node& self) {
        Mat g(batch, static_cast<Eigen::Index>(spatial) * channels);
        for (Eigen::Index b = 0; b < batch; ++b) {
            Eigen::Map<Mat> sample(g.row(b).data(), spatial, channels);
            sample.rowwise() = self.grad.row(b) / static_cast<double>(spatial);
        }
        self.parent(0).accumulate(g);
    });
}

} // namespace naronet::nn
