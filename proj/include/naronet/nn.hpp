#pragma once

#include "naronet/autograd.hpp"
#include "naronet/rng.hpp"

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace naronet::nn {

/// Ordered, named collection of trainable tensors.
class ParamSet {
public:
    ag::Var add(std::string name, Mat init);
    const ag::Var& get(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::vector<std::pair<std::string, ag::Var>>& items() { return items_; }
    const std::vector<std::pair<std::string, ag::Var>>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    void zero_grad();
    /// Independent copy: fresh leaf nodes holding the same values.
    ParamSet clone() const;
    std::size_t scalar_count() const;

private:
    std::vector<std::pair<std::string, ag::Var>> items_;
};

/// He-normal initialisation, std = sqrt(2 / fan_in).
Mat kaiming_normal(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng);

/// Affine map y = x W + b, with W stored as (in x out).
ag::Var linear(const ag::Var& x, const ag::Var& weight, const ag::Var& bias);

/// Adaptive-moment gradient descent over a ParamSet. Moments are tracked by
/// position, so the same optimizer must always be stepped with the same ParamSet.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// Applies one update from the accumulated gradients, then clears them.
    void step(ParamSet& params);
    double learning_rate() const { return lr_; }
    long steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Mat> m_, v_;
};

/// Geometry of a square-kernel 2-D convolution over HWC-flattened samples.
struct ConvShape {
    int height = 0;
    int width = 0;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 2;
    int pad = 1;

    int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
    int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

/// x: batch x (H*W*Cin); weight: (k*k*Cin) x Cout; bias: 1 x Cout.
/// Returns batch x (Ho*Wo*Cout), HWC layout.
ag::Var conv2d(const ag::Var& x, const ag::Var& weight, const ag::Var& bias, const ConvShape& shape);

/// x: batch x (spatial*channels), HWC layout. Returns batch x channels.
ag::Var global_avg_pool(const ag::Var& x, int spatial, int channels);

} // namespace naronet::nn
