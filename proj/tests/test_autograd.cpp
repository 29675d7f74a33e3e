#include "naronet/autograd.hpp"
#include "naronet/nn.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace naronet;
using naronet::test::gradient_check;
using naronet::test::random_mat;

namespace {

using Params = std::vector<std::pair<std::string, ag::Var>>;

void expect_gradients(Params params, const std::function<ag::Var()>& loss) {
    const auto r = gradient_check(params, loss);
    INFO("worst entry " << r.worst);
    CHECK(r.max_rel < 1e-4);
}

} // namespace

TEST_CASE("elementwise and matrix ops match finite differences") {
    Rng rng(1);
    auto a = ag::Var::parameter(random_mat(4, 3, rng));
    auto b = ag::Var::parameter(random_mat(3, 5, rng));
    auto c = ag::Var::parameter(random_mat(4, 3, rng));
    auto row = ag::Var::parameter(random_mat(1, 3, rng));
    auto s = ag::Var::parameter(Mat::Constant(1, 1, 1.7));

    SUBCASE("matmul, add, sub, mul") {
        expect_gradients({{"a", a}, {"b", b}, {"c", c}},
                         [&] { return ag::sum(ag::mul(ag::matmul(a + c, b), ag::matmul(a - c, b))); });
    }
    SUBCASE("broadcast row, scale, scalar mul and div") {
        expect_gradients({{"a", a}, {"row", row}, {"s", s}}, [&] {
            return ag::sum(ag::mul(ag::div_scalar(ag::add_row(a, row), s), ag::mul_scalar(ag::scale(a, 0.3), s)));
        });
    }
    SUBCASE("sigmoid, relu, transpose, pick") {
        expect_gradients({{"a", a}, {"b", b}}, [&] {
            return ag::pick(ag::matmul(ag::transpose(ag::relu(ag::matmul(a, b))), ag::sigmoid(a)), 2, 1);
        });
    }
    SUBCASE("softmax, log-softmax, row normalization") {
        expect_gradients({{"a", a}}, [&] {
            const ag::Var p = ag::softmax_rows(a);
            return ag::sum(ag::mul(p, ag::log_softmax_rows(ag::scale(a, 2.0)))) +
                   ag::pick(ag::row_normalize(ag::sigmoid(a)), 1, 2);
        });
    }
    SUBCASE("xlogx, frobenius norm, mean, column sums") {
        expect_gradients({{"a", a}}, [&] {
            const ag::Var p = ag::sigmoid(a);
            return ag::sum(ag::xlogx(p)) + ag::frobenius_norm(a) + ag::mean(ag::mul(a, a)) +
                   ag::pick(ag::col_sum(ag::mul(a, p)), 0, 1);
        });
    }
    SUBCASE("row max filter, identity shift, concatenation") {
        expect_gradients({{"a", a}, {"c", c}}, [&] {
            const ag::Var k = ag::keep_row_max(ag::softmax_rows(a));
            const ag::Var sq = ag::matmul(ag::transpose(c), c);
            return ag::sum(ag::mul(ag::concat_cols({k, c}), ag::concat_cols({c, k}))) +
                   ag::frobenius_norm(ag::add_identity(sq));
        });
    }
    SUBCASE("sparse product") {
        auto m = std::make_shared<ag::SparseMat>(4, 4);
        m->insert(0, 1) = 0.5;
        m->insert(2, 3) = -1.5;
        m->insert(3, 0) = 2.0;
        m->makeCompressed();
        expect_gradients({{"a", a}}, [&] { return ag::frobenius_norm(ag::spmm(m, a)); });
    }
}

TEST_CASE("keep_row_max keeps the first maximum on ties") {
    const ag::Var k = ag::keep_row_max(ag::Var::constant((Mat(2, 3) << 0.5, 0.5, 0.1, 0.2, 0.1, 0.7).finished()));
    const Mat expected = (Mat(2, 3) << 0.5, 0.0, 0.0, 0.0, 0.0, 0.7).finished();
    CHECK(k.value().isApprox(expected));
}

TEST_CASE("xlogx treats 0 log 0 as 0") {
    const ag::Var x = ag::xlogx(ag::Var::constant((Mat(1, 2) << 0.0, 0.5).finished()));
    CHECK(x.value()(0, 0) == 0.0);
    CHECK(x.value()(0, 1) == doctest::Approx(0.5 * std::log(0.5)));
}

TEST_CASE("gradients accumulate across backward calls and constants get none") {
    auto w = ag::Var::parameter(Mat::Constant(1, 1, 2.0));
    auto x = ag::Var::constant(Mat::Constant(1, 1, 3.0));
    ag::mul(w, x).backward();
    ag::mul(w, x).backward();
    CHECK(w.grad()(0, 0) == doctest::Approx(6.0));
    CHECK(x.grad().size() == 0);
}

TEST_CASE("no-grad guard records no graph") {
    auto w = ag::Var::parameter(Mat::Constant(2, 2, 1.0));
    {
        ag::NoGradGuard guard;
        CHECK(ag::NoGradGuard::active());
        const ag::Var y = ag::sum(ag::mul(w, w));
        CHECK_FALSE(y.requires_grad());
        CHECK(y.node()->parents.empty());
    }
    CHECK_FALSE(ag::NoGradGuard::active());
}

TEST_CASE("linear layer and convolution match naive evaluation") {
    Rng rng(2);
    SUBCASE("linear") {
        const Mat x = random_mat(3, 4, rng), w = random_mat(4, 2, rng), b = random_mat(1, 2, rng);
        const Mat y = nn::linear(ag::Var::constant(x), ag::Var::constant(w), ag::Var::constant(b)).value();
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 2; ++j) {
                double acc = b(0, j);
                for (int k = 0; k < 4; ++k) {
                    acc += x(i, k) * w(k, j);
                }
                CHECK(y(i, j) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
    SUBCASE("conv2d, stride 2, zero padding, HWC layout") {
        nn::ConvShape sh{5, 5, 2, 3, 3, 2, 1};
        const Mat x = random_mat(2, 5 * 5 * 2, rng), w = random_mat(3 * 3 * 2, 3, rng), b = random_mat(1, 3, rng);
        const Mat y = nn::conv2d(ag::Var::constant(x), ag::Var::constant(w), ag::Var::constant(b), sh).value();
        REQUIRE(y.cols() == sh.out_height() * sh.out_width() * 3);
        for (int n = 0; n < 2; ++n) {
            for (int oy = 0; oy < sh.out_height(); ++oy) {
                for (int ox = 0; ox < sh.out_width(); ++ox) {
                    for (int co = 0; co < 3; ++co) {
                        double acc = b(0, co);
                        for (int ky = 0; ky < 3; ++ky) {
                            for (int kx = 0; kx < 3; ++kx) {
                                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                                if (iy < 0 || ix < 0 || iy >= 5 || ix >= 5) {
                                    continue;
                                }
                                for (int ci = 0; ci < 2; ++ci) {
                                    acc += x(n, (iy * 5 + ix) * 2 + ci) * w((ky * 3 + kx) * 2 + ci, co);
                                }
                            }
                        }
                        CHECK(y(n, (oy * sh.out_width() + ox) * 3 + co) == doctest::Approx(acc).epsilon(1e-12));
                    }
                }
            }
        }
    }
}

TEST_CASE("convolution and pooling gradients match finite differences") {
    Rng rng(3);
    nn::ConvShape sh{4, 4, 2, 3, 3, 2, 1};
    auto x = ag::Var::parameter(random_mat(2, 4 * 4 * 2, rng));
    auto w = ag::Var::parameter(random_mat(3 * 3 * 2, 3, rng));
    auto b = ag::Var::parameter(random_mat(1, 3, rng));
    expect_gradients({{"x", x}, {"w", w}, {"b", b}}, [&] {
        const ag::Var y = nn::conv2d(x, w, b, sh);
        return ag::frobenius_norm(nn::global_avg_pool(y, sh.out_height() * sh.out_width(), 3));
    });
}

TEST_CASE("adam with zero learning rate leaves parameters unchanged") {
    Rng rng(4);
    nn::ParamSet ps;
    ps.add("w", random_mat(3, 3, rng));
    const Mat before = ps.get("w").value();
    nn::Adam opt(0.0);
    ag::sum(ag::mul(ps.get("w"), ps.get("w"))).backward();
    opt.step(ps);
    CHECK(ps.get("w").value() == before);
    CHECK(ps.get("w").grad().size() == 0);
}

TEST_CASE("adam descends a quadratic") {
    nn::ParamSet ps;
    ps.add("w", Mat::Constant(1, 2, 3.0));
    nn::Adam opt(0.1);
    for (int i = 0; i < 300; ++i) {
        ag::sum(ag::mul(ps.get("w"), ps.get("w"))).backward();
        opt.step(ps);
    }
    CHECK(ps.get("w").value().norm() < 0.05);
}

TEST_CASE("parameter set clone is independent") {
    nn::ParamSet ps;
    ps.add("w", Mat::Constant(2, 2, 1.0));
    nn::ParamSet copy = ps.clone();
    copy.items()[0].second.mutable_value()(0, 0) = 5.0;
    CHECK(ps.get("w").value()(0, 0) == 1.0);
    CHECK(copy.scalar_count() == 4);
    CHECK_THROWS(ps.get("missing"));
}
