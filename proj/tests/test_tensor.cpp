#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "strokekit/ops.hpp"
#include "strokekit/rng.hpp"
#include "strokekit/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace strokekit;
namespace op = strokekit::ops;

namespace {

Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
    Tensor<double> t = Tensor<double>::zeros(std::move(s));
    for (auto& v : t.raw()) v = rng.normal() * scale;
    return t;
}

} // namespace

TEST_CASE("matmul values") {
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto id = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto r = op::matmul(a, id);
    CHECK(r.at(0, 0) == 1);
    CHECK(r.at(0, 1) == 2);
    CHECK(r.at(1, 0) == 3);
    CHECK(r.at(1, 1) == 4);

    auto row = Tensor<double>::from({1, 2}, {1, 0});
    auto col = Tensor<double>::from({2, 1}, {0, 1});
    CHECK(op::matmul(row, col).item() == 0);

    CHECK_THROWS_AS(op::matmul(a, row), ShapeError);
}

TEST_CASE("matmul gradient vs finite differences") {
    Rng rng(11);
    auto a = randn({5, 4}, rng);
    auto b = randn({4, 3}, rng);
    auto w = randn({5, 3}, rng); // fixed projection to scalar
    auto res = gradcheck::check({a, b}, [&] {
        return op::sum(op::mul(op::matmul(a, b), w));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("conv2d trivial kernels") {
    auto x = Tensor<double>::full({1, 3, 3}, 1.0);
    auto w = Tensor<double>::from({1, 1, 1, 1}, {2.0});
    auto y = op::conv2d<double>(x, w, nullptr, 1, 0, 1);
    CHECK(y.shape() == Shape{1, 3, 3});
    for (double v : y.data()) CHECK(v == doctest::Approx(2.0));

    // groups == C_in with 1x1 kernels is per-channel scaling
    auto x2 = Tensor<double>::from({2, 1, 2}, {1, 2, 3, 4});
    auto w2 = Tensor<double>::from({2, 1, 1, 1}, {10, 100});
    auto y2 = op::conv2d<double>(x2, w2, nullptr, 1, 0, 2);
    CHECK(y2.at(0, 0, 0) == 10);
    CHECK(y2.at(0, 0, 1) == 20);
    CHECK(y2.at(1, 0, 0) == 300);
    CHECK(y2.at(1, 0, 1) == 400);

    CHECK_THROWS_AS(op::conv2d<double>(x2, w2, nullptr, 1, 0, 3), ConfigError);
}

TEST_CASE("conv2d gradient vs finite differences") {
    Rng rng(12);
    auto x = randn({4, 8, 8}, rng);
    auto w = randn({8, 2, 3, 3}, rng, 0.5);
    auto b = randn({8}, rng, 0.1);
    auto proj = randn({8, 8, 8}, rng);
    auto res = gradcheck::check({x, w, b}, [&] {
        auto y = op::conv2d(x, w, &b, 1, 1, 2);
        return op::sum(op::mul(y, proj));
    });
    CHECK_MESSAGE(res.ok, res.where);

    // strided, padded, grouped
    auto proj2 = randn({8, 4, 4}, rng);
    auto res2 = gradcheck::check({x, w, b}, [&] {
        auto y = op::conv2d(x, w, &b, 2, 1, 2);
        return op::sum(op::mul(y, proj2));
    });
    CHECK_MESSAGE(res2.ok, res2.where);
}

TEST_CASE("gelu matches the exact Gaussian CDF") {
    auto x = Tensor<double>::from({3}, {0.0, 10.0, 1.0});
    auto y = op::gelu(x);
    CHECK(y.at(0) == 0.0);
    CHECK(y.at(1) == doctest::Approx(10.0).epsilon(1e-7));
    CHECK(y.at(2) == doctest::Approx(1.0 * oracles::normal_cdf(1.0)).epsilon(1e-9));

    Rng rng(13);
    auto z = randn({7}, rng);
    auto res = gradcheck::check({z}, [&] { return op::sum(op::gelu(z)); });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("group_norm moments and degenerate cases") {
    auto ones = Tensor<double>::full({4, 2, 2}, 3.14);
    auto g1 = Tensor<double>::full({4}, 1.0);
    auto b0 = Tensor<double>::zeros({4});
    auto y = op::group_norm(ones, 2, g1, b0, 1e-5);
    for (double v : y.data()) CHECK(std::abs(v) < 1e-9);

    auto g0 = Tensor<double>::zeros({4});
    auto b5 = Tensor<double>::full({4}, 5.0);
    auto y2 = op::group_norm(ones, 2, g0, b5, 1e-5);
    for (double v : y2.data()) CHECK(v == doctest::Approx(5.0));

    Rng rng(14);
    auto x = randn({4, 2, 2}, rng);
    auto y3 = op::group_norm(x, 2, g1, b0, 1e-5);
    for (int g = 0; g < 2; ++g) {
        double m = 0, v = 0;
        for (int c = g * 2; c < g * 2 + 2; ++c)
            for (int i = 0; i < 4; ++i) m += y3.data()[c * 4 + i];
        m /= 8;
        for (int c = g * 2; c < g * 2 + 2; ++c)
            for (int i = 0; i < 4; ++i) {
                double d = y3.data()[c * 4 + i] - m;
                v += d * d;
            }
        v /= 8;
        CHECK(std::abs(m) < 1e-6);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
    }

    CHECK_THROWS_AS(op::group_norm(x, 3, g1, b0, 1e-5), ConfigError);
}

TEST_CASE("group_norm gradient vs finite differences") {
    Rng rng(15);
    auto x = randn({4, 2, 2}, rng);
    auto gamma = randn({4}, rng, 0.5);
    auto beta = randn({4}, rng, 0.5);
    auto proj = randn({4, 2, 2}, rng);
    auto res = gradcheck::check({x, gamma, beta}, [&] {
        return op::sum(op::mul(op::group_norm(x, 2, gamma, beta, 1e-5), proj));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("layer_norm gradient vs finite differences") {
    Rng rng(16);
    auto x = randn({3, 5}, rng);
    auto gamma = randn({5}, rng, 0.5);
    auto beta = randn({5}, rng, 0.5);
    auto proj = randn({3, 5}, rng);
    auto res = gradcheck::check({x, gamma, beta}, [&] {
        return op::sum(op::mul(op::layer_norm_rows(x, gamma, beta, 1e-5), proj));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("softmax values") {
    auto u = op::softmax_rows(Tensor<double>::zeros({1, 3}));
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3));

    auto big = op::softmax_rows(Tensor<double>::from({1, 3}, {1000, 0, 0}));
    CHECK(big.at(0, 0) == doctest::Approx(1.0));
    CHECK(std::isfinite(big.at(0, 1)));

    auto sm = op::softmax_rows(Tensor<double>::from({1, 3}, {1, 2, 3}));
    auto ref = oracles::softmax({1, 2, 3});
    for (int j = 0; j < 3; ++j) CHECK(sm.at(0, j) == doctest::Approx(ref[j]).epsilon(1e-12));
    CHECK(sm.at(0, 0) == doctest::Approx(0.0900).epsilon(5e-3));
    CHECK(sm.at(0, 1) == doctest::Approx(0.2447).epsilon(5e-3));
    CHECK(sm.at(0, 2) == doctest::Approx(0.6652).epsilon(5e-3));

    double rowsum = sm.at(0, 0) + sm.at(0, 1) + sm.at(0, 2);
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("softmax gradient vs finite differences") {
    Rng rng(17);
    auto x = randn({3, 4}, rng);
    auto proj = randn({3, 4}, rng);
    auto res = gradcheck::check({x}, [&] {
        return op::sum(op::mul(op::softmax_rows(x), proj));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("softmax cross entropy matches -log p") {
    Rng rng(18);
    auto x = randn({3, 4}, rng);
    std::vector<int> tgt = {2, 0, 3};
    auto ce = op::softmax_xent_rows(x, tgt);
    for (int i = 0; i < 3; ++i) {
        std::vector<double> row(x.data().begin() + i * 4, x.data().begin() + (i + 1) * 4);
        auto p = oracles::softmax(row);
        CHECK(ce.at(i) == doctest::Approx(-std::log(p[static_cast<size_t>(tgt[static_cast<size_t>(i)])]))
                              .epsilon(1e-10));
    }
    auto w = randn({3}, rng);
    auto res = gradcheck::check({x}, [&] {
        return op::sum(op::mul(op::softmax_xent_rows(x, tgt), w));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("interpolate area semantics") {
    // column means when collapsing the row axis
    auto x = Tensor<double>::from({1, 2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
    auto y = op::interpolate(x, 1, 4, op::Interp::Area);
    CHECK(y.at(0, 0, 0) == doctest::Approx(2.0));
    CHECK(y.at(0, 0, 1) == doctest::Approx(3.0));
    CHECK(y.at(0, 0, 2) == doctest::Approx(4.0));
    CHECK(y.at(0, 0, 3) == doctest::Approx(5.0));

    // identity extents are a no-op in every mode
    for (auto mode : {op::Interp::Area, op::Interp::Bilinear, op::Interp::Nearest}) {
        auto same = op::interpolate(x, 2, 4, mode);
        for (int64_t i = 0; i < x.numel(); ++i)
            CHECK(same.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
    }

    // fractional overlap: averages of exact source regions
    auto line = Tensor<double>::from({1, 1, 6}, {0, 1, 2, 3, 4, 5});
    auto down = op::interpolate(line, 1, 4, op::Interp::Area);
    auto ref = oracles::area_resample({0, 1, 2, 3, 4, 5}, 4);
    for (int j = 0; j < 4; ++j)
        CHECK(down.at(0, 0, j) == doctest::Approx(ref[static_cast<size_t>(j)]).epsilon(1e-12));
    CHECK(ref[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    CHECK(ref[1] == doctest::Approx(5.0 / 3).epsilon(1e-12));
    CHECK(ref[2] == doctest::Approx(10.0 / 3).epsilon(1e-12));
    CHECK(ref[3] == doctest::Approx(14.0 / 3).epsilon(1e-12));

    // global mean preserved when the target divides the source
    Rng rng(19);
    auto big = randn({2, 8, 8}, rng);
    auto small = op::interpolate(big, 4, 4, op::Interp::Area);
    double m1 = 0, m2 = 0;
    for (double v : big.data()) m1 += v;
    for (double v : small.data()) m2 += v;
    CHECK(m1 / big.numel() == doctest::Approx(m2 / small.numel()).epsilon(1e-6));
}

TEST_CASE("interpolate gradients vs finite differences") {
    Rng rng(20);
    auto x = randn({2, 4, 4}, rng);
    for (auto mode : {op::Interp::Area, op::Interp::Bilinear, op::Interp::Nearest}) {
        auto proj_up = randn({2, 6, 7}, rng);
        auto res = gradcheck::check({x}, [&] {
            return op::sum(op::mul(op::interpolate(x, 6, 7, mode), proj_up));
        });
        CHECK_MESSAGE(res.ok, res.where);
        auto proj_dn = randn({2, 3, 2}, rng);
        auto res2 = gradcheck::check({x}, [&] {
            return op::sum(op::mul(op::interpolate(x, 3, 2, mode), proj_dn));
        });
        CHECK_MESSAGE(res2.ok, res2.where);
    }
}

TEST_CASE("backward basics") {
    auto x = Tensor<double>::from({4}, {1, 2, 3, 4}).set_requires_grad(true);
    {
        Tape<double> tape;
        tape.backward(op::sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);
    x.drop_grad();
    {
        Tape<double> tape;
        tape.backward(op::mul_scalar(op::sum(x), 0.0));
    }
    for (double g : x.grad()) CHECK(g == 0.0);

    Tape<double> tape;
    auto v = op::sum(x);
    CHECK_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("scalar and pointwise op gradients") {
    Rng rng(21);
    // keep abs/min/max probes away from their kinks
    auto x = Tensor<double>::from({5}, {0.7, -1.3, 2.1, -0.4, 1.9});
    auto y = Tensor<double>::from({5}, {1.4, -0.2, 0.8, -1.7, 0.3});
    auto w = randn({5}, rng);
    auto res = gradcheck::check({x, y}, [&] {
        auto t = op::add(op::mul(x, y), op::sub(x, y));
        t = op::add(t, op::div(x, op::add_scalar(op::mul(y, y), 1.0)));
        t = op::add(t, op::max_(x, y));
        t = op::add(t, op::min_(x, y));
        t = op::add(t, op::abs_(x));
        t = op::add(t, op::relu(y));
        t = op::add(t, op::sigmoid(x));
        t = op::add(t, op::softplus(y));
        t = op::add(t, op::pow_scalar(op::sigmoid(x), 2.0));
        t = op::add(t, op::gelu(x));
        return op::sum(op::mul(t, w));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("shape surgery ops and gradients") {
    Rng rng(22);
    auto a = randn({2, 3}, rng);
    auto b = randn({2, 3}, rng);
    auto cat = op::concat0(std::vector<Tensor<double>>{a, b});
    CHECK(cat.shape() == Shape{4, 3});
    auto back = op::slice0(cat, 2, 4);
    for (int64_t i = 0; i < b.numel(); ++i) CHECK(back.data()[i] == b.data()[i]);

    auto c = op::cols(cat, 1, 3);
    CHECK(c.shape() == Shape{4, 2});
    CHECK(c.at(0, 0) == a.at(0, 1));

    auto g = op::gather_rows(cat, {3, 0, 0});
    CHECK(g.shape() == Shape{3, 3});
    CHECK(g.at(0, 2) == b.at(1, 2));

    auto proj = randn({3, 3}, rng);
    auto res = gradcheck::check({a, b}, [&] {
        auto cc = op::concat0(std::vector<Tensor<double>>{a, b});
        auto picked = op::gather_rows(cc, {3, 0, 0});
        auto r = op::reshape(op::cols(picked, 0, 3), {9});
        return op::sum(op::mul(op::reshape(r, {3, 3}), proj));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("bias and broadcast gradients") {
    Rng rng(23);
    auto x = randn({3, 4}, rng);
    auto b = randn({4}, rng);
    auto xc = randn({2, 3, 3}, rng);
    auto bc = randn({2}, rng);
    auto s = randn({}, rng);
    auto p1 = randn({3, 4}, rng);
    auto p2 = randn({2, 3, 3}, rng);
    auto res = gradcheck::check({x, b, xc, bc, s}, [&] {
        auto t1 = op::sum(op::mul(op::bias_add_rows(x, b), p1));
        auto t2 = op::sum(op::mul(op::bias_add_channels(xc, bc), p2));
        auto t3 = op::sum(op::mul_bcast_scalar(x, s));
        return op::add(op::add(t1, t2), t3);
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("transpose and mean") {
    Rng rng(24);
    auto x = randn({3, 4}, rng);
    auto t = op::transpose(x);
    CHECK(t.shape() == Shape{4, 3});
    CHECK(t.at(1, 2) == x.at(2, 1));
    auto proj = randn({4, 3}, rng);
    auto res = gradcheck::check({x}, [&] {
        return op::add(op::sum(op::mul(op::transpose(x), proj)), op::mean(x));
    });
    CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("forward and gradients are deterministic") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({4, 4}, rng).set_requires_grad(true);
        auto w = randn({4, 4}, rng).set_requires_grad(true);
        Tape<double> tape;
        auto y = op::sum(op::gelu(op::matmul(x, w)));
        tape.backward(y);
        std::vector<double> out(y.data().begin(), y.data().end());
        out.insert(out.end(), x.grad().begin(), x.grad().end());
        out.insert(out.end(), w.grad().begin(), w.grad().end());
        return out;
    };
    auto a = run(99);
    auto b = run(99);
    CHECK(a == b);
}

TEST_CASE("composite graph over every primitive passes finite differences") {
    Rng rng(25);
    auto img = randn({2, 6, 6}, rng);
    auto k = randn({4, 1, 3, 3}, rng, 0.5);
    auto kb = randn({4}, rng, 0.1);
    auto gamma = randn({4}, rng, 0.3);
    auto beta = randn({4}, rng, 0.3);
    auto wq = randn({4, 4}, rng, 0.5);
    auto lg = randn({9}, rng, 0.3);
    auto lb = randn({9}, rng, 0.3);
    auto gate = randn({}, rng, 0.3);
    auto res = gradcheck::check({img, k, kb, gamma, beta, wq, lg, lb, gate}, [&] {
        auto f = op::conv2d(img, k, &kb, 2, 1, 2);       // [4,3,3]
        f = op::group_norm(f, 2, gamma, beta, 1e-5);
        f = op::gelu(f);
        f = op::interpolate(f, 3, 3, op::Interp::Bilinear);
        auto tokens = op::transpose(op::reshape(f, {4, 9})); // [9,4]
        tokens = op::layer_norm_rows(tokens, op::slice0(lg, 0, 4), op::slice0(lb, 0, 4), 1e-5);
        auto att = op::softmax_rows(op::matmul(tokens, op::transpose(op::matmul(tokens, wq))));
        auto mixed = op::matmul(att, tokens);
        auto gated = op::mul_bcast_scalar(mixed, op::sigmoid(gate));
        auto loss1 = op::mean(op::abs_(gated));
        auto ce = op::softmax_xent_rows(op::cols(mixed, 0, 2), {0, 1, 0, 1, 0, 1, 0, 1, 0});
        return op::add(loss1, op::mean(ce));
    });
    CHECK_MESSAGE(res.ok, res.where);
}
