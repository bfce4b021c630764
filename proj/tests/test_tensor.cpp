#include <doctest.h>

#include <cmath>

#include "owd/tensor.hpp"

#define OWD_TESTUTIL_WITH_TENSOR
#include "testutil.hpp"

using owd::Tensor;

namespace {

Tensor rand_leaf(std::vector<int> shape, owd::Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.values()) v = rng.uniform(-scale, scale);
    return t;
}

// Random constant projection so reduction gradients are non-uniform.
Tensor rand_const(std::vector<int> shape, owd::Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape), false);
    for (auto& v : t.values()) v = rng.uniform(0.2, 1.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    return t;
}

}  // namespace

TEST_CASE("tensor construction and shape validation") {
    CHECK_THROWS_AS(Tensor::zeros({0, 3}), owd::shape_error);
    CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), owd::shape_error);
    Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.at(1, 2) == 6.0);
    CHECK(Tensor::scalar(4.5).value() == 4.5);
    CHECK_THROWS_AS(t.value(), owd::shape_error);
}

TEST_CASE("matmul matches a hand-computed product") {
    const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    const Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
    const Tensor c = owd::matmul(a, b);
    CHECK(c.at(0, 0) == 58.0);
    CHECK(c.at(0, 1) == 64.0);
    CHECK(c.at(1, 0) == 139.0);
    CHECK(c.at(1, 1) == 154.0);
    CHECK_THROWS_AS(owd::matmul(a, a), owd::shape_error);
}

TEST_CASE("softmax and log_softmax row invariants") {
    owd::Rng rng(500);
    const Tensor x = rand_leaf({5, 7}, rng, 4.0);
    const Tensor s = owd::softmax_rows(x);
    const Tensor ls = owd::log_softmax_rows(x);
    for (int i = 0; i < 5; ++i) {
        double rs = 0.0;
        for (int j = 0; j < 7; ++j) {
            rs += s.at(i, j);
            CHECK(s.at(i, j) > 0.0);
            CHECK(std::exp(ls.at(i, j)) == doctest::Approx(s.at(i, j)).epsilon(1e-10));
        }
        CHECK(rs == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("layernorm rows are standardized") {
    owd::Rng rng(501);
    const Tensor x = rand_leaf({4, 16}, rng, 3.0);
    const Tensor y = owd::layernorm_rows(x);
    for (int i = 0; i < 4; ++i) {
        double mu = 0.0, var = 0.0;
        for (int j = 0; j < 16; ++j) mu += y.at(i, j);
        mu /= 16;
        for (int j = 0; j < 16; ++j) var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
        var /= 16;
        CHECK(mu == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("conv2d identity kernel reproduces its input") {
    owd::Rng rng(502);
    Tensor x = rand_leaf({2, 5, 5}, rng);
    Tensor w = Tensor::zeros({2, 2, 3, 3});
    // Kernel center passes each channel through itself.
    w.values()[(0 * 2 + 0) * 9 + 4] = 1.0;
    w.values()[(1 * 2 + 1) * 9 + 4] = 1.0;
    const Tensor b = Tensor::zeros({1, 2});
    const Tensor y = owd::conv2d(x, w, b, 1, 1);
    REQUIRE(y.shape() == std::vector<int>{2, 5, 5});
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.v(i) == doctest::Approx(x.v(i)).epsilon(1e-12));
}

TEST_CASE("conv2d strided shapes and bias") {
    const Tensor x = Tensor::full({1, 6, 6}, 1.0);
    const Tensor w = Tensor::full({3, 1, 3, 3}, 1.0);
    const Tensor b = Tensor::from({1, 3}, {0.5, -0.5, 0.0});
    const Tensor y = owd::conv2d(x, w, b, 2, 1);
    REQUIRE(y.shape() == std::vector<int>{3, 3, 3});
    // Interior window sums nine ones; the (1,1) output of channel 0 adds bias.
    CHECK(y.v((0 * 3 + 1) * 3 + 1) == doctest::Approx(9.5).epsilon(1e-12));
    CHECK(y.v((1 * 3 + 1) * 3 + 1) == doctest::Approx(8.5).epsilon(1e-12));
    // Top-left window at stride 2 with pad 1 covers a 2x2 valid region.
    CHECK(y.v(0) == doctest::Approx(4.5).epsilon(1e-12));
}

TEST_CASE("bce_with_logits matches the naive formula") {
    owd::Rng rng(503);
    for (int i = 0; i < 50; ++i) {
        const double z = rng.uniform(-6.0, 6.0);
        const double t = rng.bernoulli(0.5) ? 1.0 : 0.0;
        const Tensor loss = owd::bce_with_logits(Tensor::scalar(z), Tensor::scalar(t));
        const double s = 1.0 / (1.0 + std::exp(-z));
        const double naive = -(t * std::log(s) + (1.0 - t) * std::log(1.0 - s));
        CHECK(loss.value() == doctest::Approx(naive).epsilon(1e-9));
    }
}

TEST_CASE("wrap_angle lands in the half-open principal band") {
    owd::Rng rng(504);
    for (int i = 0; i < 100; ++i) {
        const double x = rng.uniform(-8.0, 8.0);
        const Tensor w = owd::wrap_angle(Tensor::scalar(x));
        CHECK(w.value() > -owd::kHalfPi - 1e-12);
        CHECK(w.value() <= owd::kHalfPi + 1e-12);
        const double k = (x - w.value()) / owd::kPi;
        CHECK(std::fabs(k - std::round(k)) < 1e-9);
    }
}

TEST_CASE("detach copies values and blocks gradient flow") {
    owd::Rng rng(505);
    Tensor x = rand_leaf({3, 3}, rng);
    const Tensor d = owd::detach(x);
    CHECK(owd::value_hash(d) == owd::value_hash(x));
    CHECK_FALSE(d.requires_grad());
    const Tensor loss = owd::sum(owd::mul(d, d));
    CHECK_FALSE(loss.requires_grad());
    // Mixing a detached branch with a live one only trains the live branch.
    Tensor y = rand_leaf({3, 3}, rng);
    const Tensor mixed = owd::sum(owd::add(owd::mul(owd::detach(y), d), owd::mul(y, y)));
    y.node().zero_grad();
    owd::backward(mixed);
    for (int i = 0; i < 9; ++i)
        CHECK(y.node().grad[static_cast<std::size_t>(i)] ==
              doctest::Approx(2.0 * y.v(static_cast<std::size_t>(i))).epsilon(1e-12));
}

TEST_CASE("gradient accumulates across repeated uses of a node") {
    Tensor x = Tensor::from({1}, {3.0}, true);
    // f = x*x + 2x so df/dx = 2x + 2 = 8.
    const Tensor loss = owd::add(owd::mul(x, x), owd::mul_scalar(x, 2.0));
    x.node().zero_grad();
    owd::backward(loss);
    CHECK(x.node().grad[0] == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("finite-difference checks for arithmetic and broadcast ops") {
    owd::Rng rng(506);
    Tensor a = rand_leaf({4, 5}, rng);
    Tensor b = rand_leaf({4, 5}, rng);
    Tensor v = rand_leaf({1, 5}, rng);
    for (auto& x : b.values()) x += (x >= 0 ? 1.0 : -1.0);  // keep divisors away from zero
    for (auto& x : v.values()) x += (x >= 0 ? 1.0 : -1.0);
    const Tensor mixer = rand_const({4, 5}, rng);

    auto check = [&](const std::function<Tensor()>& build, const std::vector<Tensor>& leaves) {
        CHECK(testutil::max_grad_error(build, leaves) < 1e-4);
    };
    check([&] { return owd::sum(owd::mul(owd::add(a, b), mixer)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::sub(a, b), mixer)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::mul(a, b), mixer)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::div(a, b), mixer)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::add_rowvec(a, v), mixer)); }, {a, v});
    check([&] { return owd::sum(owd::mul(owd::sub_rowvec(a, v), mixer)); }, {a, v});
    check([&] { return owd::sum(owd::mul(owd::mul_rowvec(a, v), mixer)); }, {a, v});
    check([&] { return owd::sum(owd::mul(owd::div_rowvec(a, v), mixer)); }, {a, v});
    check([&] { return owd::mean(owd::mul(owd::add_scalar(owd::mul_scalar(a, 1.7), 0.3), mixer)); },
          {a});
    const Tensor row_mixer = rand_const({1, 5}, rng);
    check([&] { return owd::sum(owd::mul(owd::mean_over_rows(owd::mul(a, b)), row_mixer)); },
          {a, b});
}

TEST_CASE("finite-difference checks for nonlinearities") {
    owd::Rng rng(507);
    Tensor a = rand_leaf({3, 6}, rng, 2.0);
    // Keep coordinates away from the relu/abs kink and log/sqrt domain edges.
    for (auto& x : a.values())
        if (std::fabs(x) < 0.05) x = 0.1;
    Tensor pos = rand_leaf({3, 6}, rng);
    for (auto& x : pos.values()) x = std::fabs(x) + 0.5;
    const Tensor mixer = rand_const({3, 6}, rng);

    auto check = [&](const std::function<Tensor()>& build, const std::vector<Tensor>& leaves) {
        CHECK(testutil::max_grad_error(build, leaves) < 1e-4);
    };
    check([&] { return owd::sum(owd::mul(owd::relu(a), mixer)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::sigmoid(a), mixer)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::tanh(a), mixer)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::exp(a), mixer)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::log(pos), mixer)); }, {pos});
    check([&] { return owd::sum(owd::mul(owd::sqrt(pos), mixer)); }, {pos});
    check([&] { return owd::sum(owd::mul(owd::square(a), mixer)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::abs(a), mixer)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::smooth_l1(a, 0.7), mixer)); }, {a});
}

TEST_CASE("finite-difference checks for matrix and normalization ops") {
    owd::Rng rng(508);
    Tensor a = rand_leaf({4, 3}, rng);
    Tensor b = rand_leaf({3, 5}, rng);
    Tensor w = rand_leaf({3, 2}, rng);
    Tensor bias = rand_leaf({1, 2}, rng);
    const Tensor mix45 = rand_const({4, 5}, rng);
    const Tensor mix42 = rand_const({4, 2}, rng);
    const Tensor mix34 = rand_const({3, 4}, rng);
    const Tensor mix43 = rand_const({4, 3}, rng);

    auto check = [&](const std::function<Tensor()>& build, const std::vector<Tensor>& leaves) {
        CHECK(testutil::max_grad_error(build, leaves) < 1e-4);
    };
    check([&] { return owd::sum(owd::mul(owd::matmul(a, b), mix45)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::linear(a, w, bias), mix42)); }, {a, w, bias});
    check([&] { return owd::sum(owd::mul(owd::transpose(a), mix34)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::softmax_rows(a), mix43)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::log_softmax_rows(a), mix43)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::layernorm_rows(a), mix43)); }, {a});
}

TEST_CASE("finite-difference checks for structural ops") {
    owd::Rng rng(509);
    Tensor a = rand_leaf({5, 4}, rng);
    Tensor b = rand_leaf({2, 4}, rng);
    Tensor c = rand_leaf({5, 3}, rng);
    auto check = [&](const std::function<Tensor()>& build, const std::vector<Tensor>& leaves) {
        CHECK(testutil::max_grad_error(build, leaves) < 1e-4);
    };
    const Tensor m34 = rand_const({3, 4}, rng);
    const Tensor m52 = rand_const({5, 2}, rng);
    const Tensor m74 = rand_const({7, 4}, rng);
    const Tensor m57 = rand_const({5, 7}, rng);
    const Tensor m44 = rand_const({4, 4}, rng);
    const Tensor m163 = rand_const({16, 3}, rng);
    check([&] { return owd::sum(owd::mul(owd::slice_rows(a, 1, 4), m34)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::slice_cols(a, 1, 3), m52)); }, {a});
    check([&] { return owd::sum(owd::mul(owd::concat_rows({a, b}), m74)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::concat_cols({a, c}), m57)); }, {a, c});
    check([&] { return owd::sum(owd::mul(owd::gather_rows(a, {0, 2, 2, 4}), m44)); }, {a});
    Tensor m = rand_leaf({3, 4, 4}, rng);
    check([&] { return owd::sum(owd::mul(owd::chw_to_tokens(m), m163)); }, {m});
}

TEST_CASE("finite-difference checks for extrema and composite losses") {
    owd::Rng rng(510);
    Tensor a = rand_leaf({4, 4}, rng, 2.0);
    Tensor b = rand_leaf({4, 4}, rng, 2.0);
    // Separate the operands so no coordinate sits at a tie.
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::fabs(a.v(i) - b.v(i)) < 0.05) b.values()[i] += 0.2;
    Tensor logits = rand_leaf({6, 1}, rng, 3.0);
    const Tensor targets = Tensor::from({6, 1}, {1, 0, 1, 1, 0, 0});
    auto check = [&](const std::function<Tensor()>& build, const std::vector<Tensor>& leaves) {
        CHECK(testutil::max_grad_error(build, leaves) < 1e-4);
    };
    const Tensor mix1 = rand_const({4, 4}, rng);
    const Tensor mix2 = rand_const({4, 4}, rng);
    const Tensor mix3 = rand_const({4, 4}, rng);
    const Tensor mix61 = rand_const({6, 1}, rng);
    check([&] { return owd::sum(owd::mul(owd::maximum(a, b), mix1)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::minimum(a, b), mix2)); }, {a, b});
    check([&] { return owd::sum(owd::mul(owd::maximum_scalar(a, 0.3), mix3)); }, {a});
    check([&] {
        return owd::mean(owd::mul(owd::bce_with_logits(logits, targets), mix61));
    }, {logits});
}

TEST_CASE("finite-difference check for conv2d") {
    owd::Rng rng(511);
    Tensor x = rand_leaf({2, 6, 6}, rng);
    Tensor w = rand_leaf({3, 2, 3, 3}, rng, 0.5);
    Tensor b = rand_leaf({1, 3}, rng, 0.5);
    const Tensor mixer = rand_const({3, 3, 3}, rng);
    owd::Rng pick(512);
    const double err = testutil::max_grad_error(
        [&] { return owd::sum(owd::mul(owd::conv2d(x, w, b, 2, 1), mixer)); }, {x, w, b}, 1e-5, 24,
        &pick);
    CHECK(err < 1e-4);
}

TEST_CASE("finite-difference check for a deep composite graph") {
    owd::Rng rng(513);
    Tensor x = rand_leaf({6, 8}, rng);
    Tensor w1 = rand_leaf({8, 16}, rng, 0.5);
    Tensor b1 = rand_leaf({1, 16}, rng, 0.1);
    Tensor w2 = rand_leaf({16, 4}, rng, 0.5);
    Tensor b2 = rand_leaf({1, 4}, rng, 0.1);
    const Tensor mixer = rand_const({6, 4}, rng);
    auto build = [&] {
        Tensor h = owd::layernorm_rows(owd::relu(owd::linear(x, w1, b1)));
        Tensor out = owd::softmax_rows(owd::linear(h, w2, b2));
        return owd::sum(owd::mul(out, mixer));
    };
    CHECK(testutil::max_grad_error(build, {x, w1, b1, w2, b2}) < 1e-4);
}

TEST_CASE("check_finite raises on poisoned values") {
    Tensor t = Tensor::from({2}, {1.0, 2.0});
    CHECK_NOTHROW(owd::check_finite(t, "probe"));
    t.values()[1] = std::nan("");
    CHECK_THROWS_AS(owd::check_finite(t, "probe"), owd::numeric_error);
}
