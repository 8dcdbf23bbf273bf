#include <doctest.h>

#include <cmath>
#include <limits>

#include "npm/checkpoint.hpp"
#include "npm/error.hpp"
#include "npm/ops.hpp"
#include "op_cases.hpp"
#include "support.hpp"

using namespace npm;
using namespace npm::test;

namespace {

constexpr double kGradTol = 1e-4;

long double gelu_ref(long double x) { return 0.5L * x * (1.0L + std::erf(x / std::sqrt(2.0L))); }

}  // namespace

TEST_CASE("tensor construction checks extents") {
    Tensor t({2, 3}, 1.5f);
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<float>(3)), ShapeError);
    CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
    Tensor null;
    CHECK_FALSE(null.valid());
    CHECK_THROWS_AS(null.data(), Error);
}

TEST_CASE("elementwise forward values") {
    const auto zero = Tensor64::scalar(0.0);
    CHECK(gelu(zero).item() == 0.0);
    CHECK(sigmoid(zero).item() == 0.5);
    CHECK(gelu(Tensor64::scalar(1.0)).item() == doctest::Approx(double(gelu_ref(1.0L))).epsilon(1e-15));
    CHECK(gelu(Tensor64::scalar(-2.5)).item() == doctest::Approx(double(gelu_ref(-2.5L))).epsilon(1e-14));
    CHECK(exp(Tensor64::scalar(1.0)).item() == doctest::Approx(std::exp(1.0)));
    CHECK(log(Tensor64::scalar(std::exp(2.0))).item() == doctest::Approx(2.0));
    CHECK(clamp(Tensor64({3}, {-2.0, 0.5, 3.0}), -1.0, 1.0)[0] == -1.0);
}

TEST_CASE("broadcasting") {
    const auto a = random64({2, 3, 4}, 1);
    const auto z = Tensor64::zeros({4});
    const auto s = add(a, z);
    CHECK(s.shape() == a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(s[i] == a[i]);

    const auto row = Tensor64({1, 3, 1}, {10.0, 20.0, 30.0});
    const auto b = add(a, row);
    CHECK(b[1 * 12 + 2 * 4 + 3] == a[1 * 12 + 2 * 4 + 3] + 30.0);
    CHECK(broadcast_shapes({5, 1, 3}, {4, 1}) == Shape{5, 4, 3});

    try {
        (void)add(Tensor64({2, 3}), Tensor64({4}));
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
        CHECK(msg.find("4") != std::string::npos);
    }
}

TEST_CASE("domain errors instead of NaN") {
    CHECK_THROWS_AS(log(Tensor64({2}, {1.0, 0.0})), DomainError);
    CHECK_THROWS_AS(log(Tensor64({1}, {-1.0})), DomainError);
    CHECK_THROWS_AS(div(Tensor64({2}, {1.0, 1.0}), Tensor64({2}, {1.0, 0.0})), DomainError);
}

TEST_CASE("matmul") {
    const auto m = random64({3, 4}, 2);
    Tensor64 eye({3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye.mutable_data()[i * 4] = 1.0;
    const auto p = matmul(eye, m);
    for (std::size_t i = 0; i < m.numel(); ++i) CHECK(p[i] == m[i]);

    CHECK(matmul(Tensor64({1, 1}, {2.0}), Tensor64({1, 1}, {3.0})).item() == 6.0);

    const auto a = random64({4, 5}, 3), b = random64({5, 3}, 4);
    const auto c = matmul(a, b);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = 0;
            for (std::size_t k = 0; k < 5; ++k) acc += a[i * 5 + k] * b[k * 3 + j];
            CHECK(c[i * 3 + j] == doctest::Approx(acc).epsilon(1e-13));
        }
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("conv2d against direct summation") {
    SUBCASE("1x1 identity") {
        const auto x = random64({1, 1, 5, 5}, 5);
        const auto y = conv2d(x, Tensor64::ones({1, 1, 1, 1}), Tensor64{});
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
    }
    SUBCASE("box filter on a constant field") {
        const auto x = Tensor64::full({1, 1, 6, 6}, 2.5);
        const auto y = conv2d(x, Tensor64::full({1, 1, 3, 3}, 1.0 / 9.0), Tensor64{});
        CHECK(y.shape() == Shape{1, 1, 4, 4});
        for (auto v : y.data()) CHECK(v == doctest::Approx(2.5).epsilon(1e-14));
    }
    SUBCASE("dilated depthwise") {
        const auto x = random64({1, 2, 5, 5}, 6);
        const auto w = random64({2, 1, 3, 3}, 7);
        Conv2dOptions o;
        o.dilation = {2, 2};
        o.padding = {2, 2};
        o.groups = 2;
        const auto y = conv2d(x, w, Tensor64{}, o);
        const auto ref = conv_reference(x, w, nullptr, o);
        REQUIRE(y.numel() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-13));
    }
    SUBCASE("dense, strided, padded, with bias") {
        const auto x = random64({2, 3, 7, 6}, 8);
        const auto w = random64({4, 3, 3, 3}, 9);
        const auto b = random64({4}, 10);
        Conv2dOptions o;
        o.stride = {2, 2};
        o.padding = {1, 1};
        const auto y = conv2d(x, w, b, o);
        CHECK(y.shape() == Shape{2, 4, 4, 3});
        const auto ref = conv_reference(x, w, &b, o);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-13));
    }
    SUBCASE("grouped") {
        const auto x = random64({1, 4, 5, 5}, 11);
        const auto w = random64({6, 2, 3, 1}, 12);
        Conv2dOptions o;
        o.groups = 2;
        o.padding = {1, 0};
        const auto y = conv2d(x, w, Tensor64{}, o);
        const auto ref = conv_reference(x, w, nullptr, o);
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-13));
    }
    SUBCASE("extent formula and errors") {
        CHECK(conv_output_extent(64, 7, 1, 9, 3) == 64);
        CHECK(conv_output_extent(64, 3, 2, 1, 1) == 32);
        CHECK_THROWS_AS(conv_output_extent(4, 7, 1, 0, 1), ConfigError);
        CHECK_THROWS_AS(conv2d(random64({1, 3, 4, 4}, 1), random64({2, 1, 3, 3}, 2), Tensor64{},
                               Conv2dOptions{{1, 1}, {0, 0}, {1, 1}, 2}),
                        Error);
    }
}

TEST_CASE("reductions and softmax") {
    CHECK(sum(Tensor64::ones({2, 3})).item() == 6.0);
    CHECK(mean(Tensor64::full({4}, 3.0)).item() == 3.0);
    const auto x = Tensor64({2, 3}, {1, 5, 2, 7, 0, 3});
    const auto mx = reduce(ReduceKind::max, x, {1});
    CHECK(mx.shape() == Shape{2});
    CHECK(mx[0] == 5.0);
    CHECK(mx[1] == 7.0);
    CHECK(reduce(ReduceKind::sum, x, {0}, true).shape() == Shape{1, 3});
    CHECK_THROWS(reduce(ReduceKind::sum, x, {2}));

    const auto c = softmax(Tensor64::full({5}, 3.0), 0);
    for (auto v : c.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    const auto big = softmax(Tensor64({2}, {1000.0, 1000.5}), 0);
    const long double e = std::exp(-0.5L);
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == doctest::Approx(double(e / (1 + e))).epsilon(1e-14));
    CHECK(big[1] == doctest::Approx(double(1 / (1 + e))).epsilon(1e-14));

    const auto r = softmax(random32({6, 17}, 13, -50, 50), 1);
    for (std::size_t i = 0; i < 6; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 17; ++j) s += r[i * 17 + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    const auto ls = log_softmax(Tensor64({3}, {1.0, 2.0, 3.0}), 0);
    const auto sm = softmax(Tensor64({3}, {1.0, 2.0, 3.0}), 0);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ls[i] == doctest::Approx(std::log(sm[i])).epsilon(1e-14));
}

TEST_CASE("shape ops") {
    const auto x = random64({2, 3, 4}, 14);
    const auto p = permute(x, {2, 0, 1});
    CHECK(p.shape() == Shape{4, 2, 3});
    CHECK(p[(3 * 2 + 1) * 3 + 2] == x[(1 * 3 + 2) * 4 + 3]);
    const auto s = slice(x, 1, 1, 3);
    CHECK(s.shape() == Shape{2, 2, 4});
    CHECK(s[0] == x[4]);
    const auto c = concat(std::vector<Tensor64>{x, x}, 2);
    CHECK(c.shape() == Shape{2, 3, 8});
    CHECK(c[5] == x[1]);
    CHECK(reshape(x, {6, 4}).shape() == Shape{6, 4});
    CHECK_THROWS_AS(reshape(x, {5, 5}), ShapeError);
    const auto u = upsample_nearest(Tensor64({1, 1, 2, 2}, {1, 2, 3, 4}), 2);
    CHECK(u.shape() == Shape{1, 1, 4, 4});
    CHECK(u[0] == 1);
    CHECK(u[1] == 1);
    CHECK(u[2] == 2);
    CHECK(u[15] == 4);
}

TEST_CASE("group norm normalises each group") {
    const auto x = random64({2, 4, 3, 3}, 15, -3, 5);
    const auto y = group_norm(x, 2, Tensor64::ones({4}), Tensor64::zeros({4}), 0.0);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t g = 0; g < 2; ++g) {
            double m = 0, v = 0;
            for (std::size_t i = 0; i < 18; ++i) m += y[n * 36 + g * 18 + i];
            m /= 18;
            for (std::size_t i = 0; i < 18; ++i) v += std::pow(y[n * 36 + g * 18 + i] - m, 2);
            CHECK(m == doctest::Approx(0.0).epsilon(1e-12).scale(1));
            CHECK(v / 18 == doctest::Approx(1.0).epsilon(1e-10));
        }
}

TEST_CASE("backward basics") {
    SUBCASE("sum gives ones") {
        auto x = random64({2, 3}, 16).set_requires_grad();
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(sum(x));
        for (auto g : x.grad_data()) CHECK(g == 1.0);
    }
    SUBCASE("sum of squares") {
        auto x = Tensor64({2}, {1.0, 2.0}).set_requires_grad();
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(sum(mul(x, x)));
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
    }
    SUBCASE("fan-out accumulates") {
        auto x = Tensor64({3}, {1.0, -1.0, 2.0}).set_requires_grad();
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(sum(add(scale(x, 3.0), x)));
        for (auto g : x.grad_data()) CHECK(g == 4.0);
    }
    SUBCASE("detached inputs receive nothing") {
        auto x = random64({3}, 17).set_requires_grad();
        const auto d = x.detach();
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        tape.backward(sum(mul(x, d)));
        CHECK(x.has_grad());
        CHECK_FALSE(d.requires_grad());
        CHECK_FALSE(d.has_grad());
    }
    SUBCASE("non-scalar loss") {
        auto x = random64({3}, 18).set_requires_grad();
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        CHECK_THROWS_AS(tape.backward(scale(x, 2.0)), ShapeError);
    }
    SUBCASE("no tape, no recording") {
        auto x = random64({3}, 19).set_requires_grad();
        const auto y = exp(x);
        CHECK_FALSE(y.tape_id().has_value());
    }
    SUBCASE("topological order on the tape") {
        auto x = random64({3}, 20).set_requires_grad();
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        const auto a = exp(x);
        const auto b = mul(a, x);
        REQUIRE(a.tape_id());
        REQUIRE(b.tape_id());
        CHECK(*a.tape_id() < *b.tape_id());
        CHECK(tape.op_name(*b.tape_id()) == "mul");
    }
}

TEST_CASE("finite differences") {
    const auto sq = [](const Tensor64& x) {
        double s = 0;
        for (auto v : x.data()) s += v * v;
        return s;
    };
    const auto flat = finite_diff_grad(sq, Tensor64::zeros({4}));
    for (auto g : flat.data()) CHECK(g == doctest::Approx(0.0));
    const std::vector<double> coef{3.0, -2.0, 0.5};
    const auto lin = [&](const Tensor64& x) { return coef[0] * x[0] + coef[1] * x[1] + coef[2] * x[2]; };
    const auto g = finite_diff_grad(lin, random64({3}, 21));
    for (std::size_t i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(coef[i]).epsilon(1e-9));
}

TEST_CASE("gradient check of every differentiable op") {
    for (const auto& c : differentiable_op_cases()) {
        CAPTURE(c.name);
        CHECK(grad_check(c.f, c.inputs) < kGradTol);
    }
}

TEST_CASE("f32 and f64 agree") {
    const auto x64 = random64({1, 2, 6, 6}, 60), w64 = random64({3, 2, 3, 3}, 61);
    const auto y64 = gelu(conv2d(x64, w64, Tensor64{}));
    const auto y32 = gelu(conv2d(x64.cast<float>(), w64.cast<float>(), Tensor{}));
    for (std::size_t i = 0; i < y64.numel(); ++i) CHECK(y32[i] == doctest::Approx(y64[i]).epsilon(1e-5).scale(1));
}

TEST_CASE("repeated evaluation is bit-identical") {
    const auto x = random32({2, 4, 8, 8}, 62), w = random32({4, 4, 3, 3}, 63);
    Conv2dOptions o;
    o.padding = {1, 1};
    const auto a = softmax(conv2d(x, w, Tensor{}, o), 1);
    const auto b = softmax(conv2d(x, w, Tensor{}, o), 1);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("checkpoint round trip") {
    std::mt19937_64 rng(64);
    for (int trial = 0; trial < 20; ++trial) {
        Checkpoint c;
        const int records = 1 + int(rng() % 5);
        for (int r = 0; r < records; ++r) {
            Shape s;
            for (std::size_t k = 0, rank = 1 + rng() % 3; k < rank; ++k) s.push_back(1 + rng() % 4);
            c.add("p." + std::to_string(r), random32(s, rng()));
        }
        const auto bytes = c.encode();
        const auto back = Checkpoint::decode(bytes);
        CHECK(back == c);
        CHECK(back.encode() == bytes);
    }
    Checkpoint c;
    c.add_scalar("x", 1.0f);
    auto bytes = c.encode();
    CHECK(bytes.substr(0, 8) == "NPMCKPT1");
    CHECK_THROWS_AS(Checkpoint::decode(bytes.substr(0, bytes.size() - 1)), ParseError);
    bytes[0] = 'X';
    CHECK_THROWS_AS(Checkpoint::decode(bytes), ParseError);
    CHECK_THROWS_AS(c.add_scalar("x", 2.0f), ConfigError);
}
