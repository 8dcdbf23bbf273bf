#include <doctest.h>

#include "npm/error.hpp"
#include "npm/layers.hpp"
#include "support.hpp"

using namespace npm;
using namespace npm::test;

namespace {

StBlockConfig small_block(std::size_t T = 3, std::size_t C = 2) {
    StBlockConfig c;
    c.time_steps = T;
    c.channels = C;
    c.dw_kernel = 3;
    c.dilated_kernel = 3;
    c.dilation = 2;
    c.temporal_kernel = 3;
    c.ffn_hidden = 8;
    return c;
}

}  // namespace

TEST_CASE("parameter set paths") {
    ParameterSet<double> ps;
    Rng rng(1);
    Linear<double> a(ps, "m.a", 3, 4, rng);
    CHECK(ps.size() == 2);
    CHECK(ps.contains("m.a.weight"));
    CHECK(ps.total_count() == 3 * 4 + 4);
    CHECK_THROWS_AS(Linear<double>(ps, "m.a", 3, 4, rng), ConfigError);
    CHECK_THROWS_AS(ps.get("missing"), Error);

    Checkpoint ck;
    ps.save_to(ck);
    ParameterSet<double> other;
    Rng rng2(2);
    Linear<double> b(other, "m.a", 3, 4, rng2);
    other.load_from(ck);
    for (std::size_t i = 0; i < 12; ++i) CHECK(b.weight()[i] == doctest::Approx(a.weight()[i]).epsilon(1e-7));
}

TEST_CASE("linear matches matmul plus bias") {
    ParameterSet<double> ps;
    Rng rng(3);
    Linear<double> lin(ps, "l", 5, 2, rng);
    const auto x = random64({3, 5}, 4);
    const auto y = lin(x);
    const auto ref = add(matmul(x, lin.weight()), lin.bias());
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == ref[i]);
}

TEST_CASE("spatial large-kernel attention") {
    const auto cfg = small_block();
    SUBCASE("zero input gives zero output") {
        ParameterSet<double> ps;
        Rng rng(5);
        LkaSpatial<double> lka(ps, "lka", 4, cfg, rng);
        const auto y = lka(Tensor64::zeros({1, 4, 8, 8}));
        for (auto v : y.data()) CHECK(v == 0.0);
    }
    SUBCASE("unit attention map is the identity") {
        ParameterSet<double> ps;
        Rng rng(6);
        LkaSpatial<double> lka(ps, "lka", 4, cfg, rng);
        ps.fill(0.0);
        for (auto& v : const_cast<Tensor64&>(lka.pointwise().bias()).mutable_data()) v = 1.0;
        const auto x = random64({2, 4, 8, 8}, 7);
        const auto y = lka(x);
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
    }
    SUBCASE("matches a composed reference") {
        ParameterSet<double> ps;
        Rng rng(8);
        LkaSpatial<double> lka(ps, "lka", 4, cfg, rng);
        const auto x = random64({1, 4, 8, 8}, 9);
        const auto& dw = lka.depthwise();
        const auto& dil = lka.dilated();
        const auto& pw = lka.pointwise();
        const Tensor64 a(Shape{1, 4, 8, 8}, conv_reference(x, dw.weight(), &dw.bias(), dw.options()));
        const Tensor64 b(Shape{1, 4, 8, 8}, conv_reference(a, dil.weight(), &dil.bias(), dil.options()));
        const auto m = conv_reference(b, pw.weight(), &pw.bias(), pw.options());
        const auto y = lka(x);
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(m[i] * x[i]).epsilon(1e-12));
    }
    SUBCASE("channel mismatch") {
        ParameterSet<double> ps;
        Rng rng(10);
        LkaSpatial<double> lka(ps, "lka", 4, cfg, rng);
        CHECK_THROWS_AS(lka(Tensor64::zeros({1, 3, 8, 8})), ShapeError);
    }
}

TEST_CASE("temporal attention") {
    SUBCASE("loop-over-pixels reference") {
        ParameterSet<double> ps;
        Rng rng(11);
        TkaTemporal<double> tka(ps, "tka", 4, 3, rng);
        const auto x = random64({1, 6, 4, 8, 8}, 12);
        const auto gate = tka.attention_map(x);
        const auto& w = tka.conv().weight();
        const auto& b = tka.conv().bias();
        const std::size_t T = 6, C = 4, P = 64;
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t p = 0; p < P; ++p) {
                    double acc = b[c];
                    for (std::size_t k = 0; k < 3; ++k) {
                        const long s = long(t) + long(k) - 1;
                        if (s < 0 || s >= long(T)) continue;
                        acc += w[c * 3 + k] * x[(s * C + c) * P + p];
                    }
                    CHECK(gate[(t * C + c) * P + p] == doctest::Approx(acc).epsilon(1e-12));
                }
        const auto y = tka(x);
        for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(gate[i] * x[i]).epsilon(1e-12));
    }
    SUBCASE("single frame with kernel 1 is a per-channel gate") {
        ParameterSet<double> ps;
        Rng rng(13);
        TkaTemporal<double> tka(ps, "tka", 2, 1, rng);
        const auto x = random64({1, 1, 2, 3, 3}, 14);
        const auto gate = tka.attention_map(x);
        const auto& w = tka.conv().weight();
        const auto& b = tka.conv().bias();
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t p = 0; p < 9; ++p)
                CHECK(gate[c * 9 + p] == doctest::Approx(w[c] * x[c * 9 + p] + b[c]).epsilon(1e-12));
    }
    SUBCASE("time-constant input with an averaging kernel") {
        ParameterSet<double> ps;
        Rng rng(15);
        TkaTemporal<double> tka(ps, "tka", 2, 3, rng);
        ps.fill(0.0);
        for (auto& v : const_cast<Tensor64&>(tka.conv().weight()).mutable_data()) v = 1.0 / 3.0;
        const auto frame = random64({1, 1, 2, 4, 4}, 16);
        const auto x = concat(std::vector<Tensor64>{frame, frame, frame, frame, frame}, 1);
        const auto gate = tka.attention_map(x);
        // Interior frames see three equal values; the map is constant there.
        for (std::size_t t = 2; t < 4; ++t)
            for (std::size_t i = 0; i < 32; ++i) CHECK(gate[t * 32 + i] == doctest::Approx(gate[32 + i]).epsilon(1e-14));
    }
    SUBCASE("even kernel rejected") {
        ParameterSet<double> ps;
        Rng rng(17);
        CHECK_THROWS_AS(TkaTemporal<double>(ps, "tka", 2, 2, rng), ConfigError);
    }
}

TEST_CASE("ST-Block") {
    const auto cfg = small_block();
    SUBCASE("zero parameters give the identity") {
        ParameterSet<double> ps;
        Rng rng(18);
        StBlock<double> block(ps, "b", cfg, rng);
        ps.fill(0.0);
        const auto x = random64({2, 3, 2, 8, 8}, 19);
        const auto y = block(x);
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
    }
    SUBCASE("deterministic forward") {
        ParameterSet<float> ps;
        Rng rng(20);
        StBlock<float> block(ps, "b", cfg, rng);
        const auto x = random32({1, 3, 2, 8, 8}, 21);
        const auto a = block(x), b = block(x);
        for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    }
    SUBCASE("gradient check") {
        ParameterSet<double> ps;
        Rng rng(22);
        StBlock<double> block(ps, "b", cfg, rng);
        const auto x = random64({1, 3, 2, 6, 6}, 23);
        CHECK(param_grad_check(ps, [&] { return probe_sum(block(x)); }) < 1e-4);
        CHECK(grad_check([&](const std::vector<Tensor64>& v) { return probe_sum(block(v[0])); }, {x}) < 1e-4);
    }
    SUBCASE("batch extent preserved and shape checked") {
        ParameterSet<double> ps;
        Rng rng(24);
        StBlock<double> block(ps, "b", cfg, rng);
        CHECK(block(random64({3, 3, 2, 8, 8}, 25)).shape() == Shape{3, 3, 2, 8, 8});
        CHECK_THROWS_AS(block(random64({1, 4, 2, 8, 8}, 26)), ShapeError);
    }
    SUBCASE("config validation") {
        auto c = cfg;
        CHECK_NOTHROW(c.validate(8));
        CHECK_THROWS_AS(c.validate(4), ConfigError);
        c.dw_kernel = 4;
        CHECK_THROWS_AS(c.validate(8), ConfigError);
    }
}

TEST_CASE("layer gradient checks") {
    ParameterSet<double> ps;
    Rng rng(27);
    Linear<double> lin(ps, "lin", 4, 3, rng);
    GroupNorm<double> gn(ps, "gn", 4, 2);
    FeedForward<double> ffn(ps, "ffn", 4, 6, rng);
    LkaSpatial<double> lka(ps, "lka", 4, small_block(), rng);
    const auto x = random64({2, 4, 6, 6}, 28);
    const auto v = random64({5, 4}, 29);
    CHECK(param_grad_check(ps, [&] { return probe_sum(lin(v)) + probe_sum(lka(ffn(gn(x)))); }) < 1e-4);
}

TEST_CASE("encoder and decoder") {
    ParameterSet<double> ps;
    Rng rng(30);
    Encoder<double> enc(ps, "enc", 4, 8, 4, rng);
    Decoder<double> dec(ps, "dec", 8, 4, 4, rng);
    CHECK(enc.downsamplings() == 2);
    const auto x = random64({1, 4, 64, 64}, 31);
    const auto z = enc(x);
    CHECK(z.shape() == Shape{1, 8, 16, 16});
    const auto y = dec(z);
    CHECK(y.shape() == x.shape());
    double diff = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) diff = std::max(diff, std::abs(y[i] - x[i]));
    CHECK(diff > 1e-3);
    try {
        (void)enc(random64({1, 4, 10, 12}, 32));
        FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("divisible by 4") != std::string::npos);
    }

    ParameterSet<double> small;
    Encoder<double> e2(small, "e", 2, 3, 2, rng);
    Decoder<double> d2(small, "d", 3, 2, 2, rng);
    const auto xs = random64({1, 2, 4, 4}, 33);
    CHECK(param_grad_check(small, [&] { return probe_sum(d2(e2(xs))); }) < 1e-4);
}

TEST_CASE("parameter count is a pure function of the configuration") {
    auto count = [](std::uint64_t seed) {
        ParameterSet<float> ps;
        Rng rng(seed);
        StBlock<float> b(ps, "b", small_block(6, 4), rng);
        Encoder<float> e(ps, "e", 4, 4, 4, rng);
        return ps.total_count();
    };
    CHECK(count(1) == count(2));
    CHECK(default_norm_groups(24) == 8);
    CHECK(default_norm_groups(6) == 6);
    CHECK(default_norm_groups(7) == 7);
}
