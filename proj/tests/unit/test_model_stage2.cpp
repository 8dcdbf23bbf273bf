#include <doctest.h>

#include <cmath>

#include "npm/error.hpp"
#include "npm/model_stage2.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace npm;
using namespace npm::test;

namespace {

S2rConfig small(std::size_t width = 4) {
    S2rConfig c;
    c.base_width = width;
    c.depth = 1;
    c.disc_depth = 1;
    return c;
}

double max_abs_diff(const Tensor64& a, const Tensor64& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

}  // namespace

TEST_CASE("rain normalisation") {
    const S2rConfig c;
    CHECK(c.to_network(0) == 0.0);
    CHECK(c.to_network(100) == doctest::Approx(1.0));
    CHECK(c.to_network(-3) == 0.0);
    CHECK(c.to_network(1e4) == doctest::Approx(1.0));
    CHECK(c.to_network(8) == doctest::Approx(std::log1p(8.0) / std::log1p(100.0)));
    for (double r : {0.0, 0.3, 1.0, 4.0, 8.0, 37.5, 99.9}) CHECK(c.from_network(c.to_network(r)) == doctest::Approx(r));
    CHECK(c.from_network(2.0) == doctest::Approx(100.0));
    CHECK(c.from_network(-1.0) == 0.0);

    auto bad = small();
    bad.rate_max = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = small();
    bad.lambda = -0.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(S2rConfig{}.lambda == 0.01);
}

TEST_CASE("generator and discriminator outputs") {
    S2rModel<float> model(small(), 3);
    const auto sat = random32({3, 8, 8}, 4, 0, 1);
    const auto dem = random32({1, 8, 8}, 5, 0, 1);
    const auto pred = model.generate(sat, dem);
    CHECK(pred.rate.shape() == Shape{1, 8, 8});
    for (auto v : pred.rate.data()) CHECK((v >= 0.0f && v <= 100.0f));

    const auto cond = model.condition(random32({2, 3, 8, 8}, 6, 0, 1), random32({2, 1, 8, 8}, 7, 0, 1));
    CHECK(cond.shape() == Shape{2, 4, 8, 8});
    const auto g = model.generator()(cond);
    CHECK(g.shape() == Shape{2, 1, 8, 8});
    for (auto v : g.data()) CHECK((v > 0.0f && v < 1.0f));

    const auto scores = model.discriminate(pred.rate, sat, dem);
    CHECK(scores.numel() > 0);
    for (auto v : scores.data()) CHECK((v > 0.0f && v < 1.0f));

    const auto back = S2rModel<float>::from_checkpoint(model.to_checkpoint());
    const auto again = back.generate(sat, dem);
    for (std::size_t i = 0; i < again.rate.numel(); ++i) CHECK(again.rate[i] == pred.rate[i]);

    auto nodem = small();
    nodem.use_dem = false;
    S2rModel<float> plain(nodem, 3);
    CHECK(plain.condition(sat, dem).shape() == Shape{1, 3, 8, 8});
}

TEST_CASE("stage-2 gradient checks") {
    S2rModel<double> model(small(2), 8);
    const auto b = paired_batch(1, 4, 9);
    CHECK(param_grad_check(model.gen_params(), [&] { return probe_sum(model.generator()(b.condition)); }, 4) < 1e-4);
    CHECK(param_grad_check(model.disc_params(),
                           [&] { return probe_sum(model.discriminator()(b.radar, b.condition)); }, 4) < 1e-4);
    CHECK(grad_check([&](const std::vector<Tensor64>& v) { return probe_sum(model.discriminator()(v[0], v[1])); },
                     {b.radar, b.condition}) < 1e-4);
}

TEST_CASE("generator batch permutation") {
    S2rModel<double> model(small(), 10);
    const auto b = paired_batch(3, 8, 11);
    const auto y = model.generator()(b.condition);
    const auto swapped = concat(std::vector<Tensor64>{slice(b.condition, 0, 2, 3), slice(b.condition, 0, 0, 2)}, 0);
    const auto ys = model.generator()(swapped);
    const std::size_t per = 64;
    for (std::size_t i = 0; i < per; ++i) {
        CHECK(ys[i] == doctest::Approx(y[2 * per + i]).epsilon(1e-12));
        CHECK(ys[per + i] == doctest::Approx(y[i]).epsilon(1e-12));
    }
}

TEST_CASE("stage-2 overfits a fixed batch") {
    S2rModel<double> model(small(8), 12);
    AdamW<double> g(model.gen_params()), d(model.disc_params());
    const auto b = paired_batch(2, 8, 13);
    const double first = mse_loss(model.generator()(b.condition), b.radar).item();
    for (int k = 0; k < 200; ++k) s2r_train_step(model, b, 0.01, g, d, 3e-3, 1e-3);
    const double last = mse_loss(model.generator()(b.condition), b.radar).item();
    MESSAGE("stage-2 overfit mse " << first << " -> " << last);
    CHECK(last < 0.1 * first);
}

TEST_CASE("discriminator separates real from constant fakes") {
    S2rModel<double> model(small(8), 14);
    AdamW<double> opt(model.disc_params());
    const auto b = paired_batch(2, 8, 15);
    const auto real = add_scalar(b.radar, 0.3);
    const auto fake = Tensor64::zeros(b.radar.shape());
    double loss = 0;
    for (int k = 0; k < 200; ++k) {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto l = discriminator_loss(model.discriminator()(real, b.condition),
                                    model.discriminator()(fake, b.condition));
        loss = l.item();
        tape.backward(l);
        opt.step(1e-2);
    }
    MESSAGE("discriminator loss " << loss);
    CHECK(loss < 0.1);
}

TEST_CASE("generator loss decreases against a frozen discriminator") {
    S2rModel<double> model(small(), 16);
    AdamW<double> opt(model.gen_params());
    const auto b = paired_batch(2, 8, 17);
    std::vector<double> history;
    for (int k = 0; k < 40; ++k) {
        Tape<double> tape;
        Tape<double>::Scope scope(tape);
        auto fake = model.generator()(b.condition);
        auto r = generator_loss(fake, b.radar, model.discriminator()(fake, b.condition), 0.01);
        history.push_back(r.total_value);
        tape.backward(r.total);
        model.disc_params().zero_grad();
        opt.step(2e-4);
    }
    for (std::size_t k = 1; k < history.size(); ++k) CHECK(history[k] <= history[k - 1] + 1e-12);
}

TEST_CASE("zero lambda makes the discriminator irrelevant to the generator") {
    S2rModel<double> a(small(), 18);
    S2rModel<double> b(small(), 18);
    for (const auto& [path, p] : b.disc_params()) {
        auto v = const_cast<Tensor64&>(p).mutable_data();
        for (auto& x : v) x = -x + 0.1;
    }
    AdamW<double> ga(a.gen_params()), da(a.disc_params()), gb(b.gen_params()), db(b.disc_params());
    const auto batch = paired_batch(2, 8, 19);
    for (int k = 0; k < 3; ++k) {
        const auto ra = s2r_train_step(a, batch, 0.0, ga, da, 1e-3, 1e-3);
        const auto rb = s2r_train_step(b, batch, 0.0, gb, db, 1e-3, 1e-3);
        CHECK(ra.first.total_value == rb.first.total_value);
    }
    CHECK(max_abs_diff(a.generator()(batch.condition), b.generator()(batch.condition)) == 0.0);

    S2rModel<double> c(small(), 18);
    AdamW<double> gc(c.gen_params()), dc(c.disc_params());
    s2r_train_step(c, batch, 0.5, gc, dc, 1e-3, 1e-3);
    S2rModel<double> e(small(), 18);
    AdamW<double> ge(e.gen_params()), de(e.disc_params());
    s2r_train_step(e, batch, 0.0, ge, de, 1e-3, 1e-3);
    CHECK(max_abs_diff(c.generator()(batch.condition), e.generator()(batch.condition)) > 0.0);
}

TEST_CASE("translation of frame stacks") {
    S2rModel<float> model(small(), 20);
    const auto frames = random32({4, 3, 8, 8}, 21, 0, 1);
    const auto dem = random32({1, 8, 8}, 22, 0, 1);
    const auto preds = translate_frames(model, frames, dem);
    REQUIRE(preds.size() == 4);
    const auto third = model.generate(reshape(slice(frames, 0, 2, 3), {3, 8, 8}), dem);
    for (std::size_t i = 0; i < 64; ++i) CHECK(preds[2].rate[i] == doctest::Approx(third.rate[i]).epsilon(1e-5));
    CHECK_THROWS_AS(translate_frames(model, random32({3, 8, 8}, 1), dem), ShapeError);
}
