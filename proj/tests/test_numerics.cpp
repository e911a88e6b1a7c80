#include <doctest.h>

#include <cmath>

#include "pip/corpus.hpp"
#include "pip/numerics.hpp"

using namespace pip;

TEST_CASE("softmax basic and stability") {
    Tensor<float> x({2}, {0.0f, 0.0f});
    auto y = softmax(x, 0);
    CHECK(y.data[0] == doctest::Approx(0.5));
    CHECK(y.data[1] == doctest::Approx(0.5));

    Tensor<float> big({2}, {1000.0f, 1000.0f});
    auto yb = softmax(big, 0);
    CHECK(yb.data[0] == doctest::Approx(0.5));
    CHECK(std::isfinite(yb.data[0]));

    Tensor<float> h({2}, {0.0f, std::log(3.0f)});
    auto yh = softmax(h, 0);
    CHECK(yh.data[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(yh.data[1] == doctest::Approx(0.75).epsilon(1e-6));

    CHECK_THROWS_AS(softmax(x, 3), DimensionError);
}

TEST_CASE("softmax rows sum to one at extremes") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<float> x({4, 8});
        for (auto& v : x.data) v = static_cast<float>((rng.uniform() * 2 - 1) * 1e4);
        auto y = softmax(x, 1);
        for (int r = 0; r < 4; ++r) {
            float sum = 0;
            for (int c = 0; c < 8; ++c) sum += y.at(r, c);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("masked cross entropy values") {
    // uniform over V=4, two masked rows -> ln 4
    Tensor<float> logits({3, 4});
    std::vector<int32_t> targets{1, 2, 3};
    std::vector<uint8_t> mask{1, 0, 1};
    CHECK(masked_cross_entropy(logits, targets, mask) == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    // V=2, logits [0, ln 3], target 1 -> -ln 0.75
    Tensor<float> l2({1, 2}, {0.0f, std::log(3.0f)});
    CHECK(masked_cross_entropy(l2, {1}, {1}) == doctest::Approx(-std::log(0.75)).epsilon(1e-6));

    // one-hot with growing margin drives loss to 0
    Tensor<float> l3({1, 3}, {30.0f, 0.0f, 0.0f});
    CHECK(masked_cross_entropy(l3, {0}, {1}) < 1e-6);

    CHECK_THROWS_AS(masked_cross_entropy(logits, targets, {0, 0, 0}), std::invalid_argument);
}

TEST_CASE("masked cross entropy gradient is exactly zero off-mask") {
    Tape<float> tape(true);
    Tensor<float> logits({4, 5});
    Rng rng(3);
    for (auto& v : logits.data) v = static_cast<float>(rng.uniform() - 0.5);
    auto in = tape.input(logits, true);
    auto loss = tape.masked_cross_entropy(in, {0, 1, 2, 3}, {0, 1, 0, 1});
    tape.backward(loss);
    const auto& g = tape.grad(in);
    for (int c = 0; c < 5; ++c) {
        CHECK(g.at(0, c) == 0.0f);
        CHECK(g.at(2, c) == 0.0f);
    }
    // masked rows must have some gradient
    float sum = 0;
    for (int c = 0; c < 5; ++c) sum += std::abs(g.at(1, c));
    CHECK(sum > 0.0f);
}

TEST_CASE("adam update") {
    AdamConfig cfg;
    cfg.learning_rate = 0.1f;

    SUBCASE("zero gradient leaves params unchanged") {
        Tensor<float> p({3}, {1.0f, -2.0f, 0.5f});
        Tensor<float> g({3});
        AdamMoments<float> mom;
        auto before = p.data;
        adam_update(p, g, mom, 1, cfg);
        CHECK(p.data == before);
    }

    SUBCASE("step 1 from zero moments moves by ~lr in -sign(g)") {
        Tensor<float> p({2}, {0.0f, 0.0f});
        Tensor<float> g({2}, {0.3f, -0.7f});
        AdamMoments<float> mom;
        adam_update(p, g, mom, 1, cfg);
        // bias correction makes mhat=g, vhat=g^2, so step = lr*g/(|g|+eps)
        CHECK(p.data[0] == doctest::Approx(-0.1).epsilon(1e-4));
        CHECK(p.data[1] == doctest::Approx(0.1).epsilon(1e-4));
    }

    SUBCASE("deterministic") {
        Tensor<float> p1({2}, {1.0f, 2.0f}), p2 = p1;
        Tensor<float> g({2}, {0.5f, -0.25f});
        AdamMoments<float> m1, m2;
        adam_update(p1, g, m1, 1, cfg);
        adam_update(p2, g, m2, 1, cfg);
        CHECK(p1.data == p2.data);
        CHECK(m1.m == m2.m);
    }

    SUBCASE("shape mismatch errors") {
        Tensor<float> p({2}), g({3});
        AdamMoments<float> mom;
        CHECK_THROWS_AS(adam_update(p, g, mom, 1, cfg), DimensionError);
    }
}

TEST_CASE("gradient_check on closed-form functions") {
    Tensor<double> x({6}, {0.3, -1.2, 0.7, 2.0, -0.5, 0.1});

    SUBCASE("sum of squares") {
        auto f = [](Tape<double>& t, Tape<double>::Id in) { return t.sum(t.mul(in, in)); };
        CHECK(gradient_check(f, x) < 1e-7);
    }

    SUBCASE("constant function") {
        auto f = [](Tape<double>& t, Tape<double>::Id in) { return t.scale(t.sum(t.mul(in, t.scale(in, 0.0))), 1.0); };
        CHECK(gradient_check(f, x) < 1e-7);
    }
}

TEST_CASE("tape op gradients against central differences") {
    Rng rng(17);
    Tensor<double> x({3, 4});
    for (auto& v : x.data) v = rng.uniform() * 2 - 1;

    SUBCASE("matmul chain") {
        Tensor<double> w({4, 3});
        for (auto& v : w.data) v = rng.uniform() * 2 - 1;
        auto f = [&](Tape<double>& t, Tape<double>::Id in) {
            auto wid = t.input(w, false);
            auto y = t.matmul(in, wid);
            return t.sum(t.mul(y, y));
        };
        CHECK(gradient_check(f, x) < 1e-7);
    }

    SUBCASE("layer norm + gelu + softmax") {
        Tensor<double> g({4}), b({4});
        std::fill(g.data.begin(), g.data.end(), 1.1);
        for (auto& v : b.data) v = rng.uniform() - 0.5;
        auto f = [&](Tape<double>& t, Tape<double>::Id in) {
            auto gid = t.input(g, false), bid = t.input(b, false);
            auto y = t.layer_norm(in, gid, bid);
            y = t.gelu(y);
            y = t.masked_softmax_rows(y);
            return t.masked_cross_entropy(y, {0, 1, 2}, {1, 1, 1});
        };
        CHECK(gradient_check(f, x, 1e-5) < 1e-6);
    }
}
