// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "nn.hpp"

using namespace can;

TEST_CASE("adaptive pool geometry spot values") {
    auto g = adaptive_pool_params(24, 1);
    CHECK(g.stride == 24);
    CHECK(g.kernel == 24);

    g = adaptive_pool_params(24, 3);
    CHECK(g.stride == 8);
    CHECK(g.kernel == 8);

    g = adaptive_pool_params(24, 5);
    CHECK(g.stride == 4);
    CHECK(g.kernel == 8);

    g = adaptive_pool_params(24, 7);
    CHECK(g.stride == 3);
    CHECK(g.kernel == 6);

    CHECK_THROWS_AS(adaptive_pool_params(4, 5), Error);
    CHECK_THROWS_AS(adaptive_pool_params(4, 0), Error);
}

TEST_CASE("adaptive pool geometry covers the input exactly for all sizes") {
    for (int64_t is = 1; is <= 64; ++is) {
        for (int64_t os = 1; os <= is; ++os) {
            const auto g = adaptive_pool_params(is, os);
            CHECK(g.padding == 0);
            CHECK(g.kernel >= 1);
            CHECK(g.stride >= 1);
            CHECK((os - 1) * g.stride + g.kernel == is);
        }
    }
}

TEST_CASE("adaptive pooling examples") {
    Tape t;
    Var x = t.constant(Tensor({1, 4, 1}, {1, 9, 2, 3}));

    Var mx = adaptive_pool2d(t, x, 2, 1, PoolMode::max);
    CHECK(t.value(mx).shape() == std::vector<int64_t>{1, 2, 1});
    CHECK(t.value(mx)[0] == 9);
    CHECK(t.value(mx)[1] == 3);

    Var av = adaptive_pool2d(t, x, 2, 1, PoolMode::avg);
    CHECK(t.value(av)[0] == 5.0);
    CHECK(t.value(av)[1] == 2.5);

    // output size == input size is the identity
    Var same = adaptive_pool2d(t, x, 4, 1, PoolMode::max);
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(t.value(same)[i] == t.value(x)[i]);
    }

    // output 1x1 equals the global reduction
    Var gmax = adaptive_pool2d(t, x, 1, 1, PoolMode::max);
    CHECK(t.value(gmax)[0] == 9);
    Var gavg = adaptive_pool2d(t, x, 1, 1, PoolMode::avg);
    CHECK(t.value(gavg)[0] == 3.75);

    CHECK_THROWS_AS(adaptive_pool2d(t, x, 5, 1, PoolMode::max), Error);
}

TEST_CASE("conv2d: 1x1 identity kernel per channel preserves the input") {
    Tape t;
    Tensor img({2, 3, 3});
    for (int64_t i = 0; i < img.numel(); ++i) {
        img[i] = static_cast<double>(i) * 0.5 - 2.0;
    }
    // weight [2,2,1,1] = channel-identity
    Tensor w({2, 2, 1, 1}, {1, 0, 0, 1});
    Var y = conv2d(t, t.constant(img), t.constant(w), std::nullopt, 1, 0);
    REQUIRE(t.value(y).same_shape(img));
    for (int64_t i = 0; i < img.numel(); ++i) {
        CHECK(t.value(y)[i] == img[i]);
    }
}

TEST_CASE("conv2d: 2x2 ones kernel sums the window") {
    Tape t;
    Var x = t.constant(Tensor({1, 2, 2}, {1, 2, 3, 4}));
    Var w = t.constant(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}));
    Var y = conv2d(t, x, w, std::nullopt, 1, 0);
    CHECK(t.value(y).shape() == std::vector<int64_t>{1, 1, 1});
    CHECK(t.value(y)[0] == 10.0);
}

TEST_CASE("conv2d validates channels and output size") {
    Tape t;
    Var x = t.constant(Tensor({2, 4, 4}));
    Var w_bad = t.constant(Tensor({1, 3, 3, 3}));
    CHECK_THROWS_AS(conv2d(t, x, w_bad, std::nullopt, 1, 0), Error);
    Var w_big = t.constant(Tensor({1, 2, 5, 5}));
    CHECK_THROWS_AS(conv2d(t, x, w_big, std::nullopt, 1, 0), Error);
}

TEST_CASE("conv2d is linear in the input with zero bias") {
    Rng rng(31);
    auto rand3 = [&rng](std::vector<int64_t> shape) {
        Tensor t(std::move(shape));
        for (int64_t i = 0; i < t.numel(); ++i) {
            t[i] = rng.uniform(-1, 1);
        }
        return t;
    };
    const Tensor x = rand3({2, 6, 5});
    const Tensor y = rand3({2, 6, 5});
    const Tensor w = rand3({3, 2, 3, 3});
    const double alpha = 0.7, beta = -1.3;

    Tape t;
    Var wx = t.constant(w);
    Var lhs = conv2d(
        t, t.add(t.scale(t.constant(x), alpha), t.scale(t.constant(y), beta)), wx,
        std::nullopt, 1, 1);
    Var rhs = t.add(t.scale(conv2d(t, t.constant(x), wx, std::nullopt, 1, 1), alpha),
                    t.scale(conv2d(t, t.constant(y), wx, std::nullopt, 1, 1), beta));
    for (int64_t i = 0; i < t.value(lhs).numel(); ++i) {
        CHECK(t.value(lhs)[i] == doctest::Approx(t.value(rhs)[i]).epsilon(1e-10));
    }
}

TEST_CASE("conv2d gradient matches finite differences on a 3x5x4 input") {
    Rng rng(32);
    Parameter x("x", Tensor({3, 5, 4}));
    Parameter w("w", Tensor({2, 3, 3, 3}));
    Parameter b("b", Tensor({2}));
    for (int64_t i = 0; i < x.value.numel(); ++i) x.value[i] = rng.uniform(-1, 1);
    for (int64_t i = 0; i < w.value.numel(); ++i) w.value[i] = rng.uniform(-1, 1);
    for (int64_t i = 0; i < b.value.numel(); ++i) b.value[i] = rng.uniform(-1, 1);
    Parameter* params[] = {&x, &w, &b};
    auto res = finite_diff_check(
        [&](Tape& t) {
            return t.sum_all(
                t.mul(conv2d(t, t.param(x), t.param(w), t.param(b), 1, 1),
                      conv2d(t, t.param(x), t.param(w), t.param(b), 1, 1)));
        },
        params);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("softmax examples and properties") {
    Tape t;
    Var equal = softmax(t, t.constant(Tensor({4}, {2, 2, 2, 2})));
    for (int64_t i = 0; i < 4; ++i) {
        CHECK(t.value(equal)[i] == doctest::Approx(0.25).epsilon(1e-12));
    }

    Var two = softmax(t, t.constant(Tensor({2}, {0.0, std::log(3.0)})));
    CHECK(t.value(two)[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(t.value(two)[1] == doctest::Approx(0.75).epsilon(1e-12));

    Rng rng(33);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor logits({6});
        for (int64_t i = 0; i < 6; ++i) {
            logits[i] = rng.uniform(-5, 5);
        }
        const double c = rng.uniform(-100, 100);
        Var p = softmax(t, t.constant(logits));
        Var p_shift = softmax(t, t.add_scalar(t.constant(logits), c));

        double sum = 0.0;
        int64_t argmax_logit = 0, argmax_prob = 0;
        for (int64_t i = 0; i < 6; ++i) {
            CHECK(t.value(p)[i] > 0.0);
            sum += t.value(p)[i];
            CHECK(t.value(p_shift)[i] == doctest::Approx(t.value(p)[i]).epsilon(1e-12));
            if (logits[i] > logits[argmax_logit]) {
                argmax_logit = i;
            }
            if (t.value(p)[i] > t.value(p)[argmax_prob]) {
                argmax_prob = i;
            }
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(argmax_logit == argmax_prob);
    }
}

TEST_CASE("l2_normalize examples and scale invariance") {
    Tape t;
    Var v = l2_normalize(t, t.constant(Tensor({2}, {3, 4})));
    CHECK(t.value(v)[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(t.value(v)[1] == doctest::Approx(0.8).epsilon(1e-12));

    Var unit = l2_normalize(t, t.constant(Tensor({2}, {0.6, 0.8})));
    CHECK(t.value(unit)[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(t.value(unit)[1] == doctest::Approx(0.8).epsilon(1e-12));

    Rng rng(34);
    for (int rep = 0; rep < 20; ++rep) {
        Tensor x({5});
        for (int64_t i = 0; i < 5; ++i) {
            x[i] = rng.uniform(-2, 2);
        }
        const double c = rng.uniform(0.01, 50.0);
        Var a = l2_normalize(t, t.constant(x));
        Var b = l2_normalize(t, t.scale(t.constant(x), c));
        double norm = 0.0;
        for (int64_t i = 0; i < 5; ++i) {
            CHECK(t.value(b)[i] == doctest::Approx(t.value(a)[i]).epsilon(1e-12));
            norm += t.value(a)[i] * t.value(a)[i];
        }
        CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-12));
    }

    // tiny vectors fall back to dividing by eps
    Var tiny = l2_normalize(t, t.constant(Tensor({2}, {0.0, 0.0})));
    CHECK(t.value(tiny)[0] == 0.0);
    CHECK(t.value(tiny)[1] == 0.0);
}

TEST_CASE("module-wide gradient suite stays under tolerance") {
    // a light pass here; the acceptance suite runs the full 100 repeats
    const auto report = gradcheck_suite(20240901, 5);
    for (const auto& e : report.entries) {
        INFO(e.op);
        CHECK(e.max_rel_err < 1e-4);
    }
}
