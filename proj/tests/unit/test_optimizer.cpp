// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>

#include "comol/optimizer.h"
#include "support/test_helpers.h"

using namespace comol;

namespace {

AdapterParams<double> lora_params(Matrix b, Matrix a) {
    return LoraParams<double>{std::move(b), std::move(a)};
}

const Matrix& b_of(const AdapterParams<double>& p) { return std::get<LoraParams<double>>(p).b; }
const Matrix& a_of(const AdapterParams<double>& p) { return std::get<LoraParams<double>>(p).a; }

// scalar reference: one Adam update of a single coordinate
struct ScalarAdam {
    double m = 0.0, v = 0.0;
    int t = 0;
    double step(double p, double g, const AdamHyper& h) {
        ++t;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        const double mh = m / (1.0 - std::pow(h.beta1, t));
        const double vh = v / (1.0 - std::pow(h.beta2, t));
        return p - h.lr * mh / (std::sqrt(vh) + h.eps);
    }
};

}  // namespace

TEST_CASE("adam_step: zero gradient from zero state leaves parameters unchanged") {
    std::mt19937_64 rng(1);
    auto params = lora_params(testing::random(rng, 3, 2), testing::random(rng, 2, 4));
    const auto before = params;
    auto state = make_adam_state(params);
    adam_step(params, zeros_like(params), state, {});
    CHECK(b_of(params) == b_of(before));
    CHECK(a_of(params) == a_of(before));
    CHECK(state.step == 1);
}

TEST_CASE("adam_step: zero gradient decays the moments") {
    std::mt19937_64 rng(2);
    auto params = lora_params(testing::random(rng, 3, 2), testing::random(rng, 2, 4));
    auto state = make_adam_state(params);
    adam_step(params, lora_params(testing::random(rng, 3, 2), testing::random(rng, 2, 4)), state,
              {});
    const auto m1 = state.m;
    const auto v1 = state.v;
    adam_step(params, zeros_like(params), state, {});
    CHECK(b_of(state.m) == testing::scaled(b_of(m1), 0.9));
    CHECK(a_of(state.v) == testing::scaled(a_of(v1), 0.999));
}

TEST_CASE("adam_step: first step moves each coordinate by at most lr against the gradient") {
    std::mt19937_64 rng(3);
    auto params = lora_params(testing::random(rng, 4, 3), testing::random(rng, 3, 5));
    const auto before = params;
    const auto grads = lora_params(testing::random(rng, 4, 3), testing::random(rng, 3, 5));
    auto state = make_adam_state(params);
    AdamHyper h;
    h.lr = 0.05;
    adam_step(params, grads, state, h);
    for (std::size_t i = 0; i < b_of(params).size(); ++i) {
        const double update = b_of(params).data()[i] - b_of(before).data()[i];
        const double g = b_of(grads).data()[i];
        CHECK(std::abs(update) <= h.lr);
        CHECK(update * g <= 0.0);
        // bias-corrected first step is lr * g / (|g| + eps)
        CHECK(update == doctest::Approx(-h.lr * g / (std::abs(g) + h.eps)).epsilon(1e-12));
    }
}

TEST_CASE("adam_step on a quadratic follows the scalar recurrence and converges") {
    std::mt19937_64 rng(4);
    const Matrix target_b = testing::random(rng, 2, 2);
    const Matrix target_a = testing::random(rng, 2, 3);
    auto params = lora_params(Matrix(2, 2), Matrix(2, 3));
    auto state = make_adam_state(params);
    AdamHyper h;
    h.lr = 0.1;
    std::vector<ScalarAdam> ref(4);
    std::vector<double> ref_p(4, 0.0);
    for (int step = 0; step < 500; ++step) {
        // gradient of 0.5 ||p - p*||^2
        auto grads = lora_params(testing::add(b_of(params), target_b, -1.0),
                                 testing::add(a_of(params), target_a, -1.0));
        for (std::size_t i = 0; i < 4; ++i) {
            ref_p[i] = ref[i].step(ref_p[i], ref_p[i] - target_b.data()[i], h);
        }
        adam_step(params, grads, state, h);
        if (step < 100) {
            for (std::size_t i = 0; i < 4; ++i) {
                CHECK(std::abs(b_of(params).data()[i] - ref_p[i]) < 1e-14);
            }
        }
    }
    CHECK(max_abs_difference(b_of(params), target_b) < 1e-6);
    CHECK(max_abs_difference(a_of(params), target_a) < 1e-6);
}

TEST_CASE("sgd_step on a quadratic contracts by (1 - lr) per step") {
    std::mt19937_64 rng(5);
    const Matrix target = testing::random(rng, 3, 2);
    auto params = lora_params(Matrix(3, 2), Matrix(2, 1));
    for (int step = 0; step < 100; ++step) {
        auto grads = lora_params(testing::add(b_of(params), target, -1.0), Matrix(2, 1));
        sgd_step(params, grads, 0.1);
    }
    const double factor = std::pow(0.9, 100);
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double expected = target.data()[i] * (1.0 - factor);
        CHECK(b_of(params).data()[i] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("optimizer contract errors") {
    auto params = lora_params(Matrix(3, 2), Matrix(2, 4));
    auto state = make_adam_state(params);
    CHECK_THROWS_AS(adam_step(params, lora_params(Matrix(3, 2), Matrix(2, 5)), state, {}),
                    ContractError);
    auto other_state = make_adam_state(lora_params(Matrix(3, 1), Matrix(1, 4)));
    CHECK_THROWS_AS(adam_step(params, zeros_like(params), other_state, {}), ContractError);
    AdapterParams<double> comol = ComolParams<double>{Matrix(3, 2), Matrix(2, 4), {}, {}};
    CHECK_THROWS_AS(sgd_step(params, comol, 0.1), ContractError);
    CHECK(parse_optimizer("sgd") == OptimizerKind::sgd);
    CHECK_THROWS_AS(parse_optimizer("rmsprop"), ConfigError);
}
