// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Full-length training runs at the default hyperparameters. Slower than the
// other unit suites (tens of seconds).

#include "doctest.h"

#include "comol/synthtrain.h"

using namespace comol;

namespace {

LayerConfig layer_for(Method method, const TaskConfig& t) {
    LayerConfig c;
    c.method = method;
    c.m = t.m;
    c.n = t.n;
    c.r = 4;
    c.num_experts = 4;
    c.top_k = 2;
    return c;
}

}  // namespace

TEST_CASE("single-cluster held-out loss does not rise across 100-step windows") {
    // Checked while the relative loss is above 1e-4; below that, Adam's fixed
    // step makes the last digits jitter.
    for (Method method : kAllMethods) {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            TaskConfig t;
            t.clusters = 1;
            t.mix_rate = 0.0;
            t.seed = seed;
            const auto task = make_task(t);
            auto layer = init_layer<double>(layer_for(method, t), task.w_frozen, seed);
            TrainConfig cfg;
            cfg.seed = seed;
            const auto curve = train(layer, task, cfg);
            CAPTURE(to_string(method));
            CAPTURE(seed);
            const double floor = 1e-4 * curve.initial_heldout_loss;
            for (std::size_t i = 1; i < curve.evals.size(); ++i) {
                if (curve.evals[i - 1].heldout_loss < floor) break;
                CAPTURE(curve.evals[i].step);
                CHECK(curve.evals[i].heldout_loss <= curve.evals[i - 1].heldout_loss);
            }
        }
    }
}

TEST_CASE("pure sequences: trained CoMoL keeps one dominant expert per sequence") {
    int satisfied = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        TaskConfig t;
        t.mix_rate = 0.0;
        t.noise = 0.5;
        t.seed = seed;
        const auto task = make_task(t);
        auto layer = init_layer<double>(layer_for(Method::comol, t), task.w_frozen, seed);
        TrainConfig cfg;
        cfg.seed = seed;
        (void)train(layer, task, cfg);
        const auto constancy = dominant_expert_constancy(layer, task);
        REQUIRE(constancy.has_value());
        MESSAGE("seed " << seed << " constancy " << *constancy);
        if (*constancy >= 0.9) ++satisfied;
    }
    CHECK(satisfied >= 4);
}
