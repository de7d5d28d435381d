// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Self-checks shared by the CLI and the test suites: random layers with every
// parameter non-zero, a central finite-difference gradient checker that only
// ever calls the forward pass, and the fused-vs-unfused core-space check.

#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "comol/adapters.h"

namespace comol {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double bound);

/// A layer whose every trainable tensor (and W) is uniformly random, so that no
/// gradient vanishes structurally. Router entries use `router_bound`.
AdapterLayer<double> random_layer(const LayerConfig& config, std::uint64_t seed,
                                  double bound = 0.5, double router_bound = 1.0);

struct GradCheckOptions {
    double step = 1e-5;
    /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    double floor = 1e-3;
    bool drop_core_router_path = false;
};

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::string worst_entry;  // "<tensor>[i]" or "tokens[i]"
    std::size_t entries_checked = 0;
};

/// Checks every parameter and input gradient of the scalar loss
/// sum(grad_out .* forward(tokens)) against central differences.
GradCheckReport check_gradients(const AdapterLayer<double>& layer, const Matrix& tokens,
                                const Matrix& grad_out, const GradCheckOptions& options = {});

/// Draws layer, tokens and grad_out from `seed`, then runs check_gradients.
GradCheckReport check_gradients(const LayerConfig& config, std::size_t seq_len,
                                std::uint64_t seed, const GradCheckOptions& options = {});

/// max |comol_forward - comol_forward_reference| over a random batch.
double distributivity_error(std::size_t m, std::size_t n, std::size_t r, std::size_t num_experts,
                            std::size_t seq_len, std::uint64_t seed, bool use_core_routing);

}  // namespace comol
