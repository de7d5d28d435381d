// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Plain gradient descent and Adam with bias correction over AdapterParams.

#pragma once

#include <cstddef>

#include "comol/adapters.h"

namespace comol {

enum class OptimizerKind { sgd, adam };

std::string_view to_string(OptimizerKind kind);
/// Throws ConfigError on an unknown name.
OptimizerKind parse_optimizer(std::string_view name);

struct AdamHyper {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdapterParams<double> m;
    AdapterParams<double> v;
    std::size_t step = 0;
};

/// Zero moments shaped like `params`.
AdamState make_adam_state(const AdapterParams<double>& params);

/// Throws ContractError when grads or state do not match params.
void adam_step(AdapterParams<double>& params, const AdapterParams<double>& grads,
               AdamState& state, const AdamHyper& hyper);
void sgd_step(AdapterParams<double>& params, const AdapterParams<double>& grads, double lr);

/// into += scale * g, tensor by tensor.
void accumulate(AdapterParams<double>& into, const AdapterParams<double>& g, double scale);

}  // namespace comol
