// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/method.h"

#include <cmath>

#include <fmt/format.h>

#include "comol/errors.h"

namespace comol {

std::string_view to_string(Method method) {
    switch (method) {
    case Method::lora: return "lora";
    case Method::moe_soft: return "moe_soft";
    case Method::moe_sparse: return "moe_sparse";
    case Method::smear: return "smear";
    case Method::comol: return "comol";
    case Method::comol_no_cr: return "comol_no_cr";
    }
    return "unknown";
}

Method parse_method(std::string_view tag) {
    for (Method m : kAllMethods) {
        if (to_string(m) == tag) {
            return m;
        }
    }
    throw ParameterError(fmt::format("unknown method '{}'", tag));
}

std::size_t LayerConfig::router_input_dim() const {
    switch (method) {
    case Method::lora: return 0;
    case Method::comol: return r;
    default: return n;
    }
}

void LayerConfig::validate() const {
    if (m == 0 || n == 0) {
        throw ConfigError(fmt::format("layer dims must be positive (m={}, n={})", m, n));
    }
    if (r == 0) {
        throw ConfigError("rank must be >= 1");
    }
    if (num_experts == 0) {
        throw ConfigError("num_experts must be >= 1");
    }
    if (method == Method::moe_sparse && (top_k == 0 || top_k > num_experts)) {
        throw ConfigError(fmt::format("top_k={} outside [1, {}]", top_k, num_experts));
    }
    if (!std::isfinite(alpha) || alpha < 0.0) {
        throw ConfigError(fmt::format("alpha must be finite and non-negative, got {}", alpha));
    }
}

std::string describe(const LayerConfig& c) {
    return fmt::format("{}(m={}, n={}, r={}, N={}, k={}, alpha={})", to_string(c.method), c.m,
                       c.n, c.r, c.num_experts, c.top_k, c.effective_alpha());
}

}  // namespace comol
