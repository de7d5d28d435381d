// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

namespace comol {

enum class Method {
    lora,
    moe_soft,     // soft-weighted MoE-LoRA
    moe_sparse,   // top-k MoE-LoRA
    smear,        // instance-level soft-merging
    comol,        // core-space experts + core-space routing
    comol_no_cr,  // core-space experts, router on the full input
};

inline constexpr std::array<Method, 6> kAllMethods = {
    Method::lora, Method::moe_soft, Method::moe_sparse,
    Method::smear, Method::comol, Method::comol_no_cr,
};

std::string_view to_string(Method method);
/// Throws ParameterError on an unknown tag.
Method parse_method(std::string_view tag);

inline bool is_core_space(Method m) { return m == Method::comol || m == Method::comol_no_cr; }
inline bool has_router(Method m) { return m != Method::lora; }
inline bool is_expert_mixture(Method m) {
    return m == Method::moe_soft || m == Method::moe_sparse || m == Method::smear;
}

struct LayerConfig {
    std::size_t m = 0;            // output dim
    std::size_t n = 0;            // input dim
    std::size_t r = 1;            // rank
    std::size_t num_experts = 1;  // N
    std::size_t top_k = 1;        // k, moe_sparse only
    double alpha = 0.0;           // scaling numerator; 0 selects alpha = r
    Method method = Method::lora;

    double effective_alpha() const { return alpha == 0.0 ? static_cast<double>(r) : alpha; }
    double scale() const { return effective_alpha() / static_cast<double>(r); }
    /// Columns of W_g: r for core-space routing, n otherwise (0 for plain LoRA).
    std::size_t router_input_dim() const;
    std::size_t experts() const { return method == Method::lora ? 1 : num_experts; }

    /// Throws ConfigError.
    void validate() const;

    friend bool operator==(const LayerConfig&, const LayerConfig&) = default;
};

std::string describe(const LayerConfig& config);

}  // namespace comol
