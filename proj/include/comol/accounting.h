// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form trainable-parameter and FLOP counts.
//
// FLOP convention: one multiply-add is 2 FLOPs; every scalar multiply or add
// outside a product is 1. count_flops predicts, category by category, exactly
// what the instrumented forward records into an OpTally (op_counter.h), so the
// two can be compared as integers. The headline adapter cost is
// expert + weighting + aggregation + routing; the final add into W x is the
// separate `residual` term (L*m) and softmax/top-k work is `selection`.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "comol/method.h"
#include "comol/op_counter.h"

namespace comol {

struct CostConfig {
    std::uint64_t m = 0;
    std::uint64_t n = 0;
    std::uint64_t r = 1;
    std::uint64_t num_experts = 1;  // N
    std::uint64_t top_k = 1;        // k
    std::uint64_t seq_len = 1;      // L
    Method method = Method::lora;

    /// Throws ParameterError.
    void validate() const;
    static CostConfig from_layer(const LayerConfig& layer, std::uint64_t seq_len);
};

/// Exact rational, kept reduced.
struct Ratio {
    std::uint64_t num = 0;
    std::uint64_t den = 1;

    static Ratio of(std::uint64_t num, std::uint64_t den);
    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    std::string str() const;
    friend bool operator==(const Ratio&, const Ratio&) = default;
};

struct ParamCount {
    std::uint64_t expert = 0;  // per-expert tensors (B_i, A_i or cores M_i)
    std::uint64_t shared = 0;  // U_b and V_a^T (core-space only)
    std::uint64_t router = 0;
    std::uint64_t total() const { return expert + shared + router; }
};

struct FlopCount {
    std::uint64_t expert = 0;
    std::uint64_t weighting = 0;
    std::uint64_t aggregation = 0;  // output aggregation, or the core / parameter merge
    std::uint64_t routing = 0;
    std::uint64_t selection = 0;
    std::uint64_t other = 0;     // the alpha/r scaling
    std::uint64_t residual = 0;  // W x + delta
    std::uint64_t base = 0;      // W x itself

    std::uint64_t adapter_total() const { return expert + weighting + aggregation + routing; }
    /// Expert-side FLOPs: experts plus merge, routing excluded.
    std::uint64_t headline() const { return expert + aggregation; }
    static FlopCount from_tally(const OpTally& tally);
    friend bool operator==(const FlopCount&, const FlopCount&) = default;
};

struct CostReport {
    CostConfig config;
    ParamCount params;
    FlopCount flops;
    Ratio params_vs_lora;  // total params / LoRA (m+n)r
    Ratio flops_vs_lora;   // adapter_total / LoRA adapter_total at the same (m, n, r, L)
};

ParamCount count_params(const CostConfig& c);

/// Forward FLOPs of adapters.h's forward(), category by category.
FlopCount count_flops(const CostConfig& c);

/// FLOPs of comol_forward_reference (every expert materialized, then weighted).
FlopCount count_flops_reference(const CostConfig& c);

CostReport cost_report(const CostConfig& c);

/// Output-level versus core-space expert cost of N core-space experts. The
/// verbatim form assumes square projections (m = n) and uses n throughout; the
/// generalized form uses m + n + r and aggregates over m outputs. The sparse
/// variant substitutes k for N.
struct CoreSpaceFlops {
    std::uint64_t output_level_expert = 0;
    std::uint64_t output_level_aggregation = 0;
    std::uint64_t core_space_expert = 0;
    std::uint64_t core_space_merge = 0;
};
CoreSpaceFlops core_space_flops_verbatim(const CostConfig& c);
CoreSpaceFlops core_space_flops_generalized(const CostConfig& c);

/// Largest rank whose total parameter count does not exceed `target`
/// (closest from below), or nullopt if even r = 1 is over budget.
std::optional<std::uint64_t> solve_rank(CostConfig c, std::uint64_t target,
                                        std::uint64_t max_rank = 4096);

/// |a - b| / b <= tolerance.
bool within_budget(std::uint64_t a, std::uint64_t b, double tolerance);

// Expert-only comparison table --------------------------------------------

struct Table1Row {
    Method method = Method::lora;
    std::uint64_t num_experts = 1;
    std::uint64_t top_k = 1;
    Ratio params;  // expert-side params / LoRA
    Ratio flops;   // expert FLOPs / LoRA, merge and routing excluded
    std::string routing_level;  // "-", "token" or "instance"
    std::uint64_t router_input_dim = 0;
    std::uint64_t router_params = 0;
    std::uint64_t routing_flops = 0;  // kept separate from the ratios
    std::uint64_t merge_flops = 0;
};

struct Table1Report {
    std::uint64_t m = 0, n = 0, r = 0, seq_len = 0;
    std::vector<Table1Row> rows;
};

/// Throws ParameterError when the rows disagree on (m, n, r, L).
Table1Report table1_report(const std::vector<CostConfig>& configs);
std::string render_text(const Table1Report& report);
nlohmann::json to_json(const Table1Report& report);
nlohmann::json to_json(const CostReport& report);

}  // namespace comol
