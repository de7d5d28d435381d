// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/accounting.h"

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "comol/errors.h"

namespace comol {

void CostConfig::validate() const {
    if (m == 0 || n == 0 || r == 0 || num_experts == 0 || seq_len == 0) {
        throw ParameterError(fmt::format(
            "cost config needs positive m, n, r, N, L (got m={}, n={}, r={}, N={}, L={})", m, n,
            r, num_experts, seq_len));
    }
    if (method == Method::moe_sparse && (top_k == 0 || top_k > num_experts)) {
        throw ParameterError(fmt::format("top_k={} outside [1, {}]", top_k, num_experts));
    }
}

CostConfig CostConfig::from_layer(const LayerConfig& layer, std::uint64_t seq_len) {
    CostConfig c;
    c.m = layer.m;
    c.n = layer.n;
    c.r = layer.r;
    c.num_experts = layer.experts();
    c.top_k = layer.top_k;
    c.seq_len = seq_len;
    c.method = layer.method;
    return c;
}

Ratio Ratio::of(std::uint64_t num, std::uint64_t den) {
    if (den == 0) {
        throw ParameterError("ratio with zero denominator");
    }
    const std::uint64_t g = std::gcd(num, den);
    return {num / g, den / g};
}

std::string Ratio::str() const {
    return den == 1 ? fmt::format("{}", num) : fmt::format("{}/{}", num, den);
}

FlopCount FlopCount::from_tally(const OpTally& t) {
    FlopCount f;
    f.expert = t[OpKind::expert];
    f.weighting = t[OpKind::weighting];
    f.aggregation = t[OpKind::aggregation];
    f.routing = t[OpKind::routing];
    f.selection = t[OpKind::selection];
    f.other = t[OpKind::other];
    f.residual = t[OpKind::residual];
    f.base = t[OpKind::base];
    return f;
}

ParamCount count_params(const CostConfig& c) {
    c.validate();
    const std::uint64_t lora = (c.m + c.n) * c.r;
    const std::uint64_t big_n = c.num_experts;
    ParamCount p;
    switch (c.method) {
    case Method::lora:
        p.expert = lora;
        break;
    case Method::moe_soft:
    case Method::moe_sparse:
    case Method::smear:
        p.expert = big_n * lora;
        p.router = big_n * c.n;
        break;
    case Method::comol:
    case Method::comol_no_cr:
        p.shared = lora;
        p.expert = big_n * c.r * c.r;
        p.router = big_n * (c.method == Method::comol ? c.r : c.n);
        break;
    }
    return p;
}

FlopCount count_flops(const CostConfig& c) {
    c.validate();
    const std::uint64_t m = c.m, n = c.n, r = c.r, big_n = c.num_experts, k = c.top_k,
                        len = c.seq_len;
    const std::uint64_t softmax = 4 * big_n - 1;
    FlopCount f;
    f.base = 2 * len * m * n;
    f.residual = len * m;
    switch (c.method) {
    case Method::lora:
        f.expert = 2 * len * r * (m + n);
        f.other = len * r;
        break;
    case Method::moe_soft:
        f.expert = 2 * len * r * (m + n) * big_n;
        f.weighting = len * big_n * m;
        f.aggregation = len * (big_n - 1) * m;
        f.routing = 2 * len * big_n * n;
        f.selection = len * softmax;
        f.other = len * big_n;
        break;
    case Method::moe_sparse:
        f.expert = 2 * len * r * (m + n) * k;
        f.weighting = len * k * m;
        f.aggregation = len * (k - 1) * m;
        f.routing = 2 * len * big_n * n;
        f.selection = len * (softmax + big_n * k);
        f.other = len * k;
        break;
    case Method::smear:
        f.expert = 2 * len * r * (m + n);
        f.weighting = big_n * r * (m + n);
        f.aggregation = (big_n - 1) * r * (m + n);
        f.routing = len * n + 2 * big_n * n;  // sequence mean, then one router product
        f.selection = softmax;
        f.other = len * r;
        break;
    case Method::comol:
    case Method::comol_no_cr: {
        const std::uint64_t d = c.method == Method::comol ? r : n;
        f.expert = 2 * len * r * (m + n + r);
        f.weighting = len * big_n * r * r;
        f.aggregation = len * (big_n - 1) * r * r;
        f.routing = 2 * len * big_n * d;
        f.selection = len * softmax;
        f.other = len * r;
        break;
    }
    }
    return f;
}

FlopCount count_flops_reference(const CostConfig& c) {
    c.validate();
    if (!is_core_space(c.method)) {
        throw ParameterError("the unfused reference path exists for core-space methods only");
    }
    const std::uint64_t m = c.m, n = c.n, r = c.r, big_n = c.num_experts, len = c.seq_len;
    FlopCount f;
    f.base = 2 * len * m * n;
    f.residual = len * m;
    f.expert = 2 * len * r * (m + n + r) * big_n;
    f.weighting = len * big_n * m;
    f.aggregation = len * (big_n - 1) * m;
    // core routing projects x once more for the router
    f.routing = c.method == Method::comol ? 2 * len * r * n + 2 * len * big_n * r
                                          : 2 * len * big_n * n;
    f.selection = len * (4 * big_n - 1);
    f.other = len * big_n;
    return f;
}

CostReport cost_report(const CostConfig& c) {
    CostReport rep;
    rep.config = c;
    rep.params = count_params(c);
    rep.flops = count_flops(c);
    CostConfig lora = c;
    lora.method = Method::lora;
    lora.num_experts = 1;
    lora.top_k = 1;
    rep.params_vs_lora = Ratio::of(rep.params.total(), count_params(lora).total());
    rep.flops_vs_lora = Ratio::of(rep.flops.adapter_total(), count_flops(lora).adapter_total());
    return rep;
}

namespace {

std::uint64_t effective_experts(const CostConfig& c) {
    return c.method == Method::moe_sparse ? c.top_k : c.num_experts;
}

}  // namespace

CoreSpaceFlops core_space_flops_verbatim(const CostConfig& c) {
    c.validate();
    const std::uint64_t big_n = effective_experts(c), len = c.seq_len, n = c.n, r = c.r;
    CoreSpaceFlops f;
    f.output_level_expert = 2 * len * r * (2 * n + r) * big_n;
    f.output_level_aggregation = len * n * (big_n - 1);
    f.core_space_expert = 2 * len * r * (2 * n + r);
    f.core_space_merge = len * r * r * (big_n - 1);
    return f;
}

CoreSpaceFlops core_space_flops_generalized(const CostConfig& c) {
    c.validate();
    const std::uint64_t big_n = effective_experts(c), len = c.seq_len, r = c.r;
    CoreSpaceFlops f;
    f.output_level_expert = 2 * len * r * (c.m + c.n + r) * big_n;
    f.output_level_aggregation = len * c.m * (big_n - 1);
    f.core_space_expert = 2 * len * r * (c.m + c.n + r);
    f.core_space_merge = len * r * r * (big_n - 1);
    return f;
}

std::optional<std::uint64_t> solve_rank(CostConfig c, std::uint64_t target,
                                        std::uint64_t max_rank) {
    std::optional<std::uint64_t> best;
    for (std::uint64_t r = 1; r <= max_rank; ++r) {
        c.r = r;
        if (count_params(c).total() > target) {
            break;  // counts grow strictly with r
        }
        best = r;
    }
    return best;
}

bool within_budget(std::uint64_t a, std::uint64_t b, double tolerance) {
    const double diff = std::abs(static_cast<double>(a) - static_cast<double>(b));
    return diff <= tolerance * static_cast<double>(b);
}

Table1Report table1_report(const std::vector<CostConfig>& configs) {
    if (configs.empty()) {
        throw ParameterError("table1_report: no rows");
    }
    Table1Report rep;
    const CostConfig& first = configs.front();
    rep.m = first.m;
    rep.n = first.n;
    rep.r = first.r;
    rep.seq_len = first.seq_len;
    for (const auto& c : configs) {
        if (c.m != rep.m || c.n != rep.n || c.r != rep.r || c.seq_len != rep.seq_len) {
            throw ParameterError(fmt::format(
                "table1_report: row {} has (m,n,r,L)=({},{},{},{}), expected ({},{},{},{})",
                to_string(c.method), c.m, c.n, c.r, c.seq_len, rep.m, rep.n, rep.r,
                rep.seq_len));
        }
    }
    CostConfig lora = first;
    lora.method = Method::lora;
    lora.num_experts = 1;
    lora.top_k = 1;
    const ParamCount lora_p = count_params(lora);
    const FlopCount lora_f = count_flops(lora);

    for (const auto& c : configs) {
        const ParamCount p = count_params(c);
        const FlopCount f = count_flops(c);
        Table1Row row;
        row.method = c.method;
        row.num_experts = c.method == Method::lora ? 1 : c.num_experts;
        row.top_k = c.method == Method::moe_sparse ? c.top_k : row.num_experts;
        row.params = Ratio::of(p.expert + p.shared, lora_p.expert);
        row.flops = Ratio::of(f.expert, lora_f.expert);
        row.routing_level = c.method == Method::lora    ? "-"
                            : c.method == Method::smear ? "instance"
                                                        : "token";
        row.router_input_dim = c.method == Method::lora ? 0
                               : c.method == Method::comol ? c.r
                                                           : c.n;
        row.router_params = p.router;
        row.routing_flops = f.routing;
        row.merge_flops = is_core_space(c.method) || c.method == Method::smear ? f.aggregation : 0;
        rep.rows.push_back(row);
    }
    return rep;
}

std::string render_text(const Table1Report& rep) {
    std::string out = fmt::format("expert-only cost relative to LoRA (m={}, n={}, r={}, L={})\n",
                                  rep.m, rep.n, rep.r, rep.seq_len);
    out += fmt::format("{:<12} {:>4} {:>4} {:>10} {:>10} {:>9} {:>8} {:>10} {:>12} {:>10}\n",
                       "method", "N", "k", "params(x)", "flops(x)", "routing", "router_in",
                       "router_par", "routing_fl", "merge_fl");
    for (const auto& row : rep.rows) {
        out += fmt::format(
            "{:<12} {:>4} {:>4} {:>10.4f} {:>10.4f} {:>9} {:>8} {:>10} {:>12} {:>10}\n",
            to_string(row.method), row.num_experts, row.top_k, row.params.value(),
            row.flops.value(), row.routing_level, row.router_input_dim, row.router_params,
            row.routing_flops, row.merge_flops);
    }
    return out;
}

namespace {

nlohmann::json ratio_json(const Ratio& r) {
    return {{"num", r.num}, {"den", r.den}, {"value", r.value()}};
}

nlohmann::json config_json(const CostConfig& c) {
    return {{"method", std::string(to_string(c.method))},
            {"m", c.m},
            {"n", c.n},
            {"r", c.r},
            {"num_experts", c.num_experts},
            {"top_k", c.top_k},
            {"seq_len", c.seq_len}};
}

}  // namespace

nlohmann::json to_json(const Table1Report& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : rep.rows) {
        rows.push_back({{"method", std::string(to_string(row.method))},
                        {"num_experts", row.num_experts},
                        {"top_k", row.top_k},
                        {"params_ratio", ratio_json(row.params)},
                        {"flops_ratio", ratio_json(row.flops)},
                        {"routing_level", row.routing_level},
                        {"router_input_dim", row.router_input_dim},
                        {"router_params", row.router_params},
                        {"routing_flops", row.routing_flops},
                        {"merge_flops", row.merge_flops}});
    }
    return {{"m", rep.m}, {"n", rep.n}, {"r", rep.r}, {"seq_len", rep.seq_len}, {"rows", rows}};
}

nlohmann::json to_json(const CostReport& rep) {
    const auto& p = rep.params;
    const auto& f = rep.flops;
    return {{"config", config_json(rep.config)},
            {"params",
             {{"expert", p.expert},
              {"shared", p.shared},
              {"router", p.router},
              {"total", p.total()}}},
            {"flops",
             {{"expert", f.expert},
              {"weighting", f.weighting},
              {"aggregation", f.aggregation},
              {"routing", f.routing},
              {"selection", f.selection},
              {"other", f.other},
              {"residual", f.residual},
              {"base", f.base},
              {"adapter_total", f.adapter_total()}}},
            {"params_vs_lora", ratio_json(rep.params_vs_lora)},
            {"flops_vs_lora", ratio_json(rep.flops_vs_lora)}};
}

}  // namespace comol
