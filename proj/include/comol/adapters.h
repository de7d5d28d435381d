// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Adapter layers on a frozen projection W (m x n):
//
//   lora         h = W x + s B (A x)
//   moe_soft     h = W x + s sum_i G_i B_i (A_i x),    G = softmax(W_g x)
//   moe_sparse   as moe_soft over the top-k experts, weights not renormalized
//   smear        h = W x + s B_ins (A_ins x), experts merged once per sequence
//   comol        h = W x + s U_b (sum_i G_i M_i) x_hat, x_hat = V_a^T x,
//                G = softmax(W_g x_hat)
//   comol_no_cr  as comol with G = softmax(W_g x)
//
// s = alpha / r. Forward passes run token by token; only SMEAR couples tokens
// (through the sequence mean). Every forward records a ForwardTrace that
// layer_backward consumes.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "comol/linalg.h"
#include "comol/method.h"
#include "comol/routing.h"

namespace comol {

template <typename T>
struct LoraParams {
    BasicMatrix<T> b;  // m x r
    BasicMatrix<T> a;  // r x n
};

/// N full LoRA experts plus a router; shared by moe_soft, moe_sparse and smear.
template <typename T>
struct MixtureParams {
    std::vector<LoraParams<T>> experts;
    RouterParams<T> router;  // N x n
};

template <typename T>
struct ComolParams {
    BasicMatrix<T> u_b;                 // m x r, shared
    BasicMatrix<T> v_a_t;               // r x n, shared
    std::vector<BasicMatrix<T>> cores;  // N of r x r
    RouterParams<T> router;             // N x r (comol) or N x n (comol_no_cr)
};

template <typename T>
using AdapterParams = std::variant<LoraParams<T>, MixtureParams<T>, ComolParams<T>>;

template <typename T>
struct AdapterLayer {
    LayerConfig config;
    BasicMatrix<T> w;  // frozen, m x n
    AdapterParams<T> params;

    T scale() const { return static_cast<T>(config.scale()); }
};

/// Visits every trainable tensor in a fixed order with a stable dotted name
/// ("b", "experts.0.a", "router.w_g", "cores.3", ...).
template <typename T>
void for_each_tensor(AdapterParams<T>& params,
                     const std::function<void(const std::string&, BasicMatrix<T>&)>& fn);
template <typename T>
void for_each_tensor(const AdapterParams<T>& params,
                     const std::function<void(const std::string&, const BasicMatrix<T>&)>& fn);

template <typename T>
AdapterParams<T> zeros_like(const AdapterParams<T>& params);

template <typename T>
std::size_t parameter_count(const AdapterParams<T>& params);

/// Throws ConfigError when tensor shapes disagree with `config`.
template <typename T>
void validate_layer(const AdapterLayer<T>& layer);

/// Per-token intermediates needed by layer_backward.
template <typename T>
struct ForwardTrace {
    Method method = Method::lora;
    BasicMatrix<T> tokens;  // copy of the forward input, used to reject stale traces

    // One entry per token, or a single entry for smear.
    std::vector<RoutingWeights<T>> routing;

    // lora / moe: hidden[t][i] = A_i x_t and outputs[t][i] = B_i hidden[t][i] for
    // active experts (empty vectors for inactive ones).
    std::vector<std::vector<Vec<T>>> hidden;
    std::vector<std::vector<Vec<T>>> outputs;

    // smear
    Vec<T> instance_mean;
    BasicMatrix<T> merged_b;
    BasicMatrix<T> merged_a;

    // comol: x_hat = V_a^T x, merged core, y = M_merged x_hat (before scaling)
    std::vector<Vec<T>> x_hat;
    std::vector<BasicMatrix<T>> merged_core;
    std::vector<Vec<T>> core_out;
};

template <typename T>
struct ForwardResult {
    BasicMatrix<T> outputs;  // L x m
    ForwardTrace<T> trace;
};

template <typename T>
struct BackwardResult {
    BasicMatrix<T> grad_tokens;  // L x n
    AdapterParams<T> grads;      // same layout as the layer's params
};

/// Knobs for layer_backward. `extra_weight_grads` adds dLoss/dG per routing
/// event (one per token; one per sequence for smear), used by the optional
/// load-balancing term. `drop_core_router_path` removes the router's
/// contribution to dLoss/dx_hat; it exists so tests can prove that path matters.
template <typename T>
struct BackwardOptions {
    const std::vector<Vec<T>>* extra_weight_grads = nullptr;
    bool drop_core_router_path = false;
};

// Single-purpose entry points -----------------------------------------------

template <typename T>
Vec<T> lora_forward(const BasicMatrix<T>& w, const LoraParams<T>& p, std::span<const T> x, T s);

/// `top_k` absent selects soft routing.
template <typename T>
Vec<T> moe_forward(const BasicMatrix<T>& w, const std::vector<LoraParams<T>>& experts,
                   const RouterParams<T>& router, std::span<const T> x,
                   std::optional<std::size_t> top_k, T s);

template <typename T>
BasicMatrix<T> smear_forward(const BasicMatrix<T>& w, const std::vector<LoraParams<T>>& experts,
                             const RouterParams<T>& router, const BasicMatrix<T>& tokens, T s);

/// Fused core-space forward: cores merged per token, projections applied once.
template <typename T>
ForwardResult<T> comol_forward(const BasicMatrix<T>& w, const ComolParams<T>& p,
                               const BasicMatrix<T>& tokens, T s, bool use_core_routing);

/// Unfused oracle: every expert's U_b M_i V_a^T x materialized, then weighted.
template <typename T>
BasicMatrix<T> comol_forward_reference(const BasicMatrix<T>& w, const ComolParams<T>& p,
                                       const BasicMatrix<T>& tokens, T s, bool use_core_routing);

// Layer-level API -----------------------------------------------------------

template <typename T>
ForwardResult<T> forward(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens);

/// Adapter contribution only (h - W x), no trace. Used by the benchmark.
template <typename T>
BasicMatrix<T> adapter_delta(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens);

template <typename T>
BackwardResult<T> layer_backward(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens,
                                 const BasicMatrix<T>& grad_out, const ForwardTrace<T>& trace,
                                 const BackwardOptions<T>& options = {});

/// Deterministic initialization with zero adapter delta. W is drawn from the
/// same seed stream (uniform +-1/sqrt(n)) unless supplied.
template <typename T>
AdapterLayer<T> init_layer(const LayerConfig& config, std::uint64_t seed);
template <typename T>
AdapterLayer<T> init_layer(const LayerConfig& config, BasicMatrix<T> w, std::uint64_t seed);

/// Converts every tensor of a layer to another scalar type.
template <typename To, typename From>
AdapterLayer<To> cast_layer(const AdapterLayer<From>& layer);

}  // namespace comol
