// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Expert routers: token-level soft and sparse top-k, instance-level (SMEAR
// style, routed on the token mean) and core-space routing on V_a^T x.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "comol/linalg.h"

namespace comol {

template <typename T>
struct RouterParams {
    BasicMatrix<T> w_g;  // N x d; d = n (full-dimension) or r (core space)

    std::size_t num_experts() const { return w_g.rows(); }
    std::size_t input_dim() const { return w_g.cols(); }
};

template <typename T>
struct RoutingWeights {
    Vec<T> weights;                   // zero outside `active`
    std::vector<std::size_t> active;  // ascending expert indices
    Vec<T> probs;                     // full softmax, kept for the backward pass
    Vec<T> logits;                    // pre-softmax router outputs

    std::size_t num_experts() const { return weights.size(); }
};

template <typename T>
RoutingWeights<T> soft_route(const RouterParams<T>& router, std::span<const T> x);

/// Top-k of the full softmax; ties go to the lower index. Selected weights keep
/// their softmax value (no renormalization).
template <typename T>
RoutingWeights<T> sparse_route(const RouterParams<T>& router, std::span<const T> x,
                               std::size_t k);

/// One routing decision for a whole sequence, computed on the mean token.
template <typename T>
RoutingWeights<T> instance_route(const RouterParams<T>& router, const BasicMatrix<T>& tokens);

/// Soft routing on the caller-supplied core-space projection x_hat = V_a^T x.
template <typename T>
RoutingWeights<T> core_route(const RouterParams<T>& router, std::span<const T> x_hat);

/// dLoss/dlogits given dLoss/dweights. Entries of `grad_weights` outside the
/// active set are ignored; the selection itself is treated as constant.
template <typename T>
Vec<T> routing_logit_gradient(const RoutingWeights<T>& routing, std::span<const T> grad_weights);

/// Arithmetic mean of the token rows.
template <typename T>
Vec<T> token_mean(const BasicMatrix<T>& tokens);

}  // namespace comol
