// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/routing.h"

#include <algorithm>
#include <numeric>

namespace comol {

namespace {

template <typename T>
Vec<T> router_logits(const RouterParams<T>& router, std::span<const T> x, const char* op) {
    if (router.w_g.cols() != x.size()) {
        throw ShapeError(fmt::format("{}: router {} does not accept input of length {}", op,
                                     router.w_g.shape_string(), x.size()));
    }
    if (router.w_g.rows() == 0) {
        throw ShapeError(fmt::format("{}: router has no experts", op));
    }
    ScopedOpKind kind(OpKind::routing);
    return matvec(router.w_g, x);
}

template <typename T>
RoutingWeights<T> dense_from_logits(const Vec<T>& logits) {
    RoutingWeights<T> out;
    out.probs = softmax<T>(logits);
    out.weights = out.probs;
    out.logits = logits;
    out.active.resize(logits.size());
    std::iota(out.active.begin(), out.active.end(), std::size_t{0});
    return out;
}

}  // namespace

template <typename T>
RoutingWeights<T> soft_route(const RouterParams<T>& router, std::span<const T> x) {
    return dense_from_logits(router_logits(router, x, "soft_route"));
}

template <typename T>
RoutingWeights<T> sparse_route(const RouterParams<T>& router, std::span<const T> x,
                               std::size_t k) {
    const std::size_t n_experts = router.num_experts();
    if (k < 1 || k > n_experts) {
        throw ParameterError(
            fmt::format("sparse_route: k={} outside [1, {}]", k, n_experts));
    }
    RoutingWeights<T> out;
    out.logits = router_logits(router, x, "sparse_route");
    out.probs = softmax<T>(out.logits);

    std::vector<std::size_t> order(n_experts);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return out.probs[a] > out.probs[b];
    });
    out.active.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(out.active.begin(), out.active.end());
    detail::record_flops(OpKind::selection, n_experts * k);

    out.weights.assign(n_experts, T{0});
    for (std::size_t i : out.active) {
        out.weights[i] = out.probs[i];
    }
    return out;
}

template <typename T>
Vec<T> token_mean(const BasicMatrix<T>& tokens) {
    if (tokens.rows() == 0) {
        throw ShapeError("token_mean: sequence has no tokens");
    }
    Vec<T> mean(tokens.cols(), T{0});
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto row = tokens.row(t);
        for (std::size_t j = 0; j < mean.size(); ++j) {
            mean[j] += row[j];
        }
    }
    const T inv = T{1} / static_cast<T>(tokens.rows());
    for (T& v : mean) {
        v *= inv;
    }
    detail::record_flops(OpKind::routing, tokens.rows() * tokens.cols());
    return mean;
}

template <typename T>
RoutingWeights<T> instance_route(const RouterParams<T>& router, const BasicMatrix<T>& tokens) {
    if (tokens.rows() == 0) {
        throw ShapeError("instance_route: sequence has no tokens");
    }
    const Vec<T> mean = token_mean(tokens);
    return dense_from_logits(router_logits<T>(router, mean, "instance_route"));
}

template <typename T>
RoutingWeights<T> core_route(const RouterParams<T>& router, std::span<const T> x_hat) {
    return dense_from_logits(router_logits(router, x_hat, "core_route"));
}

template <typename T>
Vec<T> routing_logit_gradient(const RoutingWeights<T>& routing, std::span<const T> grad_weights) {
    const std::size_t n = routing.probs.size();
    if (grad_weights.size() != n) {
        throw ShapeError(fmt::format("routing_logit_gradient: {} weight gradients for {} experts",
                                     grad_weights.size(), n));
    }
    // w_i = p_i for i in T, so dw_i/dz_j = p_i (delta_ij - p_j) restricted to i in T.
    T weighted{0};
    for (std::size_t i : routing.active) {
        weighted += grad_weights[i] * routing.probs[i];
    }
    Vec<T> grad(n);
    for (std::size_t j = 0; j < n; ++j) {
        grad[j] = -routing.probs[j] * weighted;
    }
    for (std::size_t i : routing.active) {
        grad[i] += routing.probs[i] * grad_weights[i];
    }
    return grad;
}

#define COMOL_INSTANTIATE_ROUTING(T)                                                           \
    template RoutingWeights<T> soft_route<T>(const RouterParams<T>&, std::span<const T>);      \
    template RoutingWeights<T> sparse_route<T>(const RouterParams<T>&, std::span<const T>,     \
                                               std::size_t);                                   \
    template RoutingWeights<T> instance_route<T>(const RouterParams<T>&, const BasicMatrix<T>&); \
    template RoutingWeights<T> core_route<T>(const RouterParams<T>&, std::span<const T>);      \
    template Vec<T> routing_logit_gradient<T>(const RoutingWeights<T>&, std::span<const T>);   \
    template Vec<T> token_mean<T>(const BasicMatrix<T>&);

COMOL_INSTANTIATE_ROUTING(float)
COMOL_INSTANTIATE_ROUTING(double)

#undef COMOL_INSTANTIATE_ROUTING

}  // namespace comol
