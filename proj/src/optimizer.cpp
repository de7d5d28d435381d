// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/optimizer.h"

#include <cmath>

namespace comol {

std::string_view to_string(OptimizerKind kind) {
    return kind == OptimizerKind::adam ? "adam" : "sgd";
}

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "adam") return OptimizerKind::adam;
    if (name == "sgd") return OptimizerKind::sgd;
    throw ConfigError(fmt::format("unknown optimizer '{}'", name));
}

namespace {

std::vector<Matrix*> tensors(AdapterParams<double>& p) {
    std::vector<Matrix*> out;
    for_each_tensor<double>(p, [&](const std::string&, Matrix& t) { out.push_back(&t); });
    return out;
}

std::vector<const Matrix*> tensors(const AdapterParams<double>& p) {
    std::vector<const Matrix*> out;
    for_each_tensor<double>(p, [&](const std::string&, const Matrix& t) { out.push_back(&t); });
    return out;
}

template <typename A, typename B>
void require_match(const std::vector<A*>& a, const std::vector<B*>& b, const char* what) {
    if (a.size() != b.size()) {
        throw ContractError(fmt::format("{}: {} tensors vs {}", what, b.size(), a.size()));
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols()) {
            throw ContractError(fmt::format("{}: tensor {} is {} but parameter is {}", what, i,
                                            b[i]->shape_string(), a[i]->shape_string()));
        }
    }
}

}  // namespace

AdamState make_adam_state(const AdapterParams<double>& params) {
    return {zeros_like(params), zeros_like(params), 0};
}

void adam_step(AdapterParams<double>& params, const AdapterParams<double>& grads,
               AdamState& state, const AdamHyper& h) {
    if (grads.index() != params.index() || state.m.index() != params.index() ||
        state.v.index() != params.index()) {
        throw ContractError("adam_step: gradient or state layout differs from parameters");
    }
    auto p = tensors(params);
    const auto g = tensors(grads);
    auto m = tensors(state.m);
    auto v = tensors(state.v);
    require_match(p, g, "adam_step gradients");
    require_match(p, m, "adam_step first moment");
    require_match(p, v, "adam_step second moment");

    ++state.step;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < p.size(); ++t) {
        auto pd = p[t]->data();
        const auto gd = g[t]->data();
        auto md = m[t]->data();
        auto vd = v[t]->data();
        for (std::size_t i = 0; i < pd.size(); ++i) {
            md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gd[i];
            vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gd[i] * gd[i];
            pd[i] -= h.lr * (md[i] / c1) / (std::sqrt(vd[i] / c2) + h.eps);
        }
    }
}

void sgd_step(AdapterParams<double>& params, const AdapterParams<double>& grads, double lr) {
    accumulate(params, grads, -lr);
}

void accumulate(AdapterParams<double>& into, const AdapterParams<double>& g, double scale) {
    if (into.index() != g.index()) {
        throw ContractError("accumulate: gradient layout differs from parameters");
    }
    auto a = tensors(into);
    const auto b = tensors(g);
    require_match(a, b, "accumulate");
    for (std::size_t t = 0; t < a.size(); ++t) {
        auto ad = a[t]->data();
        const auto bd = b[t]->data();
        for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += scale * bd[i];
    }
}

}  // namespace comol
