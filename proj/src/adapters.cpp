// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/adapters.h"

#include <cmath>
#include <random>

namespace comol {

// Tensor visitation ---------------------------------------------------------

namespace {

template <typename T, typename Params, typename Fn>
void walk(Params& params, Fn&& fn) {
    if (auto* lora = std::get_if<LoraParams<T>>(&params)) {
        fn(std::string("b"), lora->b);
        fn(std::string("a"), lora->a);
    } else if (auto* mix = std::get_if<MixtureParams<T>>(&params)) {
        for (std::size_t i = 0; i < mix->experts.size(); ++i) {
            fn(fmt::format("experts.{}.b", i), mix->experts[i].b);
            fn(fmt::format("experts.{}.a", i), mix->experts[i].a);
        }
        fn(std::string("router.w_g"), mix->router.w_g);
    } else if (auto* co = std::get_if<ComolParams<T>>(&params)) {
        fn(std::string("u_b"), co->u_b);
        fn(std::string("v_a_t"), co->v_a_t);
        for (std::size_t i = 0; i < co->cores.size(); ++i) {
            fn(fmt::format("cores.{}", i), co->cores[i]);
        }
        fn(std::string("router.w_g"), co->router.w_g);
    }
}

}  // namespace

template <typename T>
void for_each_tensor(AdapterParams<T>& params,
                     const std::function<void(const std::string&, BasicMatrix<T>&)>& fn) {
    walk<T>(params, fn);
}

template <typename T>
void for_each_tensor(const AdapterParams<T>& params,
                     const std::function<void(const std::string&, const BasicMatrix<T>&)>& fn) {
    walk<T>(params, fn);
}

template <typename T>
AdapterParams<T> zeros_like(const AdapterParams<T>& params) {
    AdapterParams<T> out = params;
    for_each_tensor<T>(out, [](const std::string&, BasicMatrix<T>& t) { t.fill(T{0}); });
    return out;
}

template <typename T>
std::size_t parameter_count(const AdapterParams<T>& params) {
    std::size_t total = 0;
    for_each_tensor<T>(params,
                       [&](const std::string&, const BasicMatrix<T>& t) { total += t.size(); });
    return total;
}

namespace {

void require_shape(const char* what, std::size_t rows, std::size_t cols, std::size_t want_rows,
                   std::size_t want_cols) {
    if (rows != want_rows || cols != want_cols) {
        throw ConfigError(fmt::format("{} is {}x{}, expected {}x{}", what, rows, cols, want_rows,
                                      want_cols));
    }
}

}  // namespace

template <typename T>
void validate_layer(const AdapterLayer<T>& layer) {
    const LayerConfig& c = layer.config;
    c.validate();
    require_shape("W", layer.w.rows(), layer.w.cols(), c.m, c.n);
    const auto check_lora = [&](const LoraParams<T>& p) {
        require_shape("B", p.b.rows(), p.b.cols(), c.m, c.r);
        require_shape("A", p.a.rows(), p.a.cols(), c.r, c.n);
    };
    if (c.method == Method::lora) {
        const auto* p = std::get_if<LoraParams<T>>(&layer.params);
        if (p == nullptr) {
            throw ConfigError("lora layer does not hold LoRA parameters");
        }
        check_lora(*p);
    } else if (is_expert_mixture(c.method)) {
        const auto* p = std::get_if<MixtureParams<T>>(&layer.params);
        if (p == nullptr) {
            throw ConfigError(fmt::format("{} layer does not hold expert parameters",
                                          to_string(c.method)));
        }
        if (p->experts.size() != c.num_experts) {
            throw ConfigError(fmt::format("{} experts, config says {}", p->experts.size(),
                                          c.num_experts));
        }
        for (const auto& e : p->experts) {
            check_lora(e);
        }
        require_shape("router", p->router.w_g.rows(), p->router.w_g.cols(), c.num_experts, c.n);
    } else {
        const auto* p = std::get_if<ComolParams<T>>(&layer.params);
        if (p == nullptr) {
            throw ConfigError(fmt::format("{} layer does not hold core-space parameters",
                                          to_string(c.method)));
        }
        require_shape("u_b", p->u_b.rows(), p->u_b.cols(), c.m, c.r);
        require_shape("v_a_t", p->v_a_t.rows(), p->v_a_t.cols(), c.r, c.n);
        if (p->cores.size() != c.num_experts) {
            throw ConfigError(fmt::format("{} cores, config says {}", p->cores.size(),
                                          c.num_experts));
        }
        for (const auto& core : p->cores) {
            require_shape("core", core.rows(), core.cols(), c.r, c.r);
        }
        require_shape("router", p->router.w_g.rows(), p->router.w_g.cols(), c.num_experts,
                      c.router_input_dim());
    }
}

// Forward -------------------------------------------------------------------

namespace {

template <typename T>
void require_tokens(const BasicMatrix<T>& w, const BasicMatrix<T>& tokens, const char* op) {
    if (tokens.rows() == 0) {
        throw ShapeError(fmt::format("{}: empty token batch", op));
    }
    if (tokens.cols() != w.cols()) {
        throw ShapeError(fmt::format("{}: tokens {} do not match W {}", op,
                                     tokens.shape_string(), w.shape_string()));
    }
}

template <typename T>
void scale_in_place(std::span<T> v, T s) {
    for (T& x : v) {
        x *= s;
    }
    detail::record_flops(OpKind::other, v.size());
}

// out = W x + delta when `with_base`, else out = delta.
template <typename T>
void finish_token(const BasicMatrix<T>& w, std::span<const T> x, std::span<const T> delta,
                  std::span<T> out, bool with_base) {
    if (!with_base) {
        std::copy(delta.begin(), delta.end(), out.begin());
        return;
    }
    Vec<T> base(w.rows());
    {
        ScopedOpKind kind(OpKind::base);
        matvec(w, x, std::span<T>(base));
    }
    ScopedOpKind kind(OpKind::residual);
    add_into<T>(base, delta, out);
}

template <typename T>
void lora_token(const BasicMatrix<T>& w, const LoraParams<T>& p, std::span<const T> x, T s,
                std::span<T> out, bool with_base, ForwardTrace<T>* trace) {
    Vec<T> u(p.a.rows());
    Vec<T> delta(p.b.rows());
    {
        ScopedOpKind kind(OpKind::expert);
        matvec(p.a, x, std::span<T>(u));
    }
    if (trace != nullptr) {
        trace->hidden.push_back({u});
    }
    scale_in_place<T>(u, s);
    {
        ScopedOpKind kind(OpKind::expert);
        matvec<T>(p.b, u, delta);
    }
    finish_token<T>(w, x, delta, out, with_base);
}

template <typename T>
void require_experts(const std::vector<LoraParams<T>>& experts, const RouterParams<T>& router,
                     const BasicMatrix<T>& w, const char* op) {
    if (experts.empty()) {
        throw ParameterError(fmt::format("{}: no experts", op));
    }
    if (router.num_experts() != experts.size()) {
        throw ShapeError(fmt::format("{}: router {} for {} experts", op,
                                     router.w_g.shape_string(), experts.size()));
    }
    const std::size_t r = experts.front().a.rows();
    for (const auto& e : experts) {
        if (e.a.rows() != r || e.a.cols() != w.cols() || e.b.rows() != w.rows() ||
            e.b.cols() != r) {
            throw ShapeError(fmt::format("{}: expert B {} / A {} inconsistent with W {}", op,
                                         e.b.shape_string(), e.a.shape_string(),
                                         w.shape_string()));
        }
    }
}

template <typename T>
void mixture_token(const BasicMatrix<T>& w, const std::vector<LoraParams<T>>& experts,
                   const RouterParams<T>& router, std::span<const T> x,
                   std::optional<std::size_t> top_k, T s, std::span<T> out, bool with_base,
                   ForwardTrace<T>* trace) {
    RoutingWeights<T> routing = top_k ? sparse_route(router, x, *top_k) : soft_route(router, x);

    const std::size_t n_experts = experts.size();
    std::vector<Vec<T>> hidden(n_experts);
    std::vector<Vec<T>> outputs(n_experts);
    std::vector<std::span<const T>> active_outputs;
    Vec<T> active_weights;
    active_outputs.reserve(routing.active.size());
    active_weights.reserve(routing.active.size());
    for (std::size_t i : routing.active) {
        const auto& e = experts[i];
        hidden[i].resize(e.a.rows());
        outputs[i].resize(e.b.rows());
        ScopedOpKind kind(OpKind::expert);
        matvec<T>(e.a, x, hidden[i]);
        matvec<T>(e.b, hidden[i], outputs[i]);
        active_outputs.emplace_back(outputs[i]);
        active_weights.push_back(routing.weights[i]);
    }
    scale_in_place<T>(active_weights, s);
    Vec<T> delta(w.rows());
    weighted_sum<T>(active_weights, active_outputs, delta);
    finish_token<T>(w, x, delta, out, with_base);

    if (trace != nullptr) {
        trace->routing.push_back(std::move(routing));
        trace->hidden.push_back(std::move(hidden));
        trace->outputs.push_back(std::move(outputs));
    }
}

template <typename T>
BasicMatrix<T> merge_matrices(std::span<const T> weights,
                              const std::vector<const BasicMatrix<T>*>& items) {
    BasicMatrix<T> merged(items.front()->rows(), items.front()->cols());
    std::vector<std::span<const T>> spans;
    spans.reserve(items.size());
    for (const auto* m : items) {
        spans.push_back(m->data());
    }
    weighted_sum<T>(weights, spans, merged.data());
    return merged;
}

template <typename T>
BasicMatrix<T> smear_impl(const BasicMatrix<T>& w, const std::vector<LoraParams<T>>& experts,
                          const RouterParams<T>& router, const BasicMatrix<T>& tokens, T s,
                          bool with_base, ForwardTrace<T>* trace) {
    require_tokens(w, tokens, "smear_forward");
    require_experts(experts, router, w, "smear_forward");
    RoutingWeights<T> routing = instance_route(router, tokens);

    std::vector<const BasicMatrix<T>*> bs, as;
    for (const auto& e : experts) {
        bs.push_back(&e.b);
        as.push_back(&e.a);
    }
    BasicMatrix<T> merged_b = merge_matrices<T>(routing.weights, bs);
    BasicMatrix<T> merged_a = merge_matrices<T>(routing.weights, as);

    const std::size_t r = merged_a.rows();
    BasicMatrix<T> out(tokens.rows(), w.rows());
    Vec<T> u(r);
    Vec<T> delta(w.rows());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto x = tokens.row(t);
        {
            ScopedOpKind kind(OpKind::expert);
            matvec<T>(merged_a, x, u);
        }
        if (trace != nullptr) {
            trace->hidden.push_back({u});
        }
        scale_in_place<T>(u, s);
        {
            ScopedOpKind kind(OpKind::expert);
            matvec<T>(merged_b, u, delta);
        }
        finish_token<T>(w, x, delta, out.row(t), with_base);
    }
    if (trace != nullptr) {
        OpTally scratch;  // the mean was already counted by instance_route
        ScopedOpTally quiet(scratch);
        trace->instance_mean = token_mean(tokens);
        trace->routing.push_back(std::move(routing));
        trace->merged_b = std::move(merged_b);
        trace->merged_a = std::move(merged_a);
    }
    return out;
}

template <typename T>
void require_comol(const BasicMatrix<T>& w, const ComolParams<T>& p, bool use_core_routing,
                   const char* op) {
    const std::size_t r = p.v_a_t.rows();
    if (p.cores.empty()) {
        throw ParameterError(fmt::format("{}: no core matrices", op));
    }
    if (p.v_a_t.cols() != w.cols() || p.u_b.rows() != w.rows() || p.u_b.cols() != r) {
        throw ShapeError(fmt::format("{}: U_b {} / V_a^T {} inconsistent with W {}", op,
                                     p.u_b.shape_string(), p.v_a_t.shape_string(),
                                     w.shape_string()));
    }
    for (const auto& core : p.cores) {
        if (core.rows() != r || core.cols() != r) {
            throw ShapeError(fmt::format("{}: core {} is not {}x{}", op, core.shape_string(), r, r));
        }
    }
    const std::size_t want = use_core_routing ? r : w.cols();
    if (p.router.num_experts() != p.cores.size() || p.router.input_dim() != want) {
        throw ConfigError(fmt::format("{}: router {} does not match {} cores with {} routing "
                                      "(expected {}x{})",
                                      op, p.router.w_g.shape_string(), p.cores.size(),
                                      use_core_routing ? "core-space" : "full-input",
                                      p.cores.size(), want));
    }
}

template <typename T>
BasicMatrix<T> comol_impl(const BasicMatrix<T>& w, const ComolParams<T>& p,
                          const BasicMatrix<T>& tokens, T s, bool use_core_routing,
                          bool with_base, ForwardTrace<T>* trace) {
    require_tokens(w, tokens, "comol_forward");
    require_comol(w, p, use_core_routing, "comol_forward");
    const std::size_t r = p.v_a_t.rows();
    std::vector<const BasicMatrix<T>*> cores;
    for (const auto& c : p.cores) {
        cores.push_back(&c);
    }

    BasicMatrix<T> out(tokens.rows(), w.rows());
    Vec<T> y(r);
    Vec<T> delta(w.rows());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto x = tokens.row(t);
        Vec<T> x_hat(r);
        {
            ScopedOpKind kind(OpKind::expert);
            matvec<T>(p.v_a_t, x, x_hat);
        }
        RoutingWeights<T> routing = use_core_routing ? core_route<T>(p.router, x_hat)
                                                     : soft_route<T>(p.router, x);
        BasicMatrix<T> merged = merge_matrices<T>(routing.weights, cores);
        {
            ScopedOpKind kind(OpKind::expert);
            matvec<T>(merged, x_hat, y);
        }
        if (trace != nullptr) {
            trace->x_hat.push_back(std::move(x_hat));
            trace->routing.push_back(std::move(routing));
            trace->merged_core.push_back(std::move(merged));
            trace->core_out.push_back(y);
        }
        scale_in_place<T>(y, s);
        {
            ScopedOpKind kind(OpKind::expert);
            matvec<T>(p.u_b, y, delta);
        }
        finish_token<T>(w, x, delta, out.row(t), with_base);
    }
    return out;
}

template <typename T>
ForwardTrace<T> start_trace(Method method, const BasicMatrix<T>& tokens) {
    ForwardTrace<T> trace;
    trace.method = method;
    trace.tokens = tokens;
    return trace;
}

template <typename T>
BasicMatrix<T> forward_impl(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens,
                            bool with_base, ForwardTrace<T>* trace) {
    const LayerConfig& c = layer.config;
    const T s = layer.scale();
    require_tokens(layer.w, tokens, "forward");
    switch (c.method) {
    case Method::lora: {
        const auto& p = std::get<LoraParams<T>>(layer.params);
        BasicMatrix<T> out(tokens.rows(), layer.w.rows());
        for (std::size_t t = 0; t < tokens.rows(); ++t) {
            lora_token<T>(layer.w, p, tokens.row(t), s, out.row(t), with_base, trace);
        }
        return out;
    }
    case Method::moe_soft:
    case Method::moe_sparse: {
        const auto& p = std::get<MixtureParams<T>>(layer.params);
        require_experts(p.experts, p.router, layer.w, "forward");
        std::optional<std::size_t> k;
        if (c.method == Method::moe_sparse) {
            k = c.top_k;
        }
        BasicMatrix<T> out(tokens.rows(), layer.w.rows());
        for (std::size_t t = 0; t < tokens.rows(); ++t) {
            mixture_token<T>(layer.w, p.experts, p.router, tokens.row(t), k, s, out.row(t),
                             with_base, trace);
        }
        return out;
    }
    case Method::smear: {
        const auto& p = std::get<MixtureParams<T>>(layer.params);
        return smear_impl<T>(layer.w, p.experts, p.router, tokens, s, with_base, trace);
    }
    case Method::comol:
    case Method::comol_no_cr: {
        const auto& p = std::get<ComolParams<T>>(layer.params);
        return comol_impl<T>(layer.w, p, tokens, s, c.method == Method::comol, with_base, trace);
    }
    }
    throw ConfigError("forward: unknown method");
}

}  // namespace

template <typename T>
Vec<T> lora_forward(const BasicMatrix<T>& w, const LoraParams<T>& p, std::span<const T> x, T s) {
    if (x.size() != w.cols() || p.a.cols() != w.cols() || p.b.rows() != w.rows() ||
        p.b.cols() != p.a.rows()) {
        throw ShapeError(fmt::format("lora_forward: W {}, B {}, A {}, x {}", w.shape_string(),
                                     p.b.shape_string(), p.a.shape_string(), x.size()));
    }
    Vec<T> out(w.rows());
    lora_token<T>(w, p, x, s, out, true, nullptr);
    return out;
}

template <typename T>
Vec<T> moe_forward(const BasicMatrix<T>& w, const std::vector<LoraParams<T>>& experts,
                   const RouterParams<T>& router, std::span<const T> x,
                   std::optional<std::size_t> top_k, T s) {
    require_experts(experts, router, w, "moe_forward");
    if (x.size() != w.cols()) {
        throw ShapeError(fmt::format("moe_forward: x of length {} for W {}", x.size(),
                                     w.shape_string()));
    }
    Vec<T> out(w.rows());
    mixture_token<T>(w, experts, router, x, top_k, s, out, true, nullptr);
    return out;
}

template <typename T>
BasicMatrix<T> smear_forward(const BasicMatrix<T>& w, const std::vector<LoraParams<T>>& experts,
                             const RouterParams<T>& router, const BasicMatrix<T>& tokens, T s) {
    return smear_impl<T>(w, experts, router, tokens, s, true, nullptr);
}

template <typename T>
ForwardResult<T> comol_forward(const BasicMatrix<T>& w, const ComolParams<T>& p,
                               const BasicMatrix<T>& tokens, T s, bool use_core_routing) {
    ForwardResult<T> result;
    result.trace =
        start_trace(use_core_routing ? Method::comol : Method::comol_no_cr, tokens);
    result.outputs = comol_impl<T>(w, p, tokens, s, use_core_routing, true, &result.trace);
    return result;
}

template <typename T>
BasicMatrix<T> comol_forward_reference(const BasicMatrix<T>& w, const ComolParams<T>& p,
                                       const BasicMatrix<T>& tokens, T s, bool use_core_routing) {
    require_tokens(w, tokens, "comol_forward_reference");
    require_comol(w, p, use_core_routing, "comol_forward_reference");
    const std::size_t r = p.v_a_t.rows();
    const std::size_t n_experts = p.cores.size();

    BasicMatrix<T> out(tokens.rows(), w.rows());
    std::vector<Vec<T>> expert_out(n_experts, Vec<T>(w.rows()));
    Vec<T> x_hat(r);
    Vec<T> core_out(r);
    Vec<T> delta(w.rows());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto x = tokens.row(t);
        RoutingWeights<T> routing;
        if (use_core_routing) {
            Vec<T> router_in(r);
            {
                ScopedOpKind kind(OpKind::routing);
                matvec<T>(p.v_a_t, x, router_in);
            }
            routing = core_route<T>(p.router, router_in);
        } else {
            routing = soft_route<T>(p.router, x);
        }
        std::vector<std::span<const T>> outs;
        for (std::size_t i = 0; i < n_experts; ++i) {
            ScopedOpKind kind(OpKind::expert);
            matvec<T>(p.v_a_t, x, x_hat);
            matvec<T>(p.cores[i], x_hat, core_out);
            matvec<T>(p.u_b, core_out, expert_out[i]);
            outs.emplace_back(expert_out[i]);
        }
        Vec<T> weights = routing.weights;
        scale_in_place<T>(weights, s);
        weighted_sum<T>(weights, outs, delta);
        finish_token<T>(w, x, delta, out.row(t), true);
    }
    return out;
}

template <typename T>
ForwardResult<T> forward(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens) {
    ForwardResult<T> result;
    result.trace = start_trace(layer.config.method, tokens);
    result.outputs = forward_impl<T>(layer, tokens, true, &result.trace);
    return result;
}

template <typename T>
BasicMatrix<T> adapter_delta(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens) {
    return forward_impl<T>(layer, tokens, false, nullptr);
}

// Backward ------------------------------------------------------------------

namespace {

template <typename T>
void check_trace(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens,
                 const BasicMatrix<T>& grad_out, const ForwardTrace<T>& trace) {
    if (trace.method != layer.config.method) {
        throw ContractError(fmt::format("layer_backward: trace was recorded for {}, layer is {}",
                                        to_string(trace.method), to_string(layer.config.method)));
    }
    if (!(trace.tokens == tokens)) {
        throw ContractError("layer_backward: trace does not belong to these tokens");
    }
    if (grad_out.rows() != tokens.rows() || grad_out.cols() != layer.w.rows()) {
        throw ShapeError(fmt::format("layer_backward: grad_out {} for {} tokens and m={}",
                                     grad_out.shape_string(), tokens.rows(), layer.w.rows()));
    }
    const std::size_t L = tokens.rows();
    bool ok = true;
    switch (layer.config.method) {
    case Method::lora: ok = trace.hidden.size() == L; break;
    case Method::moe_soft:
    case Method::moe_sparse:
        ok = trace.hidden.size() == L && trace.outputs.size() == L && trace.routing.size() == L;
        break;
    case Method::smear: ok = trace.hidden.size() == L && trace.routing.size() == 1; break;
    case Method::comol:
    case Method::comol_no_cr:
        ok = trace.x_hat.size() == L && trace.routing.size() == L &&
             trace.merged_core.size() == L && trace.core_out.size() == L;
        break;
    }
    if (!ok) {
        throw ContractError("layer_backward: trace is incomplete for this batch");
    }
}

template <typename T>
const Vec<T>* extra_for(const BackwardOptions<T>& options, std::size_t event, std::size_t n) {
    if (options.extra_weight_grads == nullptr) {
        return nullptr;
    }
    const auto& all = *options.extra_weight_grads;
    if (event >= all.size() || all[event].size() != n) {
        throw ContractError("layer_backward: extra routing gradients do not match the trace");
    }
    return &all[event];
}

// grad_tokens[t] += W^T g_t for every token.
template <typename T>
void add_base_input_grad(const BasicMatrix<T>& w, const BasicMatrix<T>& grad_out,
                         BasicMatrix<T>& grad_tokens) {
    Vec<T> tmp(w.cols());
    for (std::size_t t = 0; t < grad_out.rows(); ++t) {
        matvec_transposed<T>(w, grad_out.row(t), tmp);
        axpy<T>(T{1}, tmp, grad_tokens.row(t));
    }
}

template <typename T>
void lora_backward(const LoraParams<T>& p, const BasicMatrix<T>& tokens,
                   const BasicMatrix<T>& grad_out, const ForwardTrace<T>& trace, T s,
                   LoraParams<T>& g, BasicMatrix<T>& grad_tokens) {
    Vec<T> gu(p.a.rows());
    Vec<T> tmp(p.a.cols());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto x = tokens.row(t);
        const auto go = grad_out.row(t);
        const Vec<T>& u = trace.hidden[t][0];
        add_outer<T>(g.b, s, go, u);
        matvec_transposed<T>(p.b, go, gu);
        scale_in_place<T>(gu, s);
        add_outer<T>(g.a, T{1}, gu, x);
        matvec_transposed<T>(p.a, gu, tmp);
        axpy<T>(T{1}, tmp, grad_tokens.row(t));
    }
}

template <typename T>
void mixture_backward(const MixtureParams<T>& p, const BasicMatrix<T>& tokens,
                      const BasicMatrix<T>& grad_out, const ForwardTrace<T>& trace, T s,
                      const BackwardOptions<T>& options, MixtureParams<T>& g,
                      BasicMatrix<T>& grad_tokens) {
    const std::size_t n_experts = p.experts.size();
    const std::size_t r = p.experts.front().a.rows();
    Vec<T> gu(r);
    Vec<T> tmp(tokens.cols());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto x = tokens.row(t);
        const auto go = grad_out.row(t);
        const RoutingWeights<T>& routing = trace.routing[t];
        Vec<T> grad_weights(n_experts, T{0});
        for (std::size_t i : routing.active) {
            const T gi = routing.weights[i];
            const auto& e = p.experts[i];
            auto& ge = g.experts[i];
            add_outer<T>(ge.b, s * gi, go, trace.hidden[t][i]);
            matvec_transposed<T>(e.b, go, gu);
            scale_in_place<T>(gu, s * gi);
            add_outer<T>(ge.a, T{1}, gu, x);
            matvec_transposed<T>(e.a, gu, tmp);
            axpy<T>(T{1}, tmp, grad_tokens.row(t));
            grad_weights[i] = s * dot<T>(go, trace.outputs[t][i]);
        }
        if (const Vec<T>* extra = extra_for(options, t, n_experts)) {
            axpy<T>(T{1}, *extra, grad_weights);
        }
        const Vec<T> grad_logits = routing_logit_gradient<T>(routing, grad_weights);
        add_outer<T>(g.router.w_g, T{1}, grad_logits, x);
        matvec_transposed<T>(p.router.w_g, grad_logits, tmp);
        axpy<T>(T{1}, tmp, grad_tokens.row(t));
    }
}

template <typename T>
void smear_backward(const MixtureParams<T>& p, const BasicMatrix<T>& tokens,
                    const BasicMatrix<T>& grad_out, const ForwardTrace<T>& trace, T s,
                    const BackwardOptions<T>& options, MixtureParams<T>& g,
                    BasicMatrix<T>& grad_tokens) {
    const std::size_t n_experts = p.experts.size();
    const BasicMatrix<T>& mb = trace.merged_b;
    const BasicMatrix<T>& ma = trace.merged_a;
    BasicMatrix<T> g_mb(mb.rows(), mb.cols());
    BasicMatrix<T> g_ma(ma.rows(), ma.cols());
    Vec<T> gu(ma.rows());
    Vec<T> tmp(tokens.cols());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto x = tokens.row(t);
        const auto go = grad_out.row(t);
        add_outer<T>(g_mb, s, go, trace.hidden[t][0]);
        matvec_transposed<T>(mb, go, gu);
        scale_in_place<T>(gu, s);
        add_outer<T>(g_ma, T{1}, gu, x);
        matvec_transposed<T>(ma, gu, tmp);
        axpy<T>(T{1}, tmp, grad_tokens.row(t));
    }

    const RoutingWeights<T>& routing = trace.routing[0];
    Vec<T> grad_weights(n_experts);
    for (std::size_t i = 0; i < n_experts; ++i) {
        axpy<T>(routing.weights[i], g_mb, g.experts[i].b);
        axpy<T>(routing.weights[i], g_ma, g.experts[i].a);
        grad_weights[i] =
            frobenius_dot<T>(g_mb, p.experts[i].b) + frobenius_dot<T>(g_ma, p.experts[i].a);
    }
    if (const Vec<T>* extra = extra_for(options, 0, n_experts)) {
        axpy<T>(T{1}, *extra, grad_weights);
    }
    const Vec<T> grad_logits = routing_logit_gradient<T>(routing, grad_weights);
    add_outer<T>(g.router.w_g, T{1}, grad_logits, trace.instance_mean);
    Vec<T> grad_mean = matvec_transposed<T>(p.router.w_g, grad_logits);
    const T inv_len = T{1} / static_cast<T>(tokens.rows());
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        axpy<T>(inv_len, grad_mean, grad_tokens.row(t));
    }
}

template <typename T>
void comol_backward(const ComolParams<T>& p, const BasicMatrix<T>& tokens,
                    const BasicMatrix<T>& grad_out, const ForwardTrace<T>& trace, T s,
                    bool use_core_routing, const BackwardOptions<T>& options, ComolParams<T>& g,
                    BasicMatrix<T>& grad_tokens) {
    const std::size_t n_experts = p.cores.size();
    const std::size_t r = p.v_a_t.rows();
    Vec<T> gy(r);
    Vec<T> gx_hat(r);
    Vec<T> tmp_r(r);
    Vec<T> tmp(tokens.cols());
    BasicMatrix<T> g_merged(r, r);
    for (std::size_t t = 0; t < tokens.rows(); ++t) {
        const auto x = tokens.row(t);
        const auto go = grad_out.row(t);
        const Vec<T>& x_hat = trace.x_hat[t];
        const RoutingWeights<T>& routing = trace.routing[t];

        add_outer<T>(g.u_b, s, go, trace.core_out[t]);
        matvec_transposed<T>(p.u_b, go, gy);
        scale_in_place<T>(gy, s);

        // Transform path: y = M_merged x_hat.
        g_merged.fill(T{0});
        add_outer<T>(g_merged, T{1}, gy, x_hat);
        matvec_transposed<T>(trace.merged_core[t], gy, gx_hat);

        Vec<T> grad_weights(n_experts);
        for (std::size_t i = 0; i < n_experts; ++i) {
            axpy<T>(routing.weights[i], g_merged, g.cores[i]);
            grad_weights[i] = frobenius_dot<T>(g_merged, p.cores[i]);
        }
        if (const Vec<T>* extra = extra_for(options, t, n_experts)) {
            axpy<T>(T{1}, *extra, grad_weights);
        }
        const Vec<T> grad_logits = routing_logit_gradient<T>(routing, grad_weights);

        if (use_core_routing) {
            // Router path: logits = W_g x_hat.
            add_outer<T>(g.router.w_g, T{1}, grad_logits, x_hat);
            if (!options.drop_core_router_path) {
                matvec_transposed<T>(p.router.w_g, grad_logits, tmp_r);
                axpy<T>(T{1}, tmp_r, gx_hat);
            }
        } else {
            add_outer<T>(g.router.w_g, T{1}, grad_logits, x);
            matvec_transposed<T>(p.router.w_g, grad_logits, tmp);
            axpy<T>(T{1}, tmp, grad_tokens.row(t));
        }

        add_outer<T>(g.v_a_t, T{1}, gx_hat, x);
        matvec_transposed<T>(p.v_a_t, gx_hat, tmp);
        axpy<T>(T{1}, tmp, grad_tokens.row(t));
    }
}

}  // namespace

template <typename T>
BackwardResult<T> layer_backward(const AdapterLayer<T>& layer, const BasicMatrix<T>& tokens,
                                 const BasicMatrix<T>& grad_out, const ForwardTrace<T>& trace,
                                 const BackwardOptions<T>& options) {
    check_trace(layer, tokens, grad_out, trace);
    const T s = layer.scale();
    BackwardResult<T> result;
    result.grads = zeros_like(layer.params);
    result.grad_tokens = BasicMatrix<T>(tokens.rows(), tokens.cols());
    add_base_input_grad(layer.w, grad_out, result.grad_tokens);

    switch (layer.config.method) {
    case Method::lora:
        lora_backward<T>(std::get<LoraParams<T>>(layer.params), tokens, grad_out, trace, s,
                         std::get<LoraParams<T>>(result.grads), result.grad_tokens);
        break;
    case Method::moe_soft:
    case Method::moe_sparse:
        mixture_backward<T>(std::get<MixtureParams<T>>(layer.params), tokens, grad_out, trace, s,
                            options, std::get<MixtureParams<T>>(result.grads),
                            result.grad_tokens);
        break;
    case Method::smear:
        smear_backward<T>(std::get<MixtureParams<T>>(layer.params), tokens, grad_out, trace, s,
                          options, std::get<MixtureParams<T>>(result.grads), result.grad_tokens);
        break;
    case Method::comol:
    case Method::comol_no_cr:
        comol_backward<T>(std::get<ComolParams<T>>(layer.params), tokens, grad_out, trace, s,
                          layer.config.method == Method::comol, options,
                          std::get<ComolParams<T>>(result.grads), result.grad_tokens);
        break;
    }
    return result;
}

// Initialization ------------------------------------------------------------

namespace {

template <typename T>
BasicMatrix<T> uniform_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                              double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    BasicMatrix<T> m(rows, cols);
    for (T& v : m.data()) {
        v = static_cast<T>(dist(rng));
    }
    return m;
}

constexpr double kRouterInitBound = 0.01;

template <typename T>
AdapterLayer<T> init_params(const LayerConfig& c, BasicMatrix<T> w, std::mt19937_64& rng) {
    c.validate();
    const double a_bound = 1.0 / std::sqrt(static_cast<double>(c.n));
    AdapterLayer<T> layer;
    layer.config = c;
    layer.w = std::move(w);

    const auto lora_pair = [&] {
        LoraParams<T> p;
        p.a = uniform_matrix<T>(rng, c.r, c.n, a_bound);
        p.b = BasicMatrix<T>(c.m, c.r);
        return p;
    };

    if (c.method == Method::lora) {
        layer.params = lora_pair();
    } else if (is_expert_mixture(c.method)) {
        MixtureParams<T> p;
        for (std::size_t i = 0; i < c.num_experts; ++i) {
            p.experts.push_back(lora_pair());
        }
        p.router.w_g = uniform_matrix<T>(rng, c.num_experts, c.n, kRouterInitBound);
        layer.params = std::move(p);
    } else {
        ComolParams<T> p;
        p.u_b = uniform_matrix<T>(rng, c.m, c.r, 1.0 / std::sqrt(static_cast<double>(c.r)));
        p.v_a_t = uniform_matrix<T>(rng, c.r, c.n, a_bound);
        p.cores.assign(c.num_experts, BasicMatrix<T>(c.r, c.r));
        p.router.w_g =
            uniform_matrix<T>(rng, c.num_experts, c.router_input_dim(), kRouterInitBound);
        layer.params = std::move(p);
    }
    validate_layer(layer);
    return layer;
}

}  // namespace

template <typename T>
AdapterLayer<T> init_layer(const LayerConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    BasicMatrix<T> w =
        uniform_matrix<T>(rng, config.m, config.n, 1.0 / std::sqrt(static_cast<double>(config.n)));
    return init_params<T>(config, std::move(w), rng);
}

template <typename T>
AdapterLayer<T> init_layer(const LayerConfig& config, BasicMatrix<T> w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return init_params<T>(config, std::move(w), rng);
}

template <typename To, typename From>
AdapterLayer<To> cast_layer(const AdapterLayer<From>& layer) {
    AdapterLayer<To> out;
    out.config = layer.config;
    out.w = layer.w.template cast<To>();
    const auto cast_lora = [](const LoraParams<From>& p) {
        return LoraParams<To>{p.b.template cast<To>(), p.a.template cast<To>()};
    };
    if (const auto* p = std::get_if<LoraParams<From>>(&layer.params)) {
        out.params = cast_lora(*p);
    } else if (const auto* p = std::get_if<MixtureParams<From>>(&layer.params)) {
        MixtureParams<To> q;
        for (const auto& e : p->experts) {
            q.experts.push_back(cast_lora(e));
        }
        q.router.w_g = p->router.w_g.template cast<To>();
        out.params = std::move(q);
    } else {
        const auto& c = std::get<ComolParams<From>>(layer.params);
        ComolParams<To> q;
        q.u_b = c.u_b.template cast<To>();
        q.v_a_t = c.v_a_t.template cast<To>();
        for (const auto& core : c.cores) {
            q.cores.push_back(core.template cast<To>());
        }
        q.router.w_g = c.router.w_g.template cast<To>();
        out.params = std::move(q);
    }
    return out;
}

#define COMOL_INSTANTIATE_ADAPTERS(T)                                                          \
    template void for_each_tensor<T>(AdapterParams<T>&,                                        \
                                     const std::function<void(const std::string&,             \
                                                              BasicMatrix<T>&)>&);             \
    template void for_each_tensor<T>(const AdapterParams<T>&,                                  \
                                     const std::function<void(const std::string&,             \
                                                              const BasicMatrix<T>&)>&);       \
    template AdapterParams<T> zeros_like<T>(const AdapterParams<T>&);                          \
    template std::size_t parameter_count<T>(const AdapterParams<T>&);                          \
    template void validate_layer<T>(const AdapterLayer<T>&);                                   \
    template Vec<T> lora_forward<T>(const BasicMatrix<T>&, const LoraParams<T>&,               \
                                    std::span<const T>, T);                                    \
    template Vec<T> moe_forward<T>(const BasicMatrix<T>&, const std::vector<LoraParams<T>>&,   \
                                   const RouterParams<T>&, std::span<const T>,                 \
                                   std::optional<std::size_t>, T);                             \
    template BasicMatrix<T> smear_forward<T>(const BasicMatrix<T>&,                            \
                                             const std::vector<LoraParams<T>>&,                \
                                             const RouterParams<T>&, const BasicMatrix<T>&, T); \
    template ForwardResult<T> comol_forward<T>(const BasicMatrix<T>&, const ComolParams<T>&,   \
                                               const BasicMatrix<T>&, T, bool);                \
    template BasicMatrix<T> comol_forward_reference<T>(                                        \
        const BasicMatrix<T>&, const ComolParams<T>&, const BasicMatrix<T>&, T, bool);         \
    template ForwardResult<T> forward<T>(const AdapterLayer<T>&, const BasicMatrix<T>&);       \
    template BasicMatrix<T> adapter_delta<T>(const AdapterLayer<T>&, const BasicMatrix<T>&);   \
    template BackwardResult<T> layer_backward<T>(const AdapterLayer<T>&, const BasicMatrix<T>&, \
                                                 const BasicMatrix<T>&,                        \
                                                 const ForwardTrace<T>&,                       \
                                                 const BackwardOptions<T>&);                   \
    template AdapterLayer<T> init_layer<T>(const LayerConfig&, std::uint64_t);                 \
    template AdapterLayer<T> init_layer<T>(const LayerConfig&, BasicMatrix<T>, std::uint64_t);

COMOL_INSTANTIATE_ADAPTERS(float)
COMOL_INSTANTIATE_ADAPTERS(double)

#undef COMOL_INSTANTIATE_ADAPTERS

template AdapterLayer<float> cast_layer<float, double>(const AdapterLayer<double>&);
template AdapterLayer<double> cast_layer<double, float>(const AdapterLayer<float>&);
template AdapterLayer<double> cast_layer<double, double>(const AdapterLayer<double>&);
template AdapterLayer<float> cast_layer<float, float>(const AdapterLayer<float>&);

}  // namespace comol
