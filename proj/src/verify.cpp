// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/verify.h"

#include <cmath>

namespace comol {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = dist(rng);
    }
    return m;
}

AdapterLayer<double> random_layer(const LayerConfig& config, std::uint64_t seed, double bound,
                                  double router_bound) {
    AdapterLayer<double> layer = init_layer<double>(config, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    for_each_tensor<double>(layer.params, [&](const std::string& name, Matrix& t) {
        const double b = name == "router.w_g" ? router_bound : bound;
        t = random_matrix(rng, t.rows(), t.cols(), b);
    });
    return layer;
}

namespace {

double loss_of(const AdapterLayer<double>& layer, const Matrix& tokens, const Matrix& grad_out) {
    const Matrix out = forward(layer, tokens).outputs;
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        total += grad_out.data()[i] * out.data()[i];
    }
    return total;
}

void compare(double analytic, double numeric, const std::string& label,
             const GradCheckOptions& options, GradCheckReport& report) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
    const double rel = std::abs(analytic - numeric) / denom;
    ++report.entries_checked;
    if (!(rel <= report.max_relative_error)) {
        report.max_relative_error = std::isnan(rel) ? INFINITY : rel;
        report.worst_entry = label;
    }
}

}  // namespace

GradCheckReport check_gradients(const AdapterLayer<double>& layer, const Matrix& tokens,
                                const Matrix& grad_out, const GradCheckOptions& options) {
    const auto fwd = forward(layer, tokens);
    BackwardOptions<double> bopts;
    bopts.drop_core_router_path = options.drop_core_router_path;
    const auto grads = layer_backward(layer, tokens, grad_out, fwd.trace, bopts);

    GradCheckReport report;
    const double h = options.step;

    // Collect analytic tensors by name so the perturbed copy can be walked in step.
    std::vector<const Matrix*> analytic;
    for_each_tensor<double>(grads.grads,
                            [&](const std::string&, const Matrix& t) { analytic.push_back(&t); });

    AdapterLayer<double> probe = layer;
    std::size_t index = 0;
    for_each_tensor<double>(probe.params, [&](const std::string& name, Matrix& t) {
        const Matrix& g = *analytic[index++];
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double saved = t.data()[i];
            t.data()[i] = saved + h;
            const double plus = loss_of(probe, tokens, grad_out);
            t.data()[i] = saved - h;
            const double minus = loss_of(probe, tokens, grad_out);
            t.data()[i] = saved;
            compare(g.data()[i], (plus - minus) / (2.0 * h), fmt::format("{}[{}]", name, i),
                    options, report);
        }
    });

    Matrix x = tokens;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x.data()[i];
        x.data()[i] = saved + h;
        const double plus = loss_of(layer, x, grad_out);
        x.data()[i] = saved - h;
        const double minus = loss_of(layer, x, grad_out);
        x.data()[i] = saved;
        compare(grads.grad_tokens.data()[i], (plus - minus) / (2.0 * h),
                fmt::format("tokens[{}]", i), options, report);
    }
    return report;
}

GradCheckReport check_gradients(const LayerConfig& config, std::size_t seq_len,
                                std::uint64_t seed, const GradCheckOptions& options) {
    const AdapterLayer<double> layer = random_layer(config, seed);
    std::mt19937_64 rng(seed + 0x51ed27ULL);
    const Matrix tokens = random_matrix(rng, seq_len, config.n, 1.0);
    const Matrix grad_out = random_matrix(rng, seq_len, config.m, 1.0);
    return check_gradients(layer, tokens, grad_out, options);
}

double distributivity_error(std::size_t m, std::size_t n, std::size_t r, std::size_t num_experts,
                            std::size_t seq_len, std::uint64_t seed, bool use_core_routing) {
    LayerConfig config;
    config.m = m;
    config.n = n;
    config.r = r;
    config.num_experts = num_experts;
    config.method = use_core_routing ? Method::comol : Method::comol_no_cr;
    const AdapterLayer<double> layer = random_layer(config, seed);
    const auto& p = std::get<ComolParams<double>>(layer.params);
    std::mt19937_64 rng(seed + 0x3c6ef372ULL);
    const Matrix tokens = random_matrix(rng, seq_len, n, 1.0);
    const double s = layer.scale();
    const Matrix fused = comol_forward(layer.w, p, tokens, s, use_core_routing).outputs;
    const Matrix reference = comol_forward_reference(layer.w, p, tokens, s, use_core_routing);
    return max_abs_difference(fused, reference);
}

}  // namespace comol
