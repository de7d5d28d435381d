// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/coreconvert.h"

#include <random>

namespace comol {

namespace {

Matrix diag_times(const std::vector<double>& sigma, const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= sigma[i];
    return out;
}

Matrix times_diag(const Matrix& m, const std::vector<double>& sigma) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= sigma[j];
    return out;
}

void check_factor_shapes(const Matrix& b, const Matrix& a) {
    if (b.cols() != a.rows()) {
        throw ShapeError(fmt::format("LoRA factors do not chain: B is {}, A is {}",
                                     b.shape_string(), a.shape_string()));
    }
}

}  // namespace

CoreDecomposition lora_to_core(const Matrix& b, const Matrix& a) {
    check_factor_shapes(b, a);
    const std::size_t r = b.cols();
    if (r == 0 || r > std::min(b.rows(), a.cols())) {
        throw ParameterError(fmt::format("rank {} must lie in [1, min(m={}, n={})]", r, b.rows(),
                                         a.cols()));
    }
    const SvdResult sb = reduced_svd(b);  // u: m x r, vt: r x r
    const SvdResult sa = reduced_svd(a);  // u: r x r, vt: r x n
    // S_B V_B^T U_A S_A
    const Matrix core = matmul(diag_times(sb.sigma, sb.vt), times_diag(sa.u, sa.sigma));
    return {sb.u, core, sa.vt};
}

Matrix core_to_delta(const CoreDecomposition& d) {
    return matmul(matmul(d.u_b, d.core), d.v_a_t);
}

ExpertConversion experts_to_comol(const std::vector<LoraParams<double>>& experts,
                                  std::size_t anchor, bool use_core_routing,
                                  std::uint64_t seed) {
    if (experts.empty()) {
        throw ParameterError("experts_to_comol needs at least one expert");
    }
    if (anchor >= experts.size()) {
        throw ParameterError(
            fmt::format("anchor {} out of range for {} experts", anchor, experts.size()));
    }
    const std::size_t m = experts[0].b.rows();
    const std::size_t r = experts[0].b.cols();
    const std::size_t n = experts[0].a.cols();
    for (const auto& e : experts) {
        check_factor_shapes(e.b, e.a);
        if (e.b.rows() != m || e.b.cols() != r || e.a.cols() != n) {
            throw ShapeError(fmt::format("expert shapes differ: B {} A {} vs {}x{} / {}x{}",
                                         e.b.shape_string(), e.a.shape_string(), m, r, r, n));
        }
    }

    const CoreDecomposition base = lora_to_core(experts[anchor].b, experts[anchor].a);
    const Matrix u_t = transpose(base.u_b);
    const Matrix v = transpose(base.v_a_t);

    ExpertConversion out;
    out.params.u_b = base.u_b;
    out.params.v_a_t = base.v_a_t;
    for (const auto& e : experts) {
        Matrix core = matmul(matmul(u_t, e.b), matmul(e.a, v));
        const Matrix delta = matmul(e.b, e.a);
        const Matrix projected = matmul(matmul(base.u_b, core), base.v_a_t);
        out.residuals.push_back(frobenius_distance(delta, projected));
        out.params.cores.push_back(std::move(core));
    }

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-0.01, 0.01);
    Matrix w_g(experts.size(), use_core_routing ? r : n);
    for (double& x : w_g.data()) x = dist(rng);
    out.params.router.w_g = std::move(w_g);
    return out;
}

}  // namespace comol
