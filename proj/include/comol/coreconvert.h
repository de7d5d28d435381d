// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Re-parameterization of LoRA factors into core-space form and back.
//
//   B = U_B S_B V_B^T,  A = U_A S_A V_A^T   (reduced SVDs)
//   M = S_B V_B^T U_A S_A                    (r x r core)
//   B A = U_B M V_A^T

#pragma once

#include <cstdint>
#include <vector>

#include "comol/adapters.h"

namespace comol {

struct CoreDecomposition {
    Matrix u_b;    // m x r, orthonormal columns when produced by lora_to_core
    Matrix core;   // r x r
    Matrix v_a_t;  // r x n, orthonormal rows when produced by lora_to_core
};

/// Throws ShapeError when b and a do not chain, ParameterError when r > min(m, n),
/// NumericalError if an SVD fails to converge.
CoreDecomposition lora_to_core(const Matrix& b, const Matrix& a);

/// U_B M V_A^T.
Matrix core_to_delta(const CoreDecomposition& d);

struct ExpertConversion {
    ComolParams<double> params;
    /// ||B_i A_i - U_B M_i V_A^T||_F per expert; zero only for experts whose
    /// update lies in the anchor's row and column spaces.
    std::vector<double> residuals;
};

/// Shared projections from the anchor expert's decomposition, one core per
/// expert by projection M_i = U_B^T B_i A_i V_A. The router is drawn like
/// init_layer's (uniform +-0.01) with N x r or N x n columns.
ExpertConversion experts_to_comol(const std::vector<LoraParams<double>>& experts,
                                  std::size_t anchor, bool use_core_routing = true,
                                  std::uint64_t seed = 0);

}  // namespace comol
