// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>

#include "comol/coreconvert.h"
#include "support/test_helpers.h"

using namespace comol;
using testing::naive_matmul;

TEST_CASE("lora_to_core: hand SVD of rank-one factors") {
    const Matrix b = Matrix::from_rows({{1}, {1}});
    const Matrix a = Matrix::from_rows({{1, 0}});
    const auto d = lora_to_core(b, a);
    const double h = 1.0 / std::sqrt(2.0);
    CHECK(d.u_b(0, 0) == doctest::Approx(h).epsilon(1e-15));
    CHECK(d.u_b(1, 0) == doctest::Approx(h).epsilon(1e-15));
    CHECK(d.core(0, 0) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
    CHECK(d.v_a_t == Matrix::from_rows({{1, 0}}));
    CHECK(max_abs_difference(core_to_delta(d), Matrix::from_rows({{1, 0}, {1, 0}})) < 1e-15);
}

TEST_CASE("lora_to_core: zero B") {
    std::mt19937_64 rng(1);
    const auto d = lora_to_core(Matrix(4, 2), testing::random(rng, 2, 5));
    CHECK(frobenius_norm(d.core) == 0.0);
    CHECK(frobenius_norm(core_to_delta(d)) == 0.0);
    CHECK(testing::orthonormality_error(d.u_b, true) < 1e-9);
}

TEST_CASE("lora_to_core: errors") {
    CHECK_THROWS_AS(lora_to_core(Matrix(4, 2), Matrix(3, 5)), ShapeError);
    CHECK_THROWS_AS(lora_to_core(Matrix(2, 3), Matrix(3, 5)), ParameterError);
}

TEST_CASE("lora_to_core: reconstruction, orthonormality and norm (property)") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> dim(1, 10);
    for (int trial = 0; trial < 150; ++trial) {
        const std::size_t m = dim(rng), n = dim(rng);
        std::uniform_int_distribution<std::size_t> rank(1, std::min(m, n));
        const std::size_t r = rank(rng);
        Matrix b = testing::random(rng, m, r);
        if (trial % 3 == 0 && r > 1) {
            for (std::size_t i = 0; i < m; ++i) b(i, r - 1) = 2.0 * b(i, 0);  // rank-deficient
        }
        if (trial % 7 == 0) b(0, 0) = 0.0;
        const Matrix a = testing::random(rng, r, n);
        const auto d = lora_to_core(b, a);
        const Matrix ba = naive_matmul(b, a);
        CAPTURE(m);
        CAPTURE(n);
        CAPTURE(r);
        CHECK(relative_frobenius_error(core_to_delta(d), ba) < 1e-9);
        CHECK(testing::orthonormality_error(d.u_b, true) < 1e-9);
        CHECK(testing::orthonormality_error(d.v_a_t, false) < 1e-9);
        CHECK(std::abs(frobenius_norm(d.core) - frobenius_norm(ba)) <=
              1e-9 * std::max(1.0, frobenius_norm(ba)));
    }
}

TEST_CASE("core_to_delta: identity core on orthonormal factors has unit singular values") {
    std::mt19937_64 rng(3);
    const auto u = reduced_svd(testing::random(rng, 6, 3)).u;
    const auto vt = transpose(reduced_svd(testing::random(rng, 5, 3)).u);
    const CoreDecomposition d{u, Matrix::identity(3), vt};
    const Matrix delta = core_to_delta(d);
    CHECK(max_abs_difference(delta, naive_matmul(u, vt)) < 1e-15);
    const auto sigma = reduced_svd(delta).sigma;
    for (std::size_t i = 0; i < 3; ++i) CHECK(sigma[i] == doctest::Approx(1.0).epsilon(1e-10));
    for (std::size_t i = 3; i < sigma.size(); ++i) CHECK(std::abs(sigma[i]) < 1e-10);

    CHECK(frobenius_norm(core_to_delta({u, Matrix(3, 3), vt})) == 0.0);
    CHECK_THROWS_AS(core_to_delta({u, Matrix(2, 2), vt}), ShapeError);
}

TEST_CASE("experts_to_comol: single expert is exact") {
    std::mt19937_64 rng(4);
    const LoraParams<double> e{testing::random(rng, 6, 2), testing::random(rng, 2, 7)};
    const auto conv = experts_to_comol({e}, 0);
    REQUIRE(conv.params.cores.size() == 1);
    const CoreDecomposition d{conv.params.u_b, conv.params.cores[0], conv.params.v_a_t};
    CHECK(relative_frobenius_error(core_to_delta(d), naive_matmul(e.b, e.a)) < 1e-9);
    CHECK(conv.residuals[0] < 1e-9);
    CHECK(conv.params.router.w_g.rows() == 1);
    CHECK(conv.params.router.w_g.cols() == 2);
    CHECK(experts_to_comol({e}, 0, false).params.router.w_g.cols() == 7);
}

TEST_CASE("experts_to_comol: identical updates give equal cores") {
    std::mt19937_64 rng(5);
    const LoraParams<double> e{testing::random(rng, 5, 2), testing::random(rng, 2, 5)};
    // same product B A through a different factorization
    const Matrix g = Matrix::from_rows({{2, 1}, {0, 0.5}});
    const Matrix g_inv = Matrix::from_rows({{0.5, -1}, {0, 2}});
    const LoraParams<double> f{naive_matmul(e.b, g), naive_matmul(g_inv, e.a)};
    const auto conv = experts_to_comol({e, f, e}, 1);
    CHECK(max_abs_difference(conv.params.cores[0], conv.params.cores[1]) < 1e-9);
    CHECK(max_abs_difference(conv.params.cores[2], conv.params.cores[1]) < 1e-9);
    for (double res : conv.residuals) CHECK(res < 1e-9);
}

TEST_CASE("experts_to_comol: residual equals the explicit two-sided projection error") {
    // expert 1 lives in coordinates disjoint from the anchor's
    Matrix b0(6, 2), a0(2, 6), b1(6, 2), a1(2, 6);
    std::mt19937_64 rng(6);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            b0(i, j) = testing::random(rng, 1, 1)(0, 0);
            b1(i + 3, j) = testing::random(rng, 1, 1)(0, 0);
            a0(j, i) = testing::random(rng, 1, 1)(0, 0);
            a1(j, i + 3) = testing::random(rng, 1, 1)(0, 0);
        }
    const LoraParams<double> e0{b0, a0}, e1{b1, a1};
    const auto conv = experts_to_comol({e0, e1}, 0);
    CHECK(conv.residuals[0] < 1e-9);

    const Matrix& u = conv.params.u_b;
    const Matrix v = transpose(conv.params.v_a_t);
    const Matrix pu = naive_matmul(u, transpose(u));
    const Matrix pv = naive_matmul(v, transpose(v));
    const Matrix delta = naive_matmul(b1, a1);
    const Matrix projected = naive_matmul(naive_matmul(pu, delta), pv);
    const double expected = frobenius_distance(delta, projected);
    CHECK(conv.residuals[1] == doctest::Approx(expected).epsilon(1e-9));
    CHECK(conv.residuals[1] == doctest::Approx(frobenius_norm(delta)).epsilon(1e-9));
    CHECK(conv.residuals[1] > 0.1);

    // residual is zero exactly when the update lies in both subspaces
    const Matrix c = testing::random(rng, 2, 2);
    const LoraParams<double> inside{naive_matmul(u, c), conv.params.v_a_t};
    CHECK(experts_to_comol({e0, inside}, 0).residuals[1] < 1e-9);
}

TEST_CASE("experts_to_comol: errors") {
    CHECK_THROWS_AS(experts_to_comol({}, 0), ParameterError);
    std::mt19937_64 rng(7);
    const LoraParams<double> e{testing::random(rng, 4, 2), testing::random(rng, 2, 4)};
    CHECK_THROWS_AS(experts_to_comol({e}, 1), ParameterError);
    const LoraParams<double> other{testing::random(rng, 5, 2), testing::random(rng, 2, 4)};
    CHECK_THROWS_AS(experts_to_comol({e, other}, 0), ShapeError);
}
