// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/linalg.h"

#include <numeric>

namespace comol {

std::string_view to_string(OpKind kind) {
    switch (kind) {
    case OpKind::base: return "base";
    case OpKind::residual: return "residual";
    case OpKind::expert: return "expert";
    case OpKind::weighting: return "weighting";
    case OpKind::aggregation: return "aggregation";
    case OpKind::routing: return "routing";
    case OpKind::selection: return "selection";
    case OpKind::other: return "other";
    }
    return "unknown";
}

std::uint64_t OpTally::total() const {
    return std::accumulate(flops.begin(), flops.end(), std::uint64_t{0});
}

std::uint64_t OpTally::adapter_total() const {
    return (*this)[OpKind::expert] + (*this)[OpKind::weighting] +
           (*this)[OpKind::aggregation] + (*this)[OpKind::routing];
}

ScopedOpTally::ScopedOpTally(OpTally& tally) : previous_(detail::tally_state.sink) {
    detail::tally_state.sink = &tally;
}

ScopedOpTally::~ScopedOpTally() { detail::tally_state.sink = previous_; }

ScopedOpKind::ScopedOpKind(OpKind kind) : previous_(detail::tally_state.kind) {
    detail::tally_state.kind = kind;
}

ScopedOpKind::~ScopedOpKind() { detail::tally_state.kind = previous_; }

double relative_frobenius_error(const Matrix& a, const Matrix& reference) {
    const double denom = frobenius_norm(reference);
    const double dist = frobenius_distance(a, reference);
    if (denom == 0.0) {
        return dist;
    }
    return dist / denom;
}

namespace {

// Column-major working copy so Jacobi rotations touch contiguous memory.
struct Columns {
    std::size_t len = 0;
    std::vector<std::vector<double>> cols;

    double dot(std::size_t p, std::size_t q) const {
        double acc = 0.0;
        const auto& a = cols[p];
        const auto& b = cols[q];
        for (std::size_t i = 0; i < len; ++i) {
            acc += a[i] * b[i];
        }
        return acc;
    }

    void rotate(std::size_t p, std::size_t q, double c, double s) {
        auto& a = cols[p];
        auto& b = cols[q];
        for (std::size_t i = 0; i < len; ++i) {
            const double ap = a[i];
            const double aq = b[i];
            a[i] = c * ap - s * aq;
            b[i] = s * ap + c * aq;
        }
    }
};

// Adds unit vectors orthogonal to `basis` until it holds `target` columns.
void complete_orthonormal(std::vector<std::vector<double>>& basis, std::size_t dim,
                          std::vector<std::size_t> missing) {
    std::size_t candidate = 0;
    for (std::size_t slot : missing) {
        while (candidate < dim) {
            std::vector<double> v(dim, 0.0);
            v[candidate++] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t j = 0; j < basis.size(); ++j) {
                    if (basis[j].empty()) {
                        continue;
                    }
                    double proj = 0.0;
                    for (std::size_t i = 0; i < dim; ++i) {
                        proj += basis[j][i] * v[i];
                    }
                    for (std::size_t i = 0; i < dim; ++i) {
                        v[i] -= proj * basis[j][i];
                    }
                }
            }
            double norm = 0.0;
            for (double x : v) {
                norm += x * x;
            }
            norm = std::sqrt(norm);
            if (norm > 0.5) {
                for (double& x : v) {
                    x /= norm;
                }
                basis[slot] = std::move(v);
                break;
            }
        }
    }
}

// One-sided (Hestenes) Jacobi for rows >= cols.
SvdResult jacobi_tall(const Matrix& a) {
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();

    Columns work{m, std::vector<std::vector<double>>(n, std::vector<double>(m))};
    Columns right{n, std::vector<std::vector<double>>(n, std::vector<double>(n, 0.0))};
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) {
            work.cols[j][i] = a(i, j);
        }
        right.cols[j][j] = 1.0;
    }

    const double norm_a = frobenius_norm(a);
    const double eps = std::numeric_limits<double>::epsilon();
    const double negligible = std::pow(static_cast<double>(std::max(m, n)) * eps * norm_a, 2);

    int sweep = 0;
    double residual = 0.0;
    for (; sweep < kSvdMaxSweeps; ++sweep) {
        residual = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = work.dot(p, p);
                const double beta = work.dot(q, q);
                if (alpha <= negligible || beta <= negligible) {
                    continue;
                }
                const double gamma = work.dot(p, q);
                const double off = std::abs(gamma) / std::sqrt(alpha * beta);
                residual = std::max(residual, off);
                if (off <= kSvdTolerance) {
                    continue;
                }
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
                const double c = 1.0 / std::hypot(1.0, t);
                const double s = c * t;
                work.rotate(p, q, c, s);
                right.rotate(p, q, c, s);
            }
        }
        if (residual <= kSvdTolerance) {
            break;
        }
    }
    if (residual > kSvdTolerance) {
        throw NumericalError(
            fmt::format("reduced_svd: no convergence after {} sweeps (off-diagonal {:.3e})",
                        kSvdMaxSweeps, residual),
            residual);
    }

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        norms[j] = std::sqrt(work.dot(j, j));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    std::vector<std::vector<double>> left(n);
    std::vector<std::size_t> missing;
    std::vector<double> sigma(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        if (norms[j] * norms[j] <= negligible) {
            sigma[k] = 0.0;
            missing.push_back(k);
            continue;
        }
        sigma[k] = norms[j];
        left[k] = work.cols[j];
        for (double& v : left[k]) {
            v /= norms[j];
        }
    }
    complete_orthonormal(left, m, missing);

    SvdResult out;
    out.u = Matrix(m, n);
    out.vt = Matrix(n, n);
    out.sigma = std::move(sigma);
    out.sweeps = sweep + 1;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& rv = right.cols[order[k]];
        for (std::size_t i = 0; i < m; ++i) {
            out.u(i, k) = left[k][i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            out.vt(k, i) = rv[i];
        }
    }
    return out;
}

// First entry of each left singular vector made non-negative.
void canonicalize_signs(SvdResult& svd) {
    constexpr double kZero = 1e-12;
    for (std::size_t k = 0; k < svd.u.cols(); ++k) {
        for (std::size_t i = 0; i < svd.u.rows(); ++i) {
            const double v = svd.u(i, k);
            if (std::abs(v) <= kZero) {
                continue;
            }
            if (v < 0.0) {
                for (std::size_t r = 0; r < svd.u.rows(); ++r) {
                    svd.u(r, k) = -svd.u(r, k);
                }
                for (std::size_t c = 0; c < svd.vt.cols(); ++c) {
                    svd.vt(k, c) = -svd.vt(k, c);
                }
            }
            break;
        }
    }
}

}  // namespace

SvdResult reduced_svd(const Matrix& a) {
    if (a.rows() == 0 || a.cols() == 0) {
        throw ShapeError(fmt::format("reduced_svd: empty input {}", a.shape_string()));
    }
    SvdResult out;
    if (a.rows() >= a.cols()) {
        out = jacobi_tall(a);
    } else {
        // a^T = U' S V'^T  =>  a = V' S U'^T
        SvdResult t = jacobi_tall(transpose(a));
        out.u = transpose(t.vt);
        out.vt = transpose(t.u);
        out.sigma = std::move(t.sigma);
        out.sweeps = t.sweeps;
    }
    canonicalize_signs(out);
    return out;
}

}  // namespace comol
