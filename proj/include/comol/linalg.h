// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense linear algebra: a row-major matrix, products with a fixed
// accumulation order, a max-shifted softmax, reduced SVD and Frobenius norms.
// Every primitive reports its FLOPs to the thread's OpTally (op_counter.h).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "comol/errors.h"
#include "comol/op_counter.h"

namespace comol {

template <typename T>
using Vec = std::vector<T>;

template <typename T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw ShapeError(fmt::format("matrix data length {} does not match {}x{}",
                                         data_.size(), rows_, cols_));
        }
    }

    static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<T> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) {
                throw ShapeError("from_rows: ragged initializer");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return BasicMatrix(r, c, std::move(data));
    }

    static BasicMatrix identity(std::size_t n) {
        BasicMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = T{1};
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<T> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const T> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    std::string shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

    template <typename U>
    BasicMatrix<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(),
                       [](T v) { return static_cast<U>(v); });
        return BasicMatrix<U>(rows_, cols_, std::move(out));
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    friend bool operator==(const BasicMatrix& a, const BasicMatrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using MatrixF = BasicMatrix<float>;

/// Reduced SVD `a = u * diag(sigma) * vt` with q = min(rows, cols) triplets.
struct SvdResult {
    Matrix u;                   // m x q, orthonormal columns
    std::vector<double> sigma;  // length q, non-increasing, non-negative
    Matrix vt;                  // q x n, orthonormal rows
    int sweeps = 0;
};

inline constexpr double kSvdTolerance = 1e-12;
inline constexpr int kSvdMaxSweeps = 100;

namespace detail {

inline std::string shape_of(std::size_t r, std::size_t c) { return fmt::format("{}x{}", r, c); }

template <typename T>
void require_same_shape(const char* op, const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", op, a.shape_string(),
                                     b.shape_string()));
    }
}

}  // namespace detail

template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("matmul: shape mismatch {} vs {}", a.shape_string(),
                                     b.shape_string()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    BasicMatrix<T> c(m, n);
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = a(i, p);
            const T* bp = b.row(p).data();
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += aip * bp[j];
            }
        }
    }
    detail::record_flops(2 * m * k * n);
    return c;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
    BasicMatrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

/// out = a * x. `out` must not alias `x`.
template <typename T>
void matvec(const BasicMatrix<T>& a, std::span<const T> x, std::span<T> out) {
    if (a.cols() != x.size() || a.rows() != out.size()) {
        throw ShapeError(fmt::format("matvec: shape mismatch {} vs {}x1 -> {}x1",
                                     a.shape_string(), x.size(), out.size()));
    }
    const std::size_t cols = a.cols();
    const T* p = a.data().data();
    for (std::size_t i = 0; i < a.rows(); ++i, p += cols) {
        T acc{0};
        for (std::size_t j = 0; j < cols; ++j) {
            acc += p[j] * x[j];
        }
        out[i] = acc;
    }
    detail::record_flops(2 * a.rows() * cols);
}

template <typename T>
Vec<T> matvec(const BasicMatrix<T>& a, std::span<const T> x) {
    Vec<T> out(a.rows());
    matvec(a, x, std::span<T>(out));
    return out;
}

/// out = a^T * x. `out` must not alias `x`.
template <typename T>
void matvec_transposed(const BasicMatrix<T>& a, std::span<const T> x, std::span<T> out) {
    if (a.rows() != x.size() || a.cols() != out.size()) {
        throw ShapeError(fmt::format("matvec_transposed: shape mismatch {}^T vs {}x1 -> {}x1",
                                     a.shape_string(), x.size(), out.size()));
    }
    std::fill(out.begin(), out.end(), T{0});
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T xi = x[i];
        const auto ai = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out[j] += ai[j] * xi;
        }
    }
    detail::record_flops(2 * a.rows() * a.cols());
}

template <typename T>
Vec<T> matvec_transposed(const BasicMatrix<T>& a, std::span<const T> x) {
    Vec<T> out(a.cols());
    matvec_transposed(a, x, std::span<T>(out));
    return out;
}

/// a += alpha * u * v^T
template <typename T>
void add_outer(BasicMatrix<T>& a, T alpha, std::span<const T> u, std::span<const T> v) {
    if (a.rows() != u.size() || a.cols() != v.size()) {
        throw ShapeError(fmt::format("add_outer: shape mismatch {} vs {}x{}", a.shape_string(),
                                     u.size(), v.size()));
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const T s = alpha * u[i];
        auto ai = a.row(i);
        for (std::size_t j = 0; j < a.cols(); ++j) {
            ai[j] += s * v[j];
        }
    }
    detail::record_flops(2 * a.rows() * a.cols());
}

/// y += alpha * x
template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
    if (x.size() != y.size()) {
        throw ShapeError(fmt::format("axpy: length mismatch {} vs {}", x.size(), y.size()));
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += alpha * x[i];
    }
    detail::record_flops(2 * x.size());
}

template <typename T>
void axpy(T alpha, const BasicMatrix<T>& x, BasicMatrix<T>& y) {
    detail::require_same_shape("axpy", x, y);
    axpy(alpha, x.data(), y.data());
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) {
        throw ShapeError(fmt::format("dot: length mismatch {} vs {}", a.size(), b.size()));
    }
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    detail::record_flops(2 * a.size());
    return acc;
}

/// Frobenius inner product <a, b>.
template <typename T>
T frobenius_dot(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    detail::require_same_shape("frobenius_dot", a, b);
    return dot(a.data(), b.data());
}

template <typename T>
T frobenius_norm(const BasicMatrix<T>& a) {
    T acc{0};
    for (T v : a.data()) {
        acc += v * v;
    }
    return std::sqrt(acc);
}

template <typename T>
T frobenius_distance(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    detail::require_same_shape("frobenius_distance", a, b);
    T acc{0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

template <typename T>
T max_abs_difference(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    detail::require_same_shape("max_abs_difference", a, b);
    T worst{0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    }
    return worst;
}

template <typename T>
bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

/// Numerically stable softmax (max subtraction). Recorded as `selection` work.
template <typename T>
Vec<T> softmax(std::span<const T> logits) {
    if (logits.empty()) {
        throw ShapeError("softmax: empty logit vector");
    }
    const T shift = *std::max_element(logits.begin(), logits.end());
    Vec<T> out(logits.size());
    T total{0};
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - shift);
        total += out[i];
    }
    for (T& v : out) {
        v /= total;
    }
    detail::record_flops(OpKind::selection, 4 * logits.size() - 1);
    return out;
}

/// sum_i weights[i] * items[i]. Records N*len weighting multiplies and
/// (N-1)*len aggregation adds.
template <typename T>
void weighted_sum(std::span<const T> weights, std::span<const std::span<const T>> items,
                  std::span<T> out) {
    if (weights.size() != items.size() || items.empty()) {
        throw ShapeError(fmt::format("weighted_sum: {} weights for {} items", weights.size(),
                                     items.size()));
    }
    const std::size_t len = out.size();
    for (const auto& item : items) {
        if (item.size() != len) {
            throw ShapeError(fmt::format("weighted_sum: item length {} vs output {}",
                                         item.size(), len));
        }
    }
    for (std::size_t j = 0; j < len; ++j) {
        out[j] = weights[0] * items[0][j];
    }
    for (std::size_t i = 1; i < items.size(); ++i) {
        const T w = weights[i];
        const auto& item = items[i];
        for (std::size_t j = 0; j < len; ++j) {
            out[j] += w * item[j];
        }
    }
    detail::record_flops(OpKind::weighting, items.size() * len);
    detail::record_flops(OpKind::aggregation, (items.size() - 1) * len);
}

/// Elementwise sum `out = a + b`, recorded under the current kind.
template <typename T>
void add_into(std::span<const T> a, std::span<const T> b, std::span<T> out) {
    if (a.size() != b.size() || a.size() != out.size()) {
        throw ShapeError(fmt::format("add_into: length mismatch {}, {}, {}", a.size(), b.size(),
                                     out.size()));
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = a[i] + b[i];
    }
    detail::record_flops(a.size());
}

SvdResult reduced_svd(const Matrix& a);

/// Relative error |a - b|_F / max(|b|_F, tiny).
double relative_frobenius_error(const Matrix& a, const Matrix& reference);

}  // namespace comol
