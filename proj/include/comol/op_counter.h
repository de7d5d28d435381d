// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Thread-local floating-point operation tally. The linalg primitives report
// their own work into whichever tally is installed on the calling thread, under
// the category selected by the innermost ScopedOpKind. With no tally installed
// recording is a single branch.
//
// Convention: one multiply-add is 2 FLOPs, a lone add or multiply is 1 FLOP.

#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace comol {

enum class OpKind : std::uint8_t {
    base,         // frozen projection W x
    residual,     // final W x + delta addition
    expert,       // adapter projections (A x, B u, V_a^T x, M x_hat, U_b y)
    weighting,    // multiplications by routing weights
    aggregation,  // additions that combine expert outputs or parameters
    routing,      // router projection W_g x (and the SMEAR token mean)
    selection,    // softmax and top-k bookkeeping
    other,
};

inline constexpr std::size_t kOpKindCount = 8;

std::string_view to_string(OpKind kind);

struct OpTally {
    std::array<std::uint64_t, kOpKindCount> flops{};

    std::uint64_t operator[](OpKind kind) const {
        return flops[static_cast<std::size_t>(kind)];
    }
    std::uint64_t total() const;
    /// expert + weighting + aggregation + routing: everything the adapter adds
    /// on top of the frozen projection, excluding selection and the residual add.
    std::uint64_t adapter_total() const;
    void clear() { flops.fill(0); }
};

/// Installs `tally` as the calling thread's sink for the lifetime of the guard.
class ScopedOpTally {
public:
    explicit ScopedOpTally(OpTally& tally);
    ~ScopedOpTally();
    ScopedOpTally(const ScopedOpTally&) = delete;
    ScopedOpTally& operator=(const ScopedOpTally&) = delete;

private:
    OpTally* previous_;
};

/// Selects the category subsequent primitives record into.
class ScopedOpKind {
public:
    explicit ScopedOpKind(OpKind kind);
    ~ScopedOpKind();
    ScopedOpKind(const ScopedOpKind&) = delete;
    ScopedOpKind& operator=(const ScopedOpKind&) = delete;

private:
    OpKind previous_;
};

namespace detail {

struct TallyState {
    OpTally* sink = nullptr;
    OpKind kind = OpKind::other;
};

inline thread_local TallyState tally_state;

inline void record_flops(std::uint64_t flops) {
    if (tally_state.sink != nullptr) {
        tally_state.sink->flops[static_cast<std::size_t>(tally_state.kind)] += flops;
    }
}

inline void record_flops(OpKind kind, std::uint64_t flops) {
    if (tally_state.sink != nullptr) {
        tally_state.sink->flops[static_cast<std::size_t>(kind)] += flops;
    }
}

}  // namespace detail

}  // namespace comol
