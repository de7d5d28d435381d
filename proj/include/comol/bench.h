// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Wall-clock microbenchmark of the adapter forwards (adapter_delta, i.e.
// without the frozen W x). Only orderings of medians are meaningful; absolute
// times depend on the machine.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "comol/accounting.h"
#include "comol/errors.h"
#include "comol/method.h"

namespace comol {

struct BenchCase {
    LayerConfig layer;
    std::size_t seq_len = 1;  // L tokens per batch
    /// Time comol_forward_reference instead of the fused forward (core-space
    /// methods only).
    bool reference = false;

    std::string label() const;
};

struct BenchOptions {
    std::size_t reps = 30;
    std::size_t warmup = 5;
    std::uint64_t seed = 0;
    /// Each timed sample repeats the batch until it spans at least this long;
    /// the reported time is per batch.
    double min_sample_ns = 100'000.0;
    bool pin = true;
};

struct BenchResult {
    BenchCase bench;
    std::size_t reps = 0;
    std::size_t warmup = 0;
    std::size_t batches_per_sample = 1;
    double median_ns = 0.0;
    double mean_ns = 0.0;
    double p95_ns = 0.0;
    double min_ns = 0.0;
    FlopCount flops;  // one batch, from the instrumented counter
    bool pinned = false;
    std::optional<std::string> warning;
};

/// Samples are interleaved across cases (one sample of each per round) so
/// slow drift affects every case alike. Results come back sorted stably by
/// method. Throws ParameterError when reps < 30 and NumericalError when a
/// forward produces a non-finite value.
std::vector<BenchResult> run_bench(const std::vector<BenchCase>& cases, const BenchOptions& options);

/// Instrumented FLOPs of one batch; deterministic for a fixed case.
FlopCount bench_flops(const BenchCase& bench, std::uint64_t seed);

/// Smallest observable step of the monotonic clock, in nanoseconds.
double timer_resolution_ns();

/// Aligned table: method, N, k, params and FLOPs relative to LoRA, routing
/// level, median / p95 microseconds and median relative to the LoRA row.
std::string render_text(const std::vector<BenchResult>& results);
nlohmann::json to_json(const std::vector<BenchResult>& results);

}  // namespace comol
