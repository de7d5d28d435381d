// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/bench.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "comol/adapters.h"
#include "comol/verify.h"

#if defined(__linux__)
#include <sched.h>
#endif

namespace comol {

namespace {

using Clock = std::chrono::steady_clock;

// Pins the calling thread to the CPU it is running on and restores the
// previous mask on destruction.
class CpuPin {
public:
    explicit CpuPin(bool enable) {
#if defined(__linux__)
        if (!enable) return;
        if (sched_getaffinity(0, sizeof(previous_), &previous_) != 0) return;
        const int cpu = sched_getcpu();
        if (cpu < 0) return;
        cpu_set_t one;
        CPU_ZERO(&one);
        CPU_SET(cpu, &one);
        pinned_ = sched_setaffinity(0, sizeof(one), &one) == 0;
#else
        (void)enable;
#endif
    }
    ~CpuPin() {
#if defined(__linux__)
        if (pinned_) sched_setaffinity(0, sizeof(previous_), &previous_);
#endif
    }
    CpuPin(const CpuPin&) = delete;
    CpuPin& operator=(const CpuPin&) = delete;
    bool pinned() const { return pinned_; }

private:
    bool pinned_ = false;
#if defined(__linux__)
    cpu_set_t previous_{};
#endif
};

struct Prepared {
    AdapterLayer<double> layer;
    Matrix tokens;
    bool reference = false;
};

Prepared prepare(const BenchCase& b, std::uint64_t seed) {
    if (b.reference && !is_core_space(b.layer.method)) {
        throw ParameterError(fmt::format("bench: reference path requested for {}",
                                         to_string(b.layer.method)));
    }
    if (b.seq_len == 0) throw ParameterError("bench: seq_len must be positive");
    b.layer.validate();
    Prepared p{random_layer(b.layer, seed), Matrix(), b.reference};
    // same token stream for every case with the same (L, n)
    std::mt19937_64 rng(seed ^ 0x5eed5eedull);
    p.tokens = random_matrix(rng, b.seq_len, b.layer.n, 1.0);
    return p;
}

Matrix run_once(const Prepared& p) {
    if (p.reference) {
        const auto& params = std::get<ComolParams<double>>(p.layer.params);
        const Matrix h = comol_forward_reference(p.layer.w, params, p.tokens, p.layer.scale(),
                                                 p.layer.config.method == Method::comol);
        return h;
    }
    return adapter_delta(p.layer, p.tokens);
}

double elapsed_ns(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double, std::nano>(b - a).count();
}

double percentile(std::vector<double> sorted, double q) {
    // nearest rank
    const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
    return sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
}

double median(const std::vector<double>& sorted) {
    const std::size_t n = sorted.size();
    return n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

std::uint64_t lora_adapter_flops(const BenchCase& b) {
    CostConfig c = CostConfig::from_layer(b.layer, b.seq_len);
    c.method = Method::lora;
    return count_flops(c).adapter_total();
}

std::string level_of(Method m) {
    return m == Method::lora ? "-" : m == Method::smear ? "instance" : "token";
}

}  // namespace

std::string BenchCase::label() const {
    return reference ? fmt::format("{}_reference", to_string(layer.method))
                     : std::string(to_string(layer.method));
}

double timer_resolution_ns() {
    double best = 1e300;
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = Clock::now();
        auto b = Clock::now();
        while (b == a) b = Clock::now();
        best = std::min(best, elapsed_ns(a, b));
    }
    return best;
}

FlopCount bench_flops(const BenchCase& bench, std::uint64_t seed) {
    const auto p = prepare(bench, seed);
    OpTally tally;
    {
        ScopedOpTally scope(tally);
        (void)run_once(p);
    }
    return FlopCount::from_tally(tally);
}

std::vector<BenchResult> run_bench(const std::vector<BenchCase>& cases,
                                   const BenchOptions& options) {
    if (options.reps < 30) {
        throw ParameterError(fmt::format("bench: reps must be >= 30, got {}", options.reps));
    }
    std::vector<Prepared> prepared;
    std::vector<BenchResult> results;
    for (const auto& c : cases) {
        prepared.push_back(prepare(c, options.seed));
        const Matrix out = run_once(prepared.back());
        for (double v : out.data()) {
            if (!std::isfinite(v)) {
                throw NumericalError(fmt::format("bench: {} produced a non-finite output", c.label()), v);
            }
        }
        BenchResult r;
        r.bench = c;
        r.reps = options.reps;
        r.warmup = options.warmup;
        r.flops = bench_flops(c, options.seed);
        results.push_back(std::move(r));
    }

    CpuPin pin(options.pin);
    const double resolution = timer_resolution_ns();

    // calibrate the number of batches per sample
    for (std::size_t i = 0; i < cases.size(); ++i) {
        std::size_t batches = 1;
        for (;;) {
            const auto a = Clock::now();
            for (std::size_t b = 0; b < batches; ++b) (void)run_once(prepared[i]);
            const double t = elapsed_ns(a, Clock::now());
            if (t >= options.min_sample_ns || batches >= (std::size_t{1} << 20)) break;
            batches *= 2;
        }
        results[i].batches_per_sample = batches;
    }

    std::vector<std::vector<double>> samples(cases.size());
    for (std::size_t round = 0; round < options.warmup + options.reps; ++round) {
        for (std::size_t i = 0; i < cases.size(); ++i) {
            const std::size_t batches = results[i].batches_per_sample;
            const auto a = Clock::now();
            for (std::size_t b = 0; b < batches; ++b) (void)run_once(prepared[i]);
            const double t = elapsed_ns(a, Clock::now()) / static_cast<double>(batches);
            if (round >= options.warmup) samples[i].push_back(t);
        }
    }

    for (std::size_t i = 0; i < cases.size(); ++i) {
        auto& s = samples[i];
        std::sort(s.begin(), s.end());
        auto& r = results[i];
        r.pinned = pin.pinned();
        r.median_ns = median(s);
        r.p95_ns = percentile(s, 0.95);
        r.min_ns = s.front();
        double sum = 0.0;
        for (double v : s) sum += v;
        r.mean_ns = sum / static_cast<double>(s.size());
        const double sample_median = r.median_ns * static_cast<double>(r.batches_per_sample);
        if (resolution > 0.01 * sample_median) {
            r.warning = fmt::format("timer resolution {:.0f} ns exceeds 1% of the median sample", resolution);
        }
    }

    std::stable_sort(results.begin(), results.end(), [](const BenchResult& a, const BenchResult& b) {
        return static_cast<int>(a.bench.layer.method) < static_cast<int>(b.bench.layer.method);
    });
    return results;
}

std::string render_text(const std::vector<BenchResult>& results) {
    std::map<std::pair<std::size_t, std::size_t>, double> lora_median;  // keyed by (n, L)
    for (const auto& r : results) {
        if (r.bench.layer.method == Method::lora) {
            lora_median[{r.bench.layer.n, r.bench.seq_len}] = r.median_ns;
        }
    }
    std::string out = fmt::format("{:<20} {:>4} {:>4} {:>10} {:>10} {:>9} {:>12} {:>12} {:>8}\n",
                                  "method", "N", "k", "params(x)", "flops(x)", "routing",
                                  "median(us)", "p95(us)", "vs lora");
    for (const auto& r : results) {
        const auto& l = r.bench.layer;
        CostConfig c = CostConfig::from_layer(l, r.bench.seq_len);
        CostConfig lc = c;
        lc.method = Method::lora;
        const double params_x = static_cast<double>(count_params(c).total()) /
                                static_cast<double>(count_params(lc).total());
        const double flops_x = static_cast<double>(r.flops.adapter_total()) /
                               static_cast<double>(lora_adapter_flops(r.bench));
        const auto it = lora_median.find({l.n, r.bench.seq_len});
        const std::string rel =
            it == lora_median.end() ? "-" : fmt::format("{:.2f}", r.median_ns / it->second);
        out += fmt::format("{:<20} {:>4} {:>4} {:>10.3f} {:>10.3f} {:>9} {:>12.1f} {:>12.1f} {:>8}\n",
                           r.bench.label(), l.experts(),
                           l.method == Method::moe_sparse ? fmt::format("{}", l.top_k) : "-",
                           params_x, flops_x, level_of(l.method), r.median_ns / 1e3,
                           r.p95_ns / 1e3, rel);
        if (r.warning) out += fmt::format("  warning: {}\n", *r.warning);
    }
    if (!results.empty() && !results.front().pinned) out += "  note: CPU pinning unavailable\n";
    return out;
}

nlohmann::json to_json(const std::vector<BenchResult>& results) {
    auto arr = nlohmann::json::array();
    for (const auto& r : results) {
        const auto& l = r.bench.layer;
        arr.push_back({{"method", std::string(to_string(l.method))},
                       {"label", r.bench.label()},
                       {"reference", r.bench.reference},
                       {"config",
                        {{"m", l.m},
                         {"n", l.n},
                         {"r", l.r},
                         {"num_experts", l.num_experts},
                         {"top_k", l.top_k},
                         {"seq_len", r.bench.seq_len}}},
                       {"reps", r.reps},
                       {"warmup", r.warmup},
                       {"batches_per_sample", r.batches_per_sample},
                       {"median_ns", r.median_ns},
                       {"mean_ns", r.mean_ns},
                       {"p95_ns", r.p95_ns},
                       {"min_ns", r.min_ns},
                       {"flops",
                        {{"expert", r.flops.expert},
                         {"weighting", r.flops.weighting},
                         {"aggregation", r.flops.aggregation},
                         {"routing", r.flops.routing},
                         {"selection", r.flops.selection},
                         {"other", r.flops.other},
                         {"residual", r.flops.residual},
                         {"base", r.flops.base},
                         {"adapter_total", r.flops.adapter_total()}}},
                       {"pinned", r.pinned},
                       {"warning", r.warning ? nlohmann::json(*r.warning) : nlohmann::json()}});
    }
    return arr;
}

}  // namespace comol
