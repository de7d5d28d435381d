// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
// budget. Exit status is the number of failed criteria (0 when all pass).

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "comol/accounting.h"
#include "comol/adapters.h"
#include "comol/bench.h"
#include "comol/coreconvert.h"
#include "comol/persistence.h"
#include "comol/synthtrain.h"
#include "comol/verify.h"

using namespace comol;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_s;
    std::function<Outcome()> run;
};

LayerConfig layer(Method method, std::size_t m, std::size_t n, std::size_t r, std::size_t N,
                  std::size_t k = 1) {
    LayerConfig c;
    c.method = method;
    c.m = m;
    c.n = n;
    c.r = r;
    c.num_experts = N;
    c.top_k = k;
    return c;
}

CostConfig cost(Method method, std::uint64_t m, std::uint64_t n, std::uint64_t r,
                std::uint64_t N, std::uint64_t k = 1, std::uint64_t L = 1) {
    return {m, n, r, N, k, L, method};
}

// independent triple loop
Matrix naive_product(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            long double s = 0.0L;
            for (std::size_t p = 0; p < a.cols(); ++p) s += static_cast<long double>(a(i, p)) * b(p, j);
            out(i, j) = static_cast<double>(s);
        }
    return out;
}

double frob(const Matrix& a) {
    long double s = 0.0L;
    for (double v : a.data()) s += static_cast<long double>(v) * v;
    return static_cast<double>(std::sqrt(s));
}

// 1 -------------------------------------------------------------------------

Outcome distributivity() {
    double worst = 0.0;
    std::size_t cases = 0;
    std::uint64_t seed = 0;
    for (std::uint64_t rep = 0; rep < 100; ++rep)
        for (std::size_t m : {4, 16, 64})
            for (std::size_t n : {4, 16, 64})
                for (std::size_t r : {2, 8})
                    for (std::size_t N : {2, 8})
                        for (std::size_t L : {1, 16}) {
                            const bool core = (seed % 2) == 0;
                            const auto method = core ? Method::comol : Method::comol_no_cr;
                            const auto lay = random_layer(layer(method, m, n, r, N), seed);
                            std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
                            const Matrix x = random_matrix(rng, L, n, 1.0);
                            const auto& p = std::get<ComolParams<double>>(lay.params);
                            const auto fused = comol_forward(lay.w, p, x, lay.scale(), core);
                            const auto ref = comol_forward_reference(lay.w, p, x, lay.scale(), core);
                            worst = std::max(worst, max_abs_difference(fused.outputs, ref));
                            ++cases;
                            ++seed;
                        }
    return {worst < 1e-10, fmt::format("max |fused - reference| = {:.2e} over {} cases (100 seeds "
                                       "x 72 configs)", worst, cases)};
}

// 2 -------------------------------------------------------------------------

Outcome gradients() {
    double worst = 0.0;
    std::string where;
    std::uint64_t seed = 1000;
    std::size_t cases = 0;
    for (Method method : kAllMethods)
        for (std::size_t m : {4, 6})
            for (std::size_t n : {4, 7})
                for (std::size_t r : {1, 2, 3})
                    for (std::size_t N : {1, 2, 4})
                        for (std::size_t L : {1, 3}) {
                            if (method == Method::lora && N != 1) continue;
                            auto c = layer(method, m, n, r, N, std::max<std::size_t>(1, N / 2));
                            c.alpha = 2.0 * static_cast<double>(r);
                            const auto rep = check_gradients(c, L, seed++);
                            ++cases;
                            if (rep.max_relative_error > worst) {
                                worst = rep.max_relative_error;
                                where = describe(c) + " " + rep.worst_entry;
                            }
                        }
    // the v_a_t gradient must include the router path
    GradCheckOptions mutated;
    mutated.drop_core_router_path = true;
    double mutation = 1e300;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto rep = check_gradients(layer(Method::comol, 6, 6, 2, 3), 2, s, mutated);
        mutation = std::min(mutation, rep.max_relative_error);
    }
    const bool mutation_caught = mutation > 1e-5;
    return {worst < 1e-5 && mutation_caught,
            fmt::format("max rel err {:.2e} over {} cases (worst {}); router-path mutation min "
                        "rel err {:.2e} ({})",
                        worst, cases, where, mutation, mutation_caught ? "caught" : "MISSED")};
}

// 3 -------------------------------------------------------------------------

Outcome reconstruction() {
    std::mt19937_64 rng(2026);
    std::uniform_int_distribution<std::size_t> dim(1, 24);
    double worst = 0.0;
    std::size_t deficient = 0;
    const std::size_t draws = 200;
    for (std::size_t t = 0; t < draws; ++t) {
        const std::size_t m = dim(rng), n = dim(rng);
        const std::size_t r = std::uniform_int_distribution<std::size_t>(1, std::min(m, n))(rng);
        Matrix b = random_matrix(rng, m, r, 1.0);
        if (t % 3 == 0 && r > 1) {
            // rank(B) = q < r
            const std::size_t q = std::uniform_int_distribution<std::size_t>(1, r - 1)(rng);
            b = naive_product(random_matrix(rng, m, q, 1.0), random_matrix(rng, q, r, 1.0));
            ++deficient;
        }
        const Matrix a = random_matrix(rng, r, n, 1.0);
        const Matrix ba = naive_product(b, a);
        const Matrix back = core_to_delta(lora_to_core(b, a));
        Matrix diff = back;
        for (std::size_t i = 0; i < diff.size(); ++i) diff.data()[i] -= ba.data()[i];
        worst = std::max(worst, frob(diff) / std::max(frob(ba), 1e-300));
    }
    return {worst < 1e-9, fmt::format("max relative Frobenius error {:.2e} over {} draws "
                                      "({} rank-deficient B)", worst, draws, deficient)};
}

// 4 -------------------------------------------------------------------------

Outcome parameter_footprint() {
    const std::uint64_t m = 4096, n = 4096, r = 8;
    const auto comol2 = count_params(cost(Method::comol, m, n, r, 2)).total();
    const auto comol64 = count_params(cost(Method::comol, m, n, r, 64)).total();
    const auto soft2 = count_params(cost(Method::moe_soft, m, n, r, 2)).total();
    const auto soft64 = count_params(cost(Method::moe_soft, m, n, r, 64)).total();
    // closed forms: (m+n)r + N(r^2+r) and N(m+n)r + Nn
    const bool exact = comol2 == (m + n) * r + 2 * (r * r + r) &&
                       comol64 == (m + n) * r + 64 * (r * r + r) &&
                       soft2 == 2 * (m + n) * r + 2 * n && soft64 == 64 * (m + n) * r + 64 * n;
    const bool increment = comol64 - comol2 == (64 - 2) * (r * r + r);
    const double growth = static_cast<double>(comol64 - comol2) / static_cast<double>(comol2);
    const double soft_ratio = static_cast<double>(soft64) / static_cast<double>(soft2);
    const bool pass = exact && increment && growth <= 0.07 && std::abs(soft_ratio - 32.0) < 0.5;
    return {pass, fmt::format("CoMoL {} -> {} (+{} = 62*(r^2+r), +{:.2f}%); soft MoE {} -> {} "
                              "({:.2f}x)",
                              comol2, comol64, comol64 - comol2, 100.0 * growth, soft2, soft64,
                              soft_ratio)};
}

// 5 -------------------------------------------------------------------------

Outcome flops_claims() {
    std::size_t ratio_cases = 0, counter_cases = 0;
    std::string failure;
    for (std::uint64_t m : {8, 64, 4096})
        for (std::uint64_t n : {8, 48, 4096})
            for (std::uint64_t r : {2, 8})
                for (std::uint64_t N : {1, 2, 8, 64})
                    for (std::uint64_t L : {1, 16}) {
                        for (Method method : {Method::comol, Method::comol_no_cr}) {
                            const auto c = cost(method, m, n, r, N, 1, L);
                            const auto out = count_flops_reference(c).expert;
                            const auto core = count_flops(c).expert;
                            if (out != N * core && failure.empty()) {
                                failure = fmt::format("ratio != N at m={} n={} r={} N={}", m, n, r, N);
                            }
                            const auto v = core_space_flops_verbatim(c);
                            if (v.output_level_expert != N * v.core_space_expert && failure.empty()) {
                                failure = fmt::format("verbatim ratio != N at N={}", N);
                            }
                            ++ratio_cases;
                        }
                    }
    // instrumented counter on the real forward
    for (Method method : kAllMethods)
        for (std::size_t m : {5, 16})
            for (std::size_t n : {7, 16})
                for (std::size_t r : {1, 4})
                    for (std::size_t N : {1, 3, 8})
                        for (std::size_t L : {1, 9}) {
                            const auto c = layer(method, m, n, r, N, std::max<std::size_t>(1, N / 2));
                            const auto lay = random_layer(c, counter_cases);
                            std::mt19937_64 rng(counter_cases);
                            const Matrix x = random_matrix(rng, L, n, 1.0);
                            OpTally tally;
                            {
                                ScopedOpTally scope(tally);
                                (void)forward(lay, x);
                            }
                            const auto measured = FlopCount::from_tally(tally);
                            const auto predicted = count_flops(CostConfig::from_layer(c, L));
                            // exact agreement implies the +-L*m tolerance
                            if (!(measured == predicted) && failure.empty()) {
                                failure = fmt::format("counter mismatch for {} L={}", describe(c), L);
                            }
                            ++counter_cases;
                        }
    return {failure.empty(),
            failure.empty() ? fmt::format("output-level/core-space expert FLOPs = N in {} configs; "
                                          "instrumented forward equals count_flops in every "
                                          "category over {} runs",
                                          ratio_cases, counter_cases)
                            : failure};
}

// 6 -------------------------------------------------------------------------

Outcome router_reduction() {
    const std::uint64_t n = 4096, r = 8, N = 8;
    const auto cr = count_params(cost(Method::comol, n, n, r, N)).router;
    const auto full = count_params(cost(Method::comol_no_cr, n, n, r, N)).router;
    const bool pass = cr == N * r && full == N * n && full == 512 * cr;
    return {pass, fmt::format("router params {} (N*r) vs {} (N*n): {}x", cr, full,
                              cr == 0 ? 0 : full / cr)};
}

// 7 -------------------------------------------------------------------------

Outcome table1_pattern() {
    std::vector<CostConfig> configs;
    for (Method m : {Method::lora, Method::moe_soft, Method::moe_sparse, Method::smear, Method::comol}) {
        configs.push_back(cost(m, 4096, 4096, 8, 8, 2, 1));
    }
    const auto t = table1_report(configs);
    struct Want {
        double params, flops;
        bool approx;
    };
    const Want want[] = {{1, 1, false}, {8, 8, false}, {8, 2, false}, {8, 1, false}, {1, 1, true}};
    bool pass = t.rows.size() == 5;
    std::string cells;
    for (std::size_t i = 0; pass && i < 5; ++i) {
        const auto& row = t.rows[i];
        const double p = row.params.value(), f = row.flops.value();
        const bool ok = want[i].approx
                            ? std::abs(p - want[i].params) <= 0.05 * want[i].params &&
                                  std::abs(f - want[i].flops) <= 0.05 * want[i].flops
                            : row.params == Ratio::of(static_cast<std::uint64_t>(want[i].params), 1) &&
                                  row.flops == Ratio::of(static_cast<std::uint64_t>(want[i].flops), 1);
        pass = pass && ok;
        cells += fmt::format("{}{} {:.4g},{:.4g}", i ? " / " : "", to_string(row.method), p, f);
    }
    return {pass, cells};
}

// 8, 9 ----------------------------------------------------------------------

nlohmann::json golden() {
    std::ifstream in(fs::path(COMOL_GOLDEN_DIR) / "train_config.json");
    if (!in) throw IoError("cannot open golden config", COMOL_GOLDEN_DIR);
    return nlohmann::json::parse(in);
}

Outcome adaptation_gap() {
    const auto g = golden();
    const auto& gap = g.at("adaptation_gap");
    TaskConfig tc = task_config_from_json(g.at("task"));
    tc.clusters = gap.at("clusters").get<std::size_t>();
    tc.mix_rate = gap.at("mix_rate").get<double>();
    const TrainConfig cfg0 = train_config_from_json(g.at("train"));

    auto make_layer = [&](Method method, const nlohmann::json& j) {
        return layer(method, tc.m, tc.n, j.at("r").get<std::size_t>(),
                     j.at("num_experts").get<std::size_t>());
    };
    const auto comol_cfg = make_layer(Method::comol, gap.at("comol"));
    const auto smear_cfg = make_layer(Method::smear, gap.at("smear"));
    const auto pc = count_params(CostConfig::from_layer(comol_cfg, tc.seq_len)).total();
    const auto ps = count_params(CostConfig::from_layer(smear_cfg, tc.seq_len)).total();
    const double tol = gap.at("budget_tolerance").get<double>();
    const bool matched = within_budget(ps, pc, tol);

    std::size_t wins = 0;
    std::string losses;
    const auto seeds = gap.at("seeds").get<std::vector<std::uint64_t>>();
    for (auto seed : seeds) {
        tc.seed = seed;
        const auto task = make_task(tc);
        TrainConfig cfg = cfg0;
        cfg.seed = seed;
        auto a = init_layer<double>(comol_cfg, task.w_frozen, seed);
        auto b = init_layer<double>(smear_cfg, task.w_frozen, seed);
        const double la = train(a, task, cfg).final_heldout_loss;
        const double lb = train(b, task, cfg).final_heldout_loss;
        if (la < lb) ++wins;
        losses += fmt::format("{}{:.3f}/{:.3f}", losses.empty() ? "" : " ", la, lb);
    }
    const auto min_wins = gap.at("min_wins").get<std::size_t>();
    return {matched && wins >= min_wins,
            fmt::format("params CoMoL {} vs SMEAR {} (budget {}); CoMoL lower in {}/{} seeds "
                        "(CoMoL/SMEAR MSE: {})",
                        pc, ps, matched ? "matched" : "NOT matched", wins, seeds.size(), losses)};
}

Outcome learnability() {
    const auto g = golden();
    const auto& learn = g.at("learnability");
    TaskConfig tc = task_config_from_json(g.at("task"));
    tc.clusters = learn.at("clusters").get<std::size_t>();
    tc.mix_rate = learn.at("mix_rate").get<double>();
    const TrainConfig cfg0 = train_config_from_json(g.at("train"));
    const double threshold = learn.at("threshold_ratio").get<double>();
    const auto& lj = learn.at("layer");

    bool pass = true;
    std::string detail;
    for (Method method : kAllMethods) {
        double worst = 0.0;
        for (auto seed : learn.at("seeds").get<std::vector<std::uint64_t>>()) {
            tc.seed = seed;
            const auto task = make_task(tc);
            TrainConfig cfg = cfg0;
            cfg.seed = seed;
            auto c = layer(method, tc.m, tc.n, lj.at("r").get<std::size_t>(),
                           lj.at("num_experts").get<std::size_t>(),
                           lj.at("top_k").get<std::size_t>());
            auto lay = init_layer<double>(c, task.w_frozen, seed);
            const auto curve = train(lay, task, cfg);
            worst = std::max(worst, curve.final_heldout_loss / curve.initial_heldout_loss);
        }
        pass = pass && worst < threshold;
        detail += fmt::format("{}{} {:.1e}", detail.empty() ? "" : ", ", to_string(method), worst);
    }
    return {pass, fmt::format("worst final/initial held-out MSE: {} (threshold {:.0e})", detail,
                              threshold)};
}

// 10 ------------------------------------------------------------------------

Outcome latency_ordering() {
    std::vector<BenchCase> cases;
    for (Method m : {Method::lora, Method::moe_sparse, Method::comol}) {
        cases.push_back({layer(m, 1024, 1024, 8, 8, 2), 256, false});
    }
    const auto results = run_bench(cases, BenchOptions{});
    double lora = 0, sparse = 0, comol = 0;
    bool pinned = false;
    for (const auto& r : results) {
        pinned = r.pinned;
        if (r.bench.layer.method == Method::lora) lora = r.median_ns;
        if (r.bench.layer.method == Method::moe_sparse) sparse = r.median_ns;
        if (r.bench.layer.method == Method::comol) comol = r.median_ns;
    }
    const bool pass = comol <= 1.5 * lora && sparse > comol;
    return {pass, fmt::format("median us: lora {:.0f}, comol {:.0f} ({:.2f}x lora), moe_sparse "
                              "{:.0f} ({:.2f}x comol); pinned={}",
                              lora / 1e3, comol / 1e3, comol / lora, sparse / 1e3, sparse / comol,
                              pinned)};
}

// 11 ------------------------------------------------------------------------

template <typename T>
bool same_layer(const AdapterLayer<T>& a, const AdapterLayer<T>& b) {
    if (!(a.config == b.config) || !(a.w == b.w)) return false;
    std::vector<BasicMatrix<T>> ta, tb;
    for_each_tensor<T>(a.params, [&](const std::string&, const BasicMatrix<T>& t) { ta.push_back(t); });
    for_each_tensor<T>(b.params, [&](const std::string&, const BasicMatrix<T>& t) { tb.push_back(t); });
    return ta == tb;
}

Outcome persistence() {
    std::random_device rd;
    const fs::path root = fs::temp_directory_path() / fmt::format("comol_accept_{}", rd());
    std::size_t roundtrips = 0, rejected = 0, tampered = 0;
    bool ok = true;
    for (Method method : kAllMethods) {
        const auto c = layer(method, 9, 7, 3, 4, 2);
        const auto l64 = random_layer(c, 77);
        const auto l32 = cast_layer<float>(l64);
        const fs::path d64 = root / fmt::format("{}_f64", to_string(method));
        const fs::path d32 = root / fmt::format("{}_f32", to_string(method));
        save_checkpoint(l64, d64);
        save_checkpoint(l32, d32);
        const auto b64 = load_checkpoint(d64);
        const auto b32 = load_checkpoint(d32);
        ok = ok && std::holds_alternative<AdapterLayer<double>>(b64) &&
             same_layer(l64, std::get<AdapterLayer<double>>(b64)) &&
             std::holds_alternative<AdapterLayer<float>>(b32) &&
             same_layer(l32, std::get<AdapterLayer<float>>(b32));
        roundtrips += 2;

        // tampered manifests
        const auto original = read_manifest(d64);
        std::vector<nlohmann::json> edits(4, original);
        edits[0]["tensors"][1]["shape"] = {1, 1};
        edits[1]["tensors"][1]["byte_offset"] = 8;
        edits[2]["blob_length"] = original["blob_length"].get<std::size_t>() + 1;
        edits[3]["config"]["r"] = 2;
        for (const auto& e : edits) {
            std::ofstream(d64 / kManifestFile) << e.dump(2);
            ++tampered;
            try {
                (void)load_checkpoint(d64);
            } catch (const IntegrityError&) {
                ++rejected;
            }
        }
    }
    std::error_code ec;
    fs::remove_all(root, ec);
    return {ok && rejected == tampered,
            fmt::format("{} bit-identical roundtrips (6 methods x f32/f64); {}/{} tampered "
                        "manifests rejected",
                        roundtrips, rejected, tampered)};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "distributivity identity", 10, distributivity},
        {2, "gradient exactness", 60, gradients},
        {3, "core-space reconstruction", 10, reconstruction},
        {4, "parameter footprint", 1, parameter_footprint},
        {5, "FLOPs claims", 5, flops_claims},
        {6, "router reduction", 1, router_reduction},
        {7, "expert cost table pattern", 1, table1_pattern},
        {8, "token vs instance adaptation gap", 300, adaptation_gap},
        {9, "learnability", 120, learnability},
        {10, "latency ordering", 60, latency_ordering},
        {11, "persistence", 5, persistence},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, fmt::format("exception: {}", e.what())};
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = secs <= c.budget_s;
        const bool pass = o.pass && in_time;
        if (!pass) ++failed;
        std::cout << fmt::format("{} [{:>2}] {}: {} ({:.2f} s, budget {:.0f} s{})\n",
                                 pass ? "PASS" : "FAIL", c.id, c.name, o.detail, secs, c.budget_s,
                                 in_time ? "" : ", OVER BUDGET")
                  << std::flush;
    }
    std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
    return failed;
}
