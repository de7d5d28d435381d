// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/cli.h"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "CLI11.hpp"

#include "comol/accounting.h"
#include "comol/bench.h"
#include "comol/coreconvert.h"
#include "comol/persistence.h"
#include "comol/run_config.h"
#include "comol/verify.h"

namespace comol {

namespace fs = std::filesystem;

std::size_t worker_threads() {
    const char* raw = std::getenv("COMOL_LAB_THREADS");
    if (raw == nullptr || *raw == '\0') return 1;
    char* end = nullptr;
    const long v = std::strtol(raw, &end, 10);
    if (*end != '\0' || v < 1 || v > 1024) {
        throw ConfigError(fmt::format("COMOL_LAB_THREADS must be an integer in [1, 1024], got '{}'", raw));
    }
    return static_cast<std::size_t>(v);
}

namespace {

// Runs fn over every seed on up to worker_threads() threads; results keep seed
// order and the first exception (in seed order) is rethrown.
template <typename R, typename F>
std::vector<R> map_seeds(const std::vector<std::uint64_t>& seeds, F fn) {
    std::vector<R> results(seeds.size());
    std::vector<std::exception_ptr> errors(seeds.size());
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++) {
            try {
                results[i] = fn(seeds[i]);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::min(worker_threads(), std::max<std::size_t>(1, seeds.size()));
    if (threads <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return results;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory", path.parent_path().string());
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing", path.string());
    out << text;
    if (!out) throw IoError("write failed", path.string());
}

// Flags shared by the accounting, train and bench subcommands. Each mirrors a
// run-config key and overrides it.
struct ConfigFlags {
    std::string config_path;
    std::optional<std::size_t> m, n, r, num_experts, top_k, seq_len;
    std::optional<double> alpha;
    std::optional<std::string> method;

    void add_to(CLI::App* app) {
        app->add_option("--config", config_path, "run config JSON")->check(CLI::ExistingFile);
        app->add_option("--m", m, "output dim (layer.m, task.m)");
        app->add_option("--n", n, "input dim (layer.n, task.n)");
        app->add_option("--r", r, "rank (layer.r)");
        app->add_option("--num-experts", num_experts, "experts N (layer.num_experts)");
        app->add_option("--top-k", top_k, "active experts k (layer.top_k)");
        app->add_option("--seq-len", seq_len, "tokens per sequence L (task.seq_len)");
        app->add_option("--alpha", alpha, "scaling numerator (layer.alpha)");
        app->add_option("--method", method, "lora|moe_soft|moe_sparse|smear|comol|comol_no_cr");
    }

    /// Report subcommands only need the layer and L; `full` also validates the
    /// task and training sections.
    RunConfig resolve(const RunConfig& defaults = {}, bool full = false) const {
        RunConfig c = config_path.empty() ? defaults : load_run_config(config_path);
        if (m) c.layer.m = c.task.m = *m;
        if (n) c.layer.n = c.task.n = *n;
        if (r) c.layer.r = *r;
        if (num_experts) c.layer.num_experts = *num_experts;
        if (top_k) c.layer.top_k = *top_k;
        if (seq_len) c.task.seq_len = *seq_len;
        if (alpha) c.layer.alpha = *alpha;
        if (method) {
            try {
                c.layer.method = parse_method(*method);
            } catch (const ParameterError& e) {
                throw ConfigError(e.what());
            }
        }
        if (full) {
            c.resolve();
        } else {
            if (c.layer.m == 0) c.layer.m = c.task.m;
            if (c.layer.n == 0) c.layer.n = c.task.n;
            c.layer.validate();
            if (c.task.seq_len == 0) throw ConfigError("seq_len must be positive");
        }
        return c;
    }
};

struct ReportFlags {
    bool json = false;
    std::string out_dir;

    void add_to(CLI::App* app) {
        app->add_flag("--json", json, "print JSON instead of text");
        app->add_option("--out", out_dir, "also write report.json into this directory");
    }

    void emit(std::ostream& out, const std::string& text, const nlohmann::json& j) const {
        out << (json ? j.dump(2) + "\n" : text);
        if (!out_dir.empty()) write_text(fs::path(out_dir) / "report.json", j.dump(2) + "\n");
    }
};

std::vector<std::uint64_t> seeds_or(const std::string& text, std::vector<std::uint64_t> fallback) {
    return text.empty() ? fallback : parse_seed_range(text);
}

// count / flops / table1 ----------------------------------------------------

int run_count(const ConfigFlags& flags, const ReportFlags& report, std::ostream& out) {
    const RunConfig rc = flags.resolve();
    const auto c = CostConfig::from_layer(rc.layer, rc.task.seq_len);
    const auto rep = cost_report(c);
    std::string text;
    text += fmt::format("{:<18} {}\n", "method", to_string(c.method));
    text += fmt::format("{:<18} m={} n={} r={} N={} k={}\n", "config", c.m, c.n, c.r,
                        c.num_experts, c.top_k);
    text += fmt::format("{:<18} {}\n", "expert_params", rep.params.expert);
    text += fmt::format("{:<18} {}\n", "shared_params", rep.params.shared);
    text += fmt::format("{:<18} {}\n", "router_params", rep.params.router);
    text += fmt::format("{:<18} {}\n", "trainable_params", rep.params.total());
    text += fmt::format("{:<18} {} ({:.4f})\n", "params_vs_lora", rep.params_vs_lora.str(),
                        rep.params_vs_lora.value());
    report.emit(out, text, to_json(rep));
    return kExitOk;
}

int run_flops(const ConfigFlags& flags, const ReportFlags& report, bool reference,
              std::ostream& out) {
    const RunConfig rc = flags.resolve();
    const auto c = CostConfig::from_layer(rc.layer, rc.task.seq_len);
    auto rep = cost_report(c);
    if (reference) rep.flops = count_flops_reference(c);
    const auto& f = rep.flops;
    std::string text = fmt::format("{:<14} {}{} L={}\n", "method", to_string(c.method),
                                   reference ? " (reference path)" : "", c.seq_len);
    const std::pair<const char*, std::uint64_t> rows[] = {
        {"expert", f.expert},       {"weighting", f.weighting}, {"aggregation", f.aggregation},
        {"routing", f.routing},     {"selection", f.selection}, {"other", f.other},
        {"residual", f.residual},   {"base", f.base},           {"adapter_total", f.adapter_total()}};
    for (const auto& [name, v] : rows) text += fmt::format("{:<14} {}\n", name, v);
    if (!reference) {
        text += fmt::format("{:<14} {} ({:.4f})\n", "flops_vs_lora", rep.flops_vs_lora.str(),
                            rep.flops_vs_lora.value());
    }
    auto j = to_json(rep);
    j["reference"] = reference;
    report.emit(out, text, j);
    return kExitOk;
}

int run_table1(const ConfigFlags& flags, const ReportFlags& report, std::ostream& out) {
    RunConfig defaults;
    defaults.layer.m = defaults.task.m = 4096;
    defaults.layer.n = defaults.task.n = 4096;
    defaults.layer.r = 8;
    defaults.layer.num_experts = 8;
    defaults.layer.top_k = 2;
    defaults.task.seq_len = 1;
    const RunConfig rc = flags.resolve(defaults);
    std::vector<CostConfig> configs;
    for (Method m : {Method::lora, Method::moe_soft, Method::moe_sparse, Method::smear,
                     Method::comol, Method::comol_no_cr}) {
        LayerConfig l = rc.layer;
        l.method = m;
        l.top_k = std::min(l.top_k, l.num_experts);
        configs.push_back(CostConfig::from_layer(l, rc.task.seq_len));
    }
    const auto t = table1_report(configs);
    report.emit(out, render_text(t), to_json(t));
    return kExitOk;
}

// equiv-check / grad-check -------------------------------------------------

struct EquivFlags {
    std::size_t m = 16, n = 16, r = 4, num_experts = 8, seq_len = 16;
    std::string seeds;
    std::string out_dir;
    double tolerance = 1e-10;
};

int run_equiv(const EquivFlags& f, std::ostream& out, std::ostream& err) {
    if (f.m == 0 || f.n == 0 || f.r == 0 || f.num_experts == 0 || f.seq_len == 0) {
        throw ConfigError("equiv-check: dims must be positive");
    }
    const auto seeds = seeds_or(f.seeds, parse_seed_range("0..99"));
    struct Row {
        double core = 0.0, plain = 0.0;
    };
    const auto rows = map_seeds<Row>(seeds, [&](std::uint64_t s) {
        return Row{distributivity_error(f.m, f.n, f.r, f.num_experts, f.seq_len, s, true),
                   distributivity_error(f.m, f.n, f.r, f.num_experts, f.seq_len, s, false)};
    });
    double worst = 0.0;
    std::optional<std::size_t> first_fail;
    auto records = nlohmann::json::array();
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const double e = std::max(rows[i].core, rows[i].plain);
        const bool ok = e < f.tolerance;
        if (!ok && !first_fail) first_fail = i;
        worst = std::max(worst, e);
        records.push_back({{"seed", seeds[i]},
                           {"core_routing_error", rows[i].core},
                           {"input_routing_error", rows[i].plain},
                           {"pass", ok}});
    }
    const bool pass = !first_fail.has_value();
    out << fmt::format("equiv-check m={} n={} r={} N={} L={} seeds={}..{}: max error {:.3e} "
                       "(tolerance {:.0e}) {}\n",
                       f.m, f.n, f.r, f.num_experts, f.seq_len, seeds.front(), seeds.back(),
                       worst, f.tolerance, pass ? "PASS" : "FAIL");
    if (first_fail) {
        const auto i = *first_fail;
        err << fmt::format("first failing seed {}: core routing {:.3e}, input routing {:.3e}\n",
                           seeds[i], rows[i].core, rows[i].plain);
    }
    if (!f.out_dir.empty()) {
        const nlohmann::json j = {{"max_error", worst},
                                  {"tolerance", f.tolerance},
                                  {"pass", pass},
                                  {"seeds", records}};
        write_text(fs::path(f.out_dir) / "equiv_check.json", j.dump(2) + "\n");
    }
    return pass ? kExitOk : kExitFailure;
}

struct GradFlags {
    std::size_t m = 5, n = 4, r = 3, num_experts = 3, top_k = 2, seq_len = 3;
    double alpha = 0.0;
    std::vector<std::string> methods;
    std::string seeds;
    std::string out_dir;
    double tolerance = 1e-5;
};

int run_grad(const GradFlags& f, std::ostream& out, std::ostream& err) {
    std::vector<Method> methods;
    for (const auto& tag : f.methods) {
        try {
            methods.push_back(parse_method(tag));
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
    }
    if (methods.empty()) methods.assign(kAllMethods.begin(), kAllMethods.end());
    const auto seeds = seeds_or(f.seeds, parse_seed_range("0..4"));
    std::vector<LayerConfig> configs;
    for (Method m : methods) {
        LayerConfig c;
        c.method = m;
        c.m = f.m;
        c.n = f.n;
        c.r = f.r;
        c.num_experts = f.num_experts;
        c.top_k = f.top_k;
        c.alpha = f.alpha;
        c.validate();
        configs.push_back(c);
    }
    if (f.seq_len == 0) throw ConfigError("grad-check: seq_len must be positive");
    const auto reports = map_seeds<std::vector<GradCheckReport>>(seeds, [&](std::uint64_t s) {
        std::vector<GradCheckReport> per;
        for (const auto& c : configs) per.push_back(check_gradients(c, f.seq_len, s));
        return per;
    });

    double worst = 0.0;
    bool failed = false;
    auto records = nlohmann::json::array();
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        for (std::size_t k = 0; k < configs.size(); ++k) {
            const auto& rep = reports[i][k];
            const bool ok = rep.max_relative_error < f.tolerance;
            if (!ok && !failed) {
                err << fmt::format("first failing case: {} seed {} entry {} relative error {:.3e}\n",
                                   to_string(configs[k].method), seeds[i], rep.worst_entry,
                                   rep.max_relative_error);
                failed = true;
            }
            worst = std::max(worst, rep.max_relative_error);
            records.push_back({{"method", std::string(to_string(configs[k].method))},
                               {"seed", seeds[i]},
                               {"max_relative_error", rep.max_relative_error},
                               {"worst_entry", rep.worst_entry},
                               {"entries", rep.entries_checked},
                               {"pass", ok}});
        }
    }
    for (std::size_t k = 0; k < configs.size(); ++k) {
        double w = 0.0;
        for (std::size_t i = 0; i < seeds.size(); ++i) w = std::max(w, reports[i][k].max_relative_error);
        out << fmt::format("{:<12} max relative error {:.3e}\n", to_string(configs[k].method), w);
    }
    out << fmt::format("grad-check seeds={}..{}: max relative error {:.3e} (tolerance {:.0e}) {}\n",
                       seeds.front(), seeds.back(), worst, f.tolerance, failed ? "FAIL" : "PASS");
    if (!f.out_dir.empty()) {
        const nlohmann::json j = {{"max_relative_error", worst},
                                  {"tolerance", f.tolerance},
                                  {"pass", !failed},
                                  {"cases", records}};
        write_text(fs::path(f.out_dir) / "grad_check.json", j.dump(2) + "\n");
    }
    return failed ? kExitFailure : kExitOk;
}

// svd-convert / inspect ----------------------------------------------------

int run_convert(const std::string& in, const std::string& out_dir, std::size_t anchor,
                std::uint64_t seed, std::ostream& out) {
    const AnyLayer any = load_checkpoint(in);
    const bool f32 = std::holds_alternative<AdapterLayer<float>>(any);
    const AdapterLayer<double> src = load_checkpoint_f64(in);

    AdapterLayer<double> dst;
    dst.config = src.config;
    dst.config.method = Method::comol;
    dst.w = src.w;
    std::vector<double> errors;
    if (const auto* lora = std::get_if<LoraParams<double>>(&src.params)) {
        const auto d = lora_to_core(lora->b, lora->a);
        const Matrix delta = matmul(lora->b, lora->a);
        errors.push_back(relative_frobenius_error(core_to_delta(d), delta));
        dst.config.num_experts = 1;
        dst.config.top_k = 1;
        ComolParams<double> p{d.u_b, d.v_a_t, {d.core}, {}};
        p.router.w_g = Matrix(1, d.core.rows());
        dst.params = std::move(p);
    } else if (const auto* mix = std::get_if<MixtureParams<double>>(&src.params)) {
        if (anchor >= mix->experts.size()) {
            throw ParameterError(fmt::format("anchor {} out of range for {} experts", anchor,
                                             mix->experts.size()));
        }
        auto conv = experts_to_comol(mix->experts, anchor, true, seed);
        for (std::size_t i = 0; i < mix->experts.size(); ++i) {
            const Matrix delta = matmul(mix->experts[i].b, mix->experts[i].a);
            const double norm = frobenius_norm(delta);
            errors.push_back(norm > 0.0 ? conv.residuals[i] / norm : conv.residuals[i]);
        }
        dst.params = std::move(conv.params);
    } else {
        throw ConfigError(fmt::format("svd-convert: {} checkpoint is already core-space",
                                      to_string(src.config.method)));
    }
    if (f32) save_checkpoint(cast_layer<float>(dst), out_dir);
    else save_checkpoint(dst, out_dir);

    double worst = 0.0;
    for (std::size_t i = 0; i < errors.size(); ++i) {
        out << fmt::format("expert {} relative reconstruction error {:.3e}\n", i, errors[i]);
        worst = std::max(worst, errors[i]);
    }
    out << fmt::format("reconstruction_error {:.3e}\n", worst);
    out << fmt::format("wrote {} ({})\n", out_dir, describe(dst.config));
    return kExitOk;
}

int run_inspect(const std::string& path, std::ostream& out) {
    const auto manifest = read_manifest(path);
    const std::string kind = manifest.value("kind", std::string("?"));
    out << fmt::format("{:<16} {}\n", "format_version", manifest.value("format_version", -1));
    out << fmt::format("{:<16} {}\n", "kind", kind);
    out << fmt::format("{:<16} {}\n", "dtype", manifest.value("dtype", std::string("?")));
    if (kind == "task") {
        const auto task = load_task(path);
        out << fmt::format("{:<16} {}\n", "config", to_json(task.config).dump());
        out << fmt::format("{:<16} {:.6g}\n", "mix_rate", task.mix_rate());
        out << fmt::format("{:<16} {:.6g}\n", "|W|_F", frobenius_norm(task.w_frozen));
        return kExitOk;
    }
    const auto layer = load_checkpoint_f64(path);
    out << fmt::format("{:<16} {}\n", "layer", describe(layer.config));
    out << fmt::format("{:<16} {}\n", "trainable", parameter_count(layer.params));
    out << fmt::format("{:<24} {:>10} {:>14}\n", "tensor", "shape", "frobenius");
    out << fmt::format("{:<24} {:>10} {:>14.6g}\n", "base.w", layer.w.shape_string(),
                       frobenius_norm(layer.w));
    for_each_tensor<double>(layer.params, [&](const std::string& name, const Matrix& t) {
        out << fmt::format("{:<24} {:>10} {:>14.6g}\n", name, t.shape_string(), frobenius_norm(t));
    });
    return kExitOk;
}

// train / bench -------------------------------------------------------------

int run_train(const ConfigFlags& flags, const std::optional<std::size_t>& steps,
              const std::string& seeds_text, const std::string& out_flag, std::ostream& out) {
    RunConfig rc = flags.resolve({}, true);
    if (steps) rc.train.steps = *steps;
    if (!seeds_text.empty()) rc.seeds = parse_seed_range(seeds_text);
    if (!out_flag.empty()) rc.out = out_flag;
    if (rc.seeds.empty()) rc.seeds = {rc.train.seed};
    if (rc.layer.m != rc.task.m || rc.layer.n != rc.task.n) {
        throw ConfigError(fmt::format("layer {}x{} does not match task {}x{}", rc.layer.m,
                                      rc.layer.n, rc.task.m, rc.task.n));
    }
    const fs::path root(rc.out);
    write_text(root / "run_config.json", to_json(rc).dump(2) + "\n");

    struct Outcome {
        double initial = 0.0, final_loss = 0.0;
        std::size_t steps = 0;
    };
    const auto outcomes = map_seeds<Outcome>(rc.seeds, [&](std::uint64_t seed) {
        TaskConfig tc = rc.task;
        tc.seed = seed;
        TrainConfig cfg = rc.train;
        cfg.seed = seed;
        const auto task = make_task(tc);
        auto layer = init_layer<double>(rc.layer, task.w_frozen, seed);
        const auto curve = train(layer, task, cfg);
        const fs::path dir = root / fmt::format("seed_{}", seed);
        std::ostringstream loss;
        write_loss_jsonl(curve, loss);
        write_text(dir / "loss.jsonl", loss.str());
        save_checkpoint(layer, dir / "checkpoint");
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& row : curve.routing_histogram) hist.push_back(row);
        const nlohmann::json summary = {{"seed", seed},
                                        {"method", std::string(to_string(rc.layer.method))},
                                        {"steps", cfg.steps},
                                        {"trainable_params", parameter_count(layer.params)},
                                        {"initial_heldout_loss", curve.initial_heldout_loss},
                                        {"final_heldout_loss", curve.final_heldout_loss},
                                        {"mix_rate", task.mix_rate()},
                                        {"routing_histogram", hist}};
        write_text(dir / "summary.json", summary.dump(2) + "\n");
        return Outcome{curve.initial_heldout_loss, curve.final_heldout_loss, cfg.steps};
    });
    out << fmt::format("train {} ({} params) -> {}\n", describe(rc.layer),
                       count_params(CostConfig::from_layer(rc.layer, rc.task.seq_len)).total(),
                       rc.out);
    for (std::size_t i = 0; i < rc.seeds.size(); ++i) {
        out << fmt::format("seed {:<4} steps {:<6} held-out MSE {:.6e} -> {:.6e}\n", rc.seeds[i],
                           outcomes[i].steps, outcomes[i].initial, outcomes[i].final_loss);
    }
    return kExitOk;
}

int run_bench_cmd(const ConfigFlags& flags, const std::vector<std::string>& method_tags,
                  bool reference, const BenchOptions& options, const std::string& out_dir,
                  std::ostream& out) {
    RunConfig defaults;
    defaults.layer.m = defaults.task.m = 1024;
    defaults.layer.n = defaults.task.n = 1024;
    defaults.layer.r = 8;
    defaults.layer.num_experts = 8;
    defaults.layer.top_k = 2;
    defaults.task.seq_len = 256;
    const RunConfig rc = flags.resolve(defaults);

    std::vector<Method> methods;
    for (const auto& tag : method_tags) {
        try {
            methods.push_back(parse_method(tag));
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
    }
    if (methods.empty()) {
        methods = {Method::lora, Method::moe_soft, Method::moe_sparse, Method::smear, Method::comol};
    }
    std::vector<BenchCase> cases;
    for (Method m : methods) {
        LayerConfig l = rc.layer;
        l.method = m;
        cases.push_back({l, rc.task.seq_len, false});
        if (reference && is_core_space(m)) cases.push_back({l, rc.task.seq_len, true});
    }
    const auto results = run_bench(cases, options);
    out << render_text(results);
    if (!out_dir.empty()) {
        write_text(fs::path(out_dir) / "bench.json", to_json(results).dump(2) + "\n");
    }
    return kExitOk;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"comol-lab: core-space mixture-of-LoRA adapters, baselines and cost accounting",
                 "comol-lab"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "help for every subcommand");

    ConfigFlags count_flags, flops_flags, table_flags, train_flags, bench_flags;
    ReportFlags count_report, flops_report, table_report;

    auto* count = app.add_subcommand("count", "trainable parameter counts");
    count_flags.add_to(count);
    count_report.add_to(count);

    bool flops_reference = false;
    auto* flops = app.add_subcommand("flops", "forward FLOPs by category");
    flops_flags.add_to(flops);
    flops_report.add_to(flops);
    flops->add_flag("--reference", flops_reference, "unfused core-space path (comol only)");

    auto* table = app.add_subcommand("table1", "expert-side params/FLOPs relative to LoRA");
    table_flags.add_to(table);
    table_report.add_to(table);

    EquivFlags equiv_flags;
    auto* equiv = app.add_subcommand("equiv-check", "fused vs unfused core-space forward");
    equiv->add_option("--m", equiv_flags.m);
    equiv->add_option("--n", equiv_flags.n);
    equiv->add_option("--r", equiv_flags.r);
    equiv->add_option("--num-experts", equiv_flags.num_experts);
    equiv->add_option("--seq-len", equiv_flags.seq_len);
    equiv->add_option("--seeds", equiv_flags.seeds, "inclusive a..b (default 0..99)");
    equiv->add_option("--tolerance", equiv_flags.tolerance);
    equiv->add_option("--out", equiv_flags.out_dir);

    GradFlags grad_flags;
    auto* grad = app.add_subcommand("grad-check", "analytic vs finite-difference gradients");
    grad->add_option("--m", grad_flags.m);
    grad->add_option("--n", grad_flags.n);
    grad->add_option("--r", grad_flags.r);
    grad->add_option("--num-experts", grad_flags.num_experts);
    grad->add_option("--top-k", grad_flags.top_k);
    grad->add_option("--seq-len", grad_flags.seq_len);
    grad->add_option("--alpha", grad_flags.alpha);
    grad->add_option("--method", grad_flags.methods, "restrict to these methods (repeatable)");
    grad->add_option("--seeds", grad_flags.seeds, "inclusive a..b (default 0..4)");
    grad->add_option("--tolerance", grad_flags.tolerance);
    grad->add_option("--out", grad_flags.out_dir);

    std::string convert_in, convert_out;
    std::size_t convert_anchor = 0;
    std::uint64_t convert_seed = 0;
    auto* convert = app.add_subcommand("svd-convert", "re-express LoRA experts in core space");
    convert->add_option("--in", convert_in, "LoRA or mixture checkpoint")->required();
    convert->add_option("--out", convert_out, "destination checkpoint directory")->required();
    convert->add_option("--anchor", convert_anchor, "expert whose bases are shared (mixtures)");
    convert->add_option("--seed", convert_seed, "router initialization seed");

    std::optional<std::size_t> train_steps;
    std::string train_seeds, train_out;
    auto* train_cmd = app.add_subcommand("train", "train on the synthetic task");
    train_flags.add_to(train_cmd);
    train_cmd->add_option("--steps", train_steps, "train.steps");
    train_cmd->add_option("--seeds", train_seeds, "inclusive a..b");
    train_cmd->add_option("--out", train_out, "output directory");

    std::vector<std::string> bench_methods;
    bool bench_reference = false;
    BenchOptions bench_options;
    std::string bench_out;
    auto* bench = app.add_subcommand("bench", "adapter forward latency");
    bench_flags.add_to(bench);
    bench->add_option("--methods", bench_methods, "methods to time")->delimiter(',');
    bench->add_flag("--reference", bench_reference, "also time the unfused core-space path");
    bench->add_option("--reps", bench_options.reps, "timed samples (>= 30)");
    bench->add_option("--warmup", bench_options.warmup);
    bench->add_option("--seed", bench_options.seed);
    bench->add_option("--out", bench_out, "write bench.json here");

    std::string inspect_path;
    auto* inspect = app.add_subcommand("inspect", "print a checkpoint's manifest and norms");
    inspect->add_option("path", inspect_path, "checkpoint directory")->required();

    if (argc >= 2 && argv[1][0] != '-' && app.get_subcommand_no_throw(argv[1]) == nullptr) {
        err << "error: unknown subcommand '" << argv[1] << "'\nrun with --help for usage\n";
        return kExitUsage;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\nrun with --help for usage\n";
        return kExitUsage;
    }

    try {
        if (*count) return run_count(count_flags, count_report, out);
        if (*flops) return run_flops(flops_flags, flops_report, flops_reference, out);
        if (*table) return run_table1(table_flags, table_report, out);
        if (*equiv) return run_equiv(equiv_flags, out, err);
        if (*grad) return run_grad(grad_flags, out, err);
        if (*convert) return run_convert(convert_in, convert_out, convert_anchor, convert_seed, out);
        if (*train_cmd) return run_train(train_flags, train_steps, train_seeds, train_out, out);
        if (*bench) {
            return run_bench_cmd(bench_flags, bench_methods, bench_reference, bench_options,
                                 bench_out, out);
        }
        if (*inspect) return run_inspect(inspect_path, out);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    err << "error: no subcommand\n";
    return kExitUsage;
}

}  // namespace comol
