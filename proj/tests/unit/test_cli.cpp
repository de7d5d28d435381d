// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "comol/cli.h"
#include "comol/persistence.h"
#include "comol/run_config.h"
#include "comol/verify.h"

using namespace comol;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "comol-lab");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    Run r;
    r.code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path = fs::temp_directory_path() / ("comol_cli_" + tag + "_" + std::to_string(rd()));
        fs::remove_all(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("count reports the closed-form total for a small CoMoL layer") {
    const auto r = run({"count", "--m", "8", "--n", "8", "--r", "2", "--num-experts", "4",
                        "--method", "comol"});
    CHECK(r.code == 0);
    CHECK(r.out.find("trainable_params   56\n") != std::string::npos);
    const auto j = run({"count", "--m", "8", "--n", "8", "--r", "2", "--num-experts", "4",
                        "--method", "comol", "--json"});
    // (m + n) r + N r^2 + N r
    CHECK(nlohmann::json::parse(j.out).at("params").at("total") == (8 + 8) * 2 + 4 * 4 + 4 * 2);
}

TEST_CASE("usage errors exit 2, validation failures exit 1") {
    CHECK(run({}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"count", "--bogus", "1"}).code == 2);
    CHECK(run({"count", "--m", "eight"}).code == 2);
    const auto bad = run({"count", "--method", "dense"});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("dense") != std::string::npos);
    CHECK(run({"count", "--method", "moe_sparse", "--num-experts", "2", "--top-k", "3"}).code == 1);
    CHECK(run({"equiv-check", "--seeds", "5..2"}).code == 1);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("equiv-check over 100 seeds passes and writes per-seed records") {
    TempDir dir("equiv");
    const auto r = run({"equiv-check", "--seeds", "0..99", "--m", "16", "--n", "16", "--r", "4",
                        "--num-experts", "8", "--out", dir.path.string()});
    CHECK(r.code == 0);
    const auto j = read_json(dir.path / "equiv_check.json");
    CHECK(j.at("pass") == true);
    CHECK(j.at("seeds").size() == 100);
    CHECK(j.at("max_error").get<double>() < 1e-10);
}

TEST_CASE("failing checks still write machine-readable output") {
    TempDir dir("fail");
    const auto r = run({"equiv-check", "--seeds", "0..2", "--tolerance", "0", "--m", "9",
                        "--n", "7", "--out", dir.path.string()});
    const auto j = read_json(dir.path / "equiv_check.json");
    // a zero tolerance fails unless every seed is exact to the last bit
    if (j.at("max_error").get<double>() > 0.0) {
        CHECK(r.code == 1);
        CHECK(j.at("pass") == false);
        CHECK(r.err.find("first failing seed") != std::string::npos);
    }
}

TEST_CASE("grad-check passes on the default grid and can be restricted to one method") {
    CHECK(run({"grad-check", "--seeds", "0..1"}).code == 0);
    const auto r = run({"grad-check", "--seeds", "3", "--method", "comol"});
    CHECK(r.code == 0);
    CHECK(r.out.find("comol_no_cr") == std::string::npos);
    CHECK(run({"grad-check", "--method", "dense"}).code == 1);
}

TEST_CASE("COMOL_LAB_THREADS does not change results or their order") {
    TempDir one("t1"), many("t4");
    ::setenv("COMOL_LAB_THREADS", "1", 1);
    CHECK(run({"equiv-check", "--seeds", "0..11", "--out", one.path.string()}).code == 0);
    ::setenv("COMOL_LAB_THREADS", "4", 1);
    CHECK(worker_threads() == 4);
    CHECK(run({"equiv-check", "--seeds", "0..11", "--out", many.path.string()}).code == 0);
    ::setenv("COMOL_LAB_THREADS", "zero", 1);
    CHECK_THROWS_AS(worker_threads(), ConfigError);
    CHECK(run({"equiv-check", "--seeds", "0..1"}).code == 1);
    ::unsetenv("COMOL_LAB_THREADS");
    CHECK(read_json(one.path / "equiv_check.json") == read_json(many.path / "equiv_check.json"));
}

TEST_CASE("train with zero steps writes the initial checkpoint and no training losses") {
    TempDir dir("train0");
    const auto r = run({"train", "--steps", "0", "--method", "comol", "--r", "4",
                        "--num-experts", "4", "--out", dir.path.string()});
    REQUIRE(r.code == 0);
    const auto seed_dir = dir.path / "seed_0";
    const auto layer = load_checkpoint_f64(seed_dir / "checkpoint");
    CHECK(layer.config.method == Method::comol);
    for (const auto& core : std::get<ComolParams<double>>(layer.params).cores) {
        CHECK(frobenius_norm(core) == 0.0);
    }
    std::ifstream loss(seed_dir / "loss.jsonl");
    std::string line;
    std::size_t lines = 0;
    while (std::getline(loss, line)) {
        ++lines;
        CHECK(line.find("train_loss") == std::string::npos);
    }
    CHECK(lines <= 1);
    const auto summary = read_json(seed_dir / "summary.json");
    CHECK(summary.at("steps") == 0);
    CHECK(summary.at("initial_heldout_loss") == summary.at("final_heldout_loss"));
    CHECK(fs::exists(dir.path / "run_config.json"));
}

TEST_CASE("train is deterministic per seed and honours a config file with flag overrides") {
    TempDir cfg_dir("cfg"), a("a"), b("b");
    fs::create_directories(cfg_dir.path);
    const auto cfg = cfg_dir.path / "run.json";
    std::ofstream(cfg) << R"({"layer": {"method": "lora", "r": 2},
                             "task": {"m": 6, "n": 5, "clusters": 2, "seq_len": 4,
                                      "num_sequences": 10, "noise": 0.3},
                             "train": {"steps": 5, "batch_size": 2},
                             "seeds": "1..2"})";
    REQUIRE(run({"train", "--config", cfg.string(), "--out", a.path.string()}).code == 0);
    REQUIRE(run({"train", "--config", cfg.string(), "--out", b.path.string()}).code == 0);
    for (const char* s : {"seed_1", "seed_2"}) {
        std::ifstream la(a.path / s / "loss.jsonl"), lb(b.path / s / "loss.jsonl");
        const std::string ta{std::istreambuf_iterator<char>(la), {}};
        const std::string tb{std::istreambuf_iterator<char>(lb), {}};
        CHECK(ta == tb);
        CHECK(ta.find("train_loss") != std::string::npos);
    }
    // --r on the command line overrides the file
    TempDir c("c");
    REQUIRE(run({"train", "--config", cfg.string(), "--r", "3", "--steps", "1", "--seeds", "4",
                 "--out", c.path.string()}).code == 0);
    CHECK(load_checkpoint_f64(c.path / "seed_4" / "checkpoint").config.r == 3);

    std::ofstream(cfg) << R"({"layer": {"rank": 2}})";
    CHECK(run({"train", "--config", cfg.string(), "--out", c.path.string()}).code == 1);
}

TEST_CASE("svd-convert turns a LoRA checkpoint into an equivalent one-core CoMoL layer") {
    TempDir src("src"), dst("dst");
    LayerConfig c;
    c.method = Method::lora;
    c.m = 9;
    c.n = 7;
    c.r = 3;
    c.alpha = 6.0;
    const auto layer = random_layer(c, 5);
    save_checkpoint(layer, src.path);
    const auto r = run({"svd-convert", "--in", src.path.string(), "--out", dst.path.string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("reconstruction_error") != std::string::npos);
    const auto converted = load_checkpoint_f64(dst.path);
    CHECK(converted.config.method == Method::comol);
    std::mt19937_64 rng(6);
    const Matrix x = random_matrix(rng, 4, 7, 1.0);
    CHECK(max_abs_difference(adapter_delta(layer, x), adapter_delta(converted, x)) < 1e-12);
    CHECK(run({"svd-convert", "--in", dst.path.string(), "--out", src.path.string()}).code == 1);
    CHECK(run({"svd-convert", "--in", src.path.string()}).code == 2);
}

TEST_CASE("inspect lists every tensor; a missing checkpoint is a validation failure") {
    TempDir dir("inspect");
    LayerConfig c;
    c.method = Method::moe_sparse;
    c.m = 4;
    c.n = 3;
    c.r = 2;
    c.num_experts = 3;
    c.top_k = 2;
    save_checkpoint(random_layer(c, 1), dir.path);
    const auto r = run({"inspect", dir.path.string()});
    CHECK(r.code == 0);
    for (const char* name : {"base.w", "experts.0.b", "experts.2.a", "router.w_g"}) {
        CHECK(r.out.find(name) != std::string::npos);
    }
    CHECK(run({"inspect", (dir.path / "nope").string()}).code == 1);
}

TEST_CASE("table1, flops and bench subcommands") {
    const auto t = run({"table1", "--json"});
    REQUIRE(t.code == 0);
    const auto j = nlohmann::json::parse(t.out);
    CHECK(j.at("n") == 4096);
    const auto f = run({"flops", "--m", "16", "--n", "16", "--r", "2", "--num-experts", "4",
                        "--method", "comol", "--reference"});
    CHECK(f.code == 0);
    CHECK(f.out.find("reference path") != std::string::npos);
    CHECK(run({"flops", "--method", "lora", "--reference"}).code == 1);

    TempDir dir("bench");
    const auto b = run({"bench", "--m", "16", "--n", "16", "--r", "2", "--num-experts", "2",
                        "--seq-len", "4", "--methods", "lora,comol", "--out", dir.path.string()});
    CHECK(b.code == 0);
    CHECK(read_json(dir.path / "bench.json").size() == 2);
    CHECK(run({"bench", "--reps", "10"}).code == 1);
}

TEST_CASE("seed ranges and run config schema") {
    CHECK(parse_seed_range("0..3") == std::vector<std::uint64_t>{0, 1, 2, 3});
    CHECK(parse_seed_range("7") == std::vector<std::uint64_t>{7});
    CHECK_THROWS_AS(parse_seed_range("3..1"), ConfigError);
    CHECK_THROWS_AS(parse_seed_range("a..b"), ConfigError);
    CHECK_THROWS_AS(parse_seed_range("1...2"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"layers", {}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"task", {{"clusterz", 3}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"seeds", {1, -2}}}), ConfigError);
    auto rc = run_config_from_json({{"task", {{"m", 10}, {"n", 6}}}, {"seeds", {3, 4}}});
    rc.resolve();
    CHECK(rc.layer.m == 10);
    CHECK(rc.layer.n == 6);
    CHECK(rc.seeds == std::vector<std::uint64_t>{3, 4});
    const auto back = run_config_from_json(to_json(rc));
    CHECK(back.layer == rc.layer);
    CHECK(back.seeds == rc.seeds);
}
