// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/run_config.h"

#include <charconv>
#include <fstream>

#include <fmt/format.h>

#include "comol/persistence.h"
#include "json_util.h"

namespace comol {

namespace {

std::uint64_t parse_u64(std::string_view s, std::string_view whole) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
        throw ConfigError(fmt::format("malformed seed range '{}' (expected a..b)", whole));
    }
    return v;
}

}  // namespace

std::vector<std::uint64_t> parse_seed_range(std::string_view text) {
    const auto dots = text.find("..");
    if (dots == std::string_view::npos) return {parse_u64(text, text)};
    const std::uint64_t a = parse_u64(text.substr(0, dots), text);
    const std::uint64_t b = parse_u64(text.substr(dots + 2), text);
    if (a > b) throw ConfigError(fmt::format("empty seed range '{}'", text));
    if (b - a >= 1'000'000) throw ConfigError(fmt::format("seed range '{}' too long", text));
    std::vector<std::uint64_t> out;
    for (std::uint64_t s = a; s <= b; ++s) out.push_back(s);
    return out;
}

void RunConfig::resolve() {
    if (layer.m == 0) layer.m = task.m;
    if (layer.n == 0) layer.n = task.n;
    layer.validate();
    task.validate();
    train.validate();
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    RunConfig c;
    c.layer.m = 0;
    c.layer.n = 0;
    for (const auto& [key, v] : j.items()) {
        if (key == "layer") c.layer = layer_config_from_json(v, c.layer);
        else if (key == "task") c.task = task_config_from_json(v, c.task);
        else if (key == "train") c.train = train_config_from_json(v, c.train);
        else if (key == "seeds") {
            if (v.is_string()) {
                c.seeds = parse_seed_range(v.get<std::string>());
            } else if (v.is_array()) {
                c.seeds.clear();
                for (const auto& s : v) {
                    if (!detail::is_count(s)) {
                        throw ConfigError("seeds must be non-negative integers");
                    }
                    c.seeds.push_back(s.get<std::uint64_t>());
                }
            } else {
                throw ConfigError("seeds must be an array or an \"a..b\" string");
            }
        } else if (key == "out") {
            if (!v.is_string()) throw ConfigError("out must be a string");
            c.out = v.get<std::string>();
        } else {
            throw ConfigError(fmt::format("unknown key {}", key));
        }
    }
    return c;
}

nlohmann::json to_json(const RunConfig& c) {
    return {{"layer", to_json(c.layer)},
            {"task", to_json(c.task)},
            {"train", to_json(c.train)},
            {"seeds", c.seeds},
            {"out", c.out}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open run config", path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(fmt::format("{} is not valid JSON: {}", path.string(), e.what()));
    }
    return run_config_from_json(j);
}

}  // namespace comol
