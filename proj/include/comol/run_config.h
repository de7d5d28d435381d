// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Archived run description:
//
//   {"layer": {LayerConfig keys}, "task": {TaskConfig keys},
//    "train": {TrainConfig keys}, "seeds": [0, 1] or "0..4", "out": "dir"}
//
// Every section is optional; unknown keys anywhere are rejected. Layer m and
// n default to the task's.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "comol/method.h"
#include "comol/synthtrain.h"

namespace comol {

struct RunConfig {
    LayerConfig layer;  // m = n = 0 until resolved against the task
    TaskConfig task;
    TrainConfig train;
    std::vector<std::uint64_t> seeds;
    std::string out = "comol_out";

    /// Fills layer m / n from the task when unset, then validates every
    /// section. Throws ConfigError or ParameterError.
    void resolve();
};

/// Throws ConfigError on unknown keys, wrong types or malformed seed ranges.
RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
/// Throws IoError when unreadable and ConfigError when not valid JSON.
RunConfig load_run_config(const std::filesystem::path& path);

/// Inclusive "a..b" or a single integer. Throws ConfigError.
std::vector<std::uint64_t> parse_seed_range(std::string_view text);

}  // namespace comol
