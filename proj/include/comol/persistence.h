// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory layout:
//
//   manifest.json  {"format_version", "kind", "method", "dtype", "config",
//                   "tensors": [{"name", "shape", "dtype", "byte_offset",
//                                "byte_length"}], "blob_length"}
//   weights.bin    little-endian row-major tensors in manifest order, each
//                  starting at a multiple of 64 bytes, zero padding between
//
// Layer checkpoints hold the frozen W as "base.w" followed by the trainable
// tensors in for_each_tensor order. Task checkpoints hold the generator
// outputs so a task reloads bit-identically on any platform.

#pragma once

#include <filesystem>
#include <variant>

#include "json.hpp"

#include "comol/adapters.h"
#include "comol/synthtrain.h"

namespace comol {

inline constexpr int kFormatVersion = 1;
inline constexpr std::size_t kTensorAlignment = 64;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "weights.bin";

using AnyLayer = std::variant<AdapterLayer<float>, AdapterLayer<double>>;

/// Creates `dir` if needed. Throws IoError naming the failing path.
template <typename T>
void save_checkpoint(const AdapterLayer<T>& layer, const std::filesystem::path& dir);

/// Validates the whole manifest against the blob size before reading any
/// tensor. Throws VersionError, IntegrityError or IoError.
AnyLayer load_checkpoint(const std::filesystem::path& dir);

/// load_checkpoint converted to double precision.
AdapterLayer<double> load_checkpoint_f64(const std::filesystem::path& dir);

/// Parsed manifest.json (no blob access, no validation beyond JSON syntax).
nlohmann::json read_manifest(const std::filesystem::path& dir);

nlohmann::json to_json(const LayerConfig& config);
/// Throws ConfigError on unknown keys or wrong types.
LayerConfig layer_config_from_json(const nlohmann::json& j, LayerConfig base = {});

void save_task(const SyntheticTask& task, const std::filesystem::path& dir);
SyntheticTask load_task(const std::filesystem::path& dir);

}  // namespace comol
