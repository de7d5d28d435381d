// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Subcommands:
//
//   count | flops | table1   accounting reports from --config or inline flags
//   equiv-check              fused vs unfused core-space forward over a seed range
//   grad-check               finite-difference gradient suite over a seed range
//   svd-convert              LoRA (or mixture) checkpoint -> core-space checkpoint
//   train                    synthetic-task training per run config
//   bench                    latency microbenchmark
//   inspect                  checkpoint manifest and tensor norms
//
// Exit status: 0 success, 1 failed check or invalid input, 2 usage error.

#pragma once

#include <cstddef>
#include <iosfwd>

namespace comol {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// COMOL_LAB_THREADS, default 1. Throws ConfigError on a malformed value.
std::size_t worker_threads();

}  // namespace comol
