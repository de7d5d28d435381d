// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic token-clustered regression and the training loop.
//
// Tokens are unit vectors drawn around C cluster directions. A token's cluster
// is argmax_c |d_c^T x| (ties to the lowest index) and its target is
// W x + Delta_c x with a rank-r_true Delta_c = P_c Q_c. A sequence is "mixed"
// when its tokens fall in two or more clusters.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "comol/adapters.h"
#include "comol/optimizer.h"

namespace comol {

struct TaskConfig {
    std::size_t m = 32;
    std::size_t n = 32;
    std::size_t clusters = 4;  // C
    std::size_t r_true = 2;
    std::size_t seq_len = 16;  // L
    std::size_t num_sequences = 100;
    double mix_rate = 0.5;
    double noise = 1.0;  // spread of tokens around their cluster direction
    std::uint64_t seed = 0;

    /// Throws ParameterError.
    void validate() const;
};

struct Sequence {
    Matrix tokens;   // L x n, unit rows
    Matrix targets;  // L x m
    std::vector<std::size_t> clusters;  // argmax cluster per token
    bool mixed = false;
};

struct SyntheticTask {
    TaskConfig config;
    Matrix w_frozen;                   // m x n
    std::vector<Matrix> cluster_p;     // C of m x r_true
    std::vector<Matrix> cluster_q;     // C of r_true x n
    std::vector<Matrix> cluster_deltas;  // P_c Q_c
    std::vector<Vec<double>> directions;  // C unit vectors
    std::vector<Sequence> sequences;

    /// Measured fraction of mixed sequences.
    double mix_rate() const;
    /// The last 20% (at least one) of the sequences are held out.
    std::size_t num_train() const;
    std::size_t cluster_of(std::span<const double> x) const;
};

SyntheticTask make_task(const TaskConfig& config);
SyntheticTask make_task(std::uint64_t seed, std::size_t m, std::size_t n, std::size_t clusters,
                        std::size_t r_true, std::size_t seq_len, std::size_t num_sequences,
                        double mix_rate);

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    AdamHyper adam;  // adam.lr is the learning rate for both optimizers
    std::size_t steps = 2000;
    std::size_t batch_size = 8;  // sequences per step
    std::uint64_t seed = 0;
    std::size_t eval_every = 100;
    double aux_balance = 0.0;  // load-balancing coefficient, 0 disables

    /// Throws ConfigError.
    void validate() const;
};

struct EvalPoint {
    std::size_t step = 0;
    double heldout_loss = 0.0;
};

struct LossCurve {
    std::vector<double> train_loss;  // one per step
    std::vector<EvalPoint> evals;    // step 0, every eval_every steps, and the last step
    double initial_heldout_loss = 0.0;
    double final_heldout_loss = 0.0;
    /// routing_histogram[c][i]: mean weight of expert i over held-out tokens of
    /// cluster c. Empty for plain LoRA.
    std::vector<Vec<double>> routing_histogram;
};

/// MSE over every output element of the given sequences.
double mean_squared_error(const AdapterLayer<double>& layer, const SyntheticTask& task,
                          std::size_t first, std::size_t last);
double heldout_loss(const AdapterLayer<double>& layer, const SyntheticTask& task);

/// Trains `layer` in place. Throws ShapeError on mismatched dims and
/// TrainingError when the loss stops being finite.
LossCurve train(AdapterLayer<double>& layer, const SyntheticTask& task, const TrainConfig& cfg);

std::vector<Vec<double>> routing_histogram(const AdapterLayer<double>& layer,
                                           const SyntheticTask& task);

/// Fraction of held-out single-cluster sequences whose per-token argmax expert
/// is the same for every token. nullopt when no such sequence exists.
std::optional<double> dominant_expert_constancy(const AdapterLayer<double>& layer,
                                                const SyntheticTask& task);

/// One JSON object per line: {"step", "train_loss"} per step and
/// {"step", "heldout_loss"} per evaluation.
void write_loss_jsonl(const LossCurve& curve, std::ostream& out);

nlohmann::json to_json(const TaskConfig& config);
nlohmann::json to_json(const TrainConfig& config);
/// Both throw ConfigError on unknown keys or wrong types.
TaskConfig task_config_from_json(const nlohmann::json& j, TaskConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

}  // namespace comol
