// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#include "comol/synthtrain.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

#include "json_util.h"

namespace comol {

void TaskConfig::validate() const {
    if (m == 0 || n == 0 || seq_len == 0) {
        throw ParameterError(fmt::format("task dims must be positive (m={}, n={}, L={})", m, n,
                                         seq_len));
    }
    if (clusters == 0 || r_true == 0) {
        throw ParameterError(
            fmt::format("task needs C >= 1 and r_true >= 1 (C={}, r_true={})", clusters, r_true));
    }
    if (num_sequences < 2) {
        throw ParameterError("task needs at least two sequences (train and held-out)");
    }
    if (!(mix_rate >= 0.0 && mix_rate <= 1.0)) {
        throw ParameterError(fmt::format("mix_rate {} outside [0, 1]", mix_rate));
    }
    if (mix_rate > 0.0 && (clusters < 2 || seq_len < 2)) {
        throw ParameterError("mixed sequences need C >= 2 and L >= 2");
    }
    if (!(noise >= 0.0) || !std::isfinite(noise)) {
        throw ParameterError(fmt::format("noise must be finite and non-negative, got {}", noise));
    }
}

double SyntheticTask::mix_rate() const {
    const auto mixed = std::count_if(sequences.begin(), sequences.end(),
                                     [](const Sequence& s) { return s.mixed; });
    return static_cast<double>(mixed) / static_cast<double>(sequences.size());
}

std::size_t SyntheticTask::num_train() const {
    const std::size_t held = std::max<std::size_t>(1, sequences.size() / 5);
    return sequences.size() - held;
}

std::size_t SyntheticTask::cluster_of(std::span<const double> x) const {
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t c = 0; c < directions.size(); ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.size(); ++j) s += directions[c][j] * x[j];
        s = std::abs(s);
        if (s > best_score) {  // strict: ties keep the lower index
            best_score = s;
            best = c;
        }
    }
    return best;
}

namespace {

Vec<double> unit(Vec<double> v) {
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) {
        v[0] = 1.0;
        return v;
    }
    for (double& x : v) x /= norm;
    return v;
}

Matrix gaussian(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix out(rows, cols);
    for (double& v : out.data()) v = dist(rng);
    return out;
}

}  // namespace

SyntheticTask make_task(const TaskConfig& cfg) {
    cfg.validate();
    SyntheticTask task;
    task.config = cfg;
    std::mt19937_64 rng(cfg.seed);

    const double w_bound = 1.0 / std::sqrt(static_cast<double>(cfg.n));
    std::uniform_real_distribution<double> w_dist(-w_bound, w_bound);
    task.w_frozen = Matrix(cfg.m, cfg.n);
    for (double& v : task.w_frozen.data()) v = w_dist(rng);

    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t c = 0; c < cfg.clusters; ++c) {
        Vec<double> d(cfg.n);
        for (double& v : d) v = normal(rng);
        task.directions.push_back(unit(std::move(d)));
        // entries of P_c Q_c x have unit variance for unit x
        task.cluster_p.push_back(gaussian(rng, cfg.m, cfg.r_true,
                                          1.0 / std::sqrt(static_cast<double>(cfg.r_true))));
        task.cluster_q.push_back(gaussian(rng, cfg.r_true, cfg.n, 1.0));
        task.cluster_deltas.push_back(matmul(task.cluster_p.back(), task.cluster_q.back()));
    }

    // exactly round(mix_rate * count) sequences are drawn from two clusters
    const auto num_mixed =
        static_cast<std::size_t>(std::llround(cfg.mix_rate * static_cast<double>(cfg.num_sequences)));
    std::vector<bool> plan(cfg.num_sequences, false);
    std::fill(plan.begin(), plan.begin() + static_cast<std::ptrdiff_t>(num_mixed), true);
    std::shuffle(plan.begin(), plan.end(), rng);

    std::uniform_int_distribution<std::size_t> pick(0, cfg.clusters - 1);
    const double token_noise = cfg.noise / std::sqrt(static_cast<double>(cfg.n));
    for (std::size_t s = 0; s < cfg.num_sequences; ++s) {
        std::vector<std::size_t> drawn(cfg.seq_len);
        const std::size_t a = pick(rng);
        if (plan[s]) {
            std::size_t b = pick(rng);
            while (b == a) b = pick(rng);
            std::bernoulli_distribution coin(0.5);
            drawn[0] = a;
            drawn[1] = b;
            for (std::size_t t = 2; t < cfg.seq_len; ++t) drawn[t] = coin(rng) ? a : b;
            std::shuffle(drawn.begin(), drawn.end(), rng);
        } else {
            std::fill(drawn.begin(), drawn.end(), a);
        }

        Sequence seq;
        seq.tokens = Matrix(cfg.seq_len, cfg.n);
        seq.targets = Matrix(cfg.seq_len, cfg.m);
        for (std::size_t t = 0; t < cfg.seq_len; ++t) {
            Vec<double> x = task.directions[drawn[t]];
            for (double& v : x) v += token_noise * normal(rng);
            x = unit(std::move(x));
            std::copy(x.begin(), x.end(), seq.tokens.row(t).begin());
            const std::size_t c = task.cluster_of(x);
            seq.clusters.push_back(c);
            const Vec<double> base = matvec<double>(task.w_frozen, x);
            const Vec<double> delta = matvec<double>(task.cluster_deltas[c], x);
            for (std::size_t i = 0; i < cfg.m; ++i) seq.targets(t, i) = base[i] + delta[i];
        }
        seq.mixed = std::set<std::size_t>(seq.clusters.begin(), seq.clusters.end()).size() > 1;
        task.sequences.push_back(std::move(seq));
    }
    return task;
}

SyntheticTask make_task(std::uint64_t seed, std::size_t m, std::size_t n, std::size_t clusters,
                        std::size_t r_true, std::size_t seq_len, std::size_t num_sequences,
                        double mix_rate) {
    TaskConfig cfg;
    cfg.seed = seed;
    cfg.m = m;
    cfg.n = n;
    cfg.clusters = clusters;
    cfg.r_true = r_true;
    cfg.seq_len = seq_len;
    cfg.num_sequences = num_sequences;
    cfg.mix_rate = mix_rate;
    return make_task(cfg);
}

void TrainConfig::validate() const {
    if (!(adam.lr >= 0.0) || !std::isfinite(adam.lr)) {
        throw ConfigError(fmt::format("learning rate must be finite and >= 0, got {}", adam.lr));
    }
    if (batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    if (eval_every == 0) {
        throw ConfigError("eval_every must be positive");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) {
        throw ConfigError("adam epsilon must be positive");
    }
    if (!(aux_balance >= 0.0) || !std::isfinite(aux_balance)) {
        throw ConfigError("aux_balance must be finite and >= 0");
    }
}

namespace {

void require_dims(const AdapterLayer<double>& layer, const SyntheticTask& task) {
    if (layer.w.rows() != task.config.m || layer.w.cols() != task.config.n) {
        throw ShapeError(fmt::format("layer W {} does not match task {}x{}",
                                     layer.w.shape_string(), task.config.m, task.config.n));
    }
}

double squared_error(const Matrix& out, const Matrix& target) {
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = out.data()[i] - target.data()[i];
        total += d * d;
    }
    return total;
}

}  // namespace

double mean_squared_error(const AdapterLayer<double>& layer, const SyntheticTask& task,
                          std::size_t first, std::size_t last) {
    require_dims(layer, task);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t s = first; s < last; ++s) {
        const auto& seq = task.sequences[s];
        total += squared_error(forward(layer, seq.tokens).outputs, seq.targets);
        count += seq.targets.size();
    }
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

double heldout_loss(const AdapterLayer<double>& layer, const SyntheticTask& task) {
    return mean_squared_error(layer, task, task.num_train(), task.sequences.size());
}

LossCurve train(AdapterLayer<double>& layer, const SyntheticTask& task, const TrainConfig& cfg) {
    cfg.validate();
    require_dims(layer, task);
    validate_layer(layer);

    LossCurve curve;
    curve.initial_heldout_loss = heldout_loss(layer, task);
    curve.evals.push_back({0, curve.initial_heldout_loss});

    const std::size_t n_train = task.num_train();
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(cfg.seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    AdamState adam = make_adam_state(layer.params);
    const std::size_t n_experts = layer.config.experts();
    const bool balance = cfg.aux_balance > 0.0 && has_router(layer.config.method);

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        std::vector<std::size_t> batch;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            if (cursor == n_train) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }

        std::vector<ForwardResult<double>> fwd;
        std::size_t count = 0;
        for (std::size_t s : batch) {
            fwd.push_back(forward(layer, task.sequences[s].tokens));
            count += task.sequences[s].targets.size();
        }

        // load balancing: coef * N * sum_i f_i^2, f = mean routing weight over all events
        Vec<double> mean_weight(n_experts, 0.0);
        std::size_t events = 0;
        if (balance) {
            for (const auto& f : fwd) {
                for (const auto& rw : f.trace.routing) {
                    for (std::size_t i = 0; i < n_experts; ++i) mean_weight[i] += rw.weights[i];
                    ++events;
                }
            }
            for (double& v : mean_weight) v /= static_cast<double>(events);
        }

        AdapterParams<double> grads = zeros_like(layer.params);
        double loss = 0.0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto& seq = task.sequences[batch[b]];
            const Matrix& out = fwd[b].outputs;
            Matrix grad_out(out.rows(), out.cols());
            for (std::size_t i = 0; i < out.size(); ++i) {
                const double d = out.data()[i] - seq.targets.data()[i];
                loss += d * d;
                grad_out.data()[i] = 2.0 * d / static_cast<double>(count);
            }
            BackwardOptions<double> opts;
            std::vector<Vec<double>> extra;
            if (balance) {
                Vec<double> g(n_experts);
                for (std::size_t i = 0; i < n_experts; ++i) {
                    g[i] = cfg.aux_balance * static_cast<double>(n_experts) * 2.0 *
                           mean_weight[i] / static_cast<double>(events);
                }
                extra.assign(fwd[b].trace.routing.size(), g);
                opts.extra_weight_grads = &extra;
            }
            const auto back = layer_backward(layer, seq.tokens, grad_out, fwd[b].trace, opts);
            accumulate(grads, back.grads, 1.0);
        }
        loss /= static_cast<double>(count);
        if (balance) {
            double aux = 0.0;
            for (double v : mean_weight) aux += v * v;
            loss += cfg.aux_balance * static_cast<double>(n_experts) * aux;
        }
        if (!std::isfinite(loss)) {
            throw TrainingError(fmt::format("training loss became {} at step {}", loss, step),
                                step);
        }
        curve.train_loss.push_back(loss);

        if (cfg.optimizer == OptimizerKind::adam) {
            adam_step(layer.params, grads, adam, cfg.adam);
        } else {
            sgd_step(layer.params, grads, cfg.adam.lr);
        }

        if (step % cfg.eval_every == 0 || step == cfg.steps) {
            const double h = heldout_loss(layer, task);
            if (!std::isfinite(h)) {
                throw TrainingError(fmt::format("held-out loss became {} at step {}", h, step),
                                    step);
            }
            curve.evals.push_back({step, h});
        }
    }
    curve.final_heldout_loss = curve.evals.back().heldout_loss;
    curve.routing_histogram = routing_histogram(layer, task);
    return curve;
}

std::vector<Vec<double>> routing_histogram(const AdapterLayer<double>& layer,
                                           const SyntheticTask& task) {
    if (!has_router(layer.config.method)) {
        return {};
    }
    const std::size_t n_experts = layer.config.experts();
    std::vector<Vec<double>> hist(task.config.clusters, Vec<double>(n_experts, 0.0));
    std::vector<std::size_t> counts(task.config.clusters, 0);
    for (std::size_t s = task.num_train(); s < task.sequences.size(); ++s) {
        const auto& seq = task.sequences[s];
        const auto fwd = forward(layer, seq.tokens);
        for (std::size_t t = 0; t < seq.clusters.size(); ++t) {
            const auto& rw = fwd.trace.routing.size() == 1 ? fwd.trace.routing[0]
                                                           : fwd.trace.routing[t];
            const std::size_t c = seq.clusters[t];
            for (std::size_t i = 0; i < n_experts; ++i) hist[c][i] += rw.weights[i];
            ++counts[c];
        }
    }
    for (std::size_t c = 0; c < hist.size(); ++c) {
        if (counts[c] == 0) continue;
        for (double& v : hist[c]) v /= static_cast<double>(counts[c]);
    }
    return hist;
}

std::optional<double> dominant_expert_constancy(const AdapterLayer<double>& layer,
                                                const SyntheticTask& task) {
    if (!has_router(layer.config.method)) {
        return std::nullopt;
    }
    std::size_t pure = 0, constant = 0;
    for (std::size_t s = task.num_train(); s < task.sequences.size(); ++s) {
        const auto& seq = task.sequences[s];
        if (seq.mixed) continue;
        ++pure;
        const auto fwd = forward(layer, seq.tokens);
        std::set<std::size_t> dominant;
        for (const auto& rw : fwd.trace.routing) {
            dominant.insert(static_cast<std::size_t>(
                std::max_element(rw.weights.begin(), rw.weights.end()) - rw.weights.begin()));
        }
        if (dominant.size() == 1) ++constant;
    }
    if (pure == 0) return std::nullopt;
    return static_cast<double>(constant) / static_cast<double>(pure);
}

void write_loss_jsonl(const LossCurve& curve, std::ostream& out) {
    for (std::size_t i = 0; i < curve.train_loss.size(); ++i) {
        out << nlohmann::json{{"step", i + 1}, {"train_loss", curve.train_loss[i]}}.dump()
            << '\n';
    }
    for (const auto& e : curve.evals) {
        out << nlohmann::json{{"step", e.step}, {"heldout_loss", e.heldout_loss}}.dump() << '\n';
    }
}

nlohmann::json to_json(const TaskConfig& c) {
    return {{"m", c.m},
            {"n", c.n},
            {"clusters", c.clusters},
            {"r_true", c.r_true},
            {"seq_len", c.seq_len},
            {"num_sequences", c.num_sequences},
            {"mix_rate", c.mix_rate},
            {"noise", c.noise},
            {"seed", c.seed}};
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"optimizer", std::string(to_string(c.optimizer))},
            {"lr", c.adam.lr},
            {"beta1", c.adam.beta1},
            {"beta2", c.adam.beta2},
            {"eps", c.adam.eps},
            {"steps", c.steps},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"eval_every", c.eval_every},
            {"aux_balance", c.aux_balance}};
}

namespace {

template <typename T>
T field(const nlohmann::json& j, const std::string& key, const char* section) {
    try {
        if constexpr (std::is_unsigned_v<T>) {
            if (!detail::is_count(j)) {
                throw ConfigError(fmt::format("{}.{} must be a non-negative integer", section, key));
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) {
                throw ConfigError(fmt::format("{}.{} must be a number", section, key));
            }
        }
        return j.get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(fmt::format("{}.{}: {}", section, key, e.what()));
    }
}

void require_object(const nlohmann::json& j, const char* section) {
    if (!j.is_object()) {
        throw ConfigError(fmt::format("{} must be an object", section));
    }
}

}  // namespace

TaskConfig task_config_from_json(const nlohmann::json& j, TaskConfig c) {
    require_object(j, "task");
    for (const auto& [key, v] : j.items()) {
        if (key == "m") c.m = field<std::size_t>(v, key, "task");
        else if (key == "n") c.n = field<std::size_t>(v, key, "task");
        else if (key == "clusters") c.clusters = field<std::size_t>(v, key, "task");
        else if (key == "r_true") c.r_true = field<std::size_t>(v, key, "task");
        else if (key == "seq_len") c.seq_len = field<std::size_t>(v, key, "task");
        else if (key == "num_sequences") c.num_sequences = field<std::size_t>(v, key, "task");
        else if (key == "mix_rate") c.mix_rate = field<double>(v, key, "task");
        else if (key == "noise") c.noise = field<double>(v, key, "task");
        else if (key == "seed") c.seed = field<std::uint64_t>(v, key, "task");
        else throw ConfigError(fmt::format("unknown key task.{}", key));
    }
    return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
    require_object(j, "train");
    for (const auto& [key, v] : j.items()) {
        if (key == "optimizer") {
            if (!v.is_string()) throw ConfigError("train.optimizer must be a string");
            c.optimizer = parse_optimizer(v.get<std::string>());
        } else if (key == "lr") c.adam.lr = field<double>(v, key, "train");
        else if (key == "beta1") c.adam.beta1 = field<double>(v, key, "train");
        else if (key == "beta2") c.adam.beta2 = field<double>(v, key, "train");
        else if (key == "eps") c.adam.eps = field<double>(v, key, "train");
        else if (key == "steps") c.steps = field<std::size_t>(v, key, "train");
        else if (key == "batch_size") c.batch_size = field<std::size_t>(v, key, "train");
        else if (key == "seed") c.seed = field<std::uint64_t>(v, key, "train");
        else if (key == "eval_every") c.eval_every = field<std::size_t>(v, key, "train");
        else if (key == "aux_balance") c.aux_balance = field<double>(v, key, "train");
        else throw ConfigError(fmt::format("unknown key train.{}", key));
    }
    return c;
}

}  // namespace comol
