#pragma once

// Adam optimizer, warmup + inverse-sqrt learning-rate schedule, and the
// training loop: teacher forcing with per-epoch task-resampling augmentation,
// periodic validation on untouched triples, and best-validation checkpointing.
// Runs are bit-deterministic given (config, data, seed).

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctxseq/checkpoint.hpp"
#include "ctxseq/model.hpp"

namespace ctxseq {

struct TrainConfig {
    double lr_peak = 1e-4;
    int warmup_steps = 4000;
    double warmup_init_lr = 1e-7;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    int batch_size = 8;
    int max_steps = 1000;
    int validate_every = 200;
    uint64_t seed = 1;
    AugmentationConfig augmentation;
    std::optional<std::string> init_checkpoint;
    double clip_norm = 1.0;  // global gradient norm; <= 0 disables

    // Queried at validation points; return true to stop early. Not part of
    // the serialized configuration.
    std::function<bool(int step, double valid_ppl, const Model& model)> stop_hook;

    void validate() const {
        if (warmup_steps < 1) throw ConfigError("train: warmup_steps must be >= 1");
        if (!(lr_peak > warmup_init_lr && warmup_init_lr > 0.0))
            throw ConfigError("train: need lr_peak > warmup_init_lr > 0");
        if (batch_size < 1 || max_steps < 1 || validate_every < 1)
            throw ConfigError("train: batch_size, max_steps, validate_every must be positive");
        augmentation.validate();
    }
};

// Linear warmup from warmup_init_lr to lr_peak, then inverse-square-root
// decay; continuous at the warmup boundary.
inline double lr_at(int step, const TrainConfig& cfg) {
    if (step < 0) throw ConfigError("lr_at: negative step");
    if (step <= cfg.warmup_steps) {
        double frac = static_cast<double>(step) / cfg.warmup_steps;
        return cfg.warmup_init_lr + frac * (cfg.lr_peak - cfg.warmup_init_lr);
    }
    return cfg.lr_peak * std::sqrt(static_cast<double>(cfg.warmup_steps) / step);
}

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    int64_t step = 0;

    void init_for(const std::vector<std::pair<std::string, Tensor>>& params) {
        m.clear();
        v.clear();
        for (const auto& [name, t] : params) {
            m.emplace_back(static_cast<size_t>(t.size()), 0.0);
            v.emplace_back(static_cast<size_t>(t.size()), 0.0);
        }
    }
};

// One bias-corrected Adam update over the named parameter list. Parameters
// without an accumulated gradient are treated as zero-gradient (unchanged).
inline void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
                      double lr, const TrainConfig& cfg) {
    if (state.m.size() != params.size())
        throw ConfigError("adam_step: state does not match parameter list");
    ++state.step;
    double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, t] = params[pi];
        if (!t.has_grad()) continue;
        const auto& g = t.grad();
        auto& vals = t.values_mut();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            vals[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

// Scales all gradients so the global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
inline double clip_gradients(std::vector<std::pair<std::string, Tensor>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double scale_by = max_norm / norm;
        for (auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            auto* node = t.node().get();
            for (double& g : node->grad) g *= scale_by;
        }
    }
    return norm;
}

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double valid_ppl = std::numeric_limits<double>::quiet_NaN();  // NaN when not validated
};

struct TrainResult {
    std::vector<TrainLogEntry> log;
    double best_valid_ppl = std::numeric_limits<double>::infinity();
    int best_step = 0;
    int steps_run = 0;
    std::string checkpoint_path;
};

struct TrainSink {
    std::string checkpoint_path;          // best-validation checkpoint target
    std::string log_path;                 // optional JSONL training log
    std::string run_config_json;          // embedded into the checkpoint
    uint64_t run_config_hash = 0;
    uint64_t vocab_hash = 0;
};

// Teacher-forced training. Augmentation is resampled per epoch from streams
// derived from (augmentation.seed, epoch, example index); validation always
// sees untouched triples. Saves the best-validation checkpoint to the sink.
inline TrainResult train(Model& model, const std::vector<ExampleTriple>& train_set,
                         const std::vector<ExampleTriple>& valid_set, const TrainConfig& cfg,
                         const TrainSink& sink) {
    cfg.validate();
    if (train_set.empty()) throw DataError("train: empty training set");
    if (valid_set.empty()) throw DataError("train: empty validation set");

    if (cfg.init_checkpoint) {
        CheckpointData data = load_checkpoint(*cfg.init_checkpoint);
        check_warm_start_compatible(data.config, model.config());
        model.load_state(data.params);
    }

    std::ofstream log_out;
    if (!sink.log_path.empty()) {
        log_out.open(sink.log_path, std::ios::trunc);
        if (!log_out) throw DataError("train: cannot open log '" + sink.log_path + "'");
    }

    auto write_log = [&](const TrainLogEntry& e) {
        if (!log_out.is_open()) return;
        log_out << "{\"step\":" << e.step << ",\"loss\":" << e.loss << ",\"lr\":" << e.lr;
        if (std::isfinite(e.valid_ppl)) log_out << ",\"ppl\":" << e.valid_ppl;
        log_out << "}\n";
    };

    auto& params = model.parameters_mut();
    AdamState adam;
    adam.init_for(params);

    TrainResult result;
    std::vector<size_t> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    int step = 0;
    uint64_t epoch = 0;
    size_t cursor = 0;
    Rng shuffle_rng(mix64(cfg.seed, 0x5AFF1EULL, epoch));
    shuffle_rng.shuffle(order);

    auto save_best = [&]() {
        if (sink.checkpoint_path.empty()) return;
        save_checkpoint(sink.checkpoint_path, model, sink.run_config_json, sink.run_config_hash,
                        sink.vocab_hash);
        result.checkpoint_path = sink.checkpoint_path;
    };

    auto validate_now = [&](double train_loss, double lr) -> bool {
        double ppl = eval_ppl(model, valid_set);
        TrainLogEntry e{step, train_loss, lr, ppl};
        result.log.push_back(e);
        write_log(e);
        if (ppl < result.best_valid_ppl) {
            result.best_valid_ppl = ppl;
            result.best_step = step;
            save_best();
        }
        return cfg.stop_hook && cfg.stop_hook(step, ppl, model);
    };

    bool stopped = false;
    while (step < cfg.max_steps && !stopped) {
        // Assemble the next batch, resampling augmentation per epoch.
        std::vector<ExampleTriple> batch;
        batch.reserve(static_cast<size_t>(cfg.batch_size));
        while (static_cast<int>(batch.size()) < cfg.batch_size) {
            if (cursor >= order.size()) {
                cursor = 0;
                ++epoch;
                Rng r(mix64(cfg.seed, 0x5AFF1EULL, epoch));
                r.shuffle(order);
            }
            size_t idx = order[cursor++];
            Rng stream = augment_rng(cfg.augmentation, idx).fork(epoch);
            ExampleTriple ex = augment(train_set[idx], cfg.augmentation, stream);
            // The S->C task is undefined for context-free examples.
            if (ex.target.empty()) ex = train_set[idx];
            batch.push_back(std::move(ex));
        }

        ++step;
        double lr = lr_at(step, cfg);
        model.zero_grads();
        auto [loss, tokens] = model.forward_loss(batch);
        (void)tokens;
        double loss_value = loss.item();
        if (!std::isfinite(loss_value))
            throw NumericError("train: non-finite loss at step " + std::to_string(step));
        backward(loss);
        clip_gradients(params, cfg.clip_norm);
        adam_step(params, adam, lr, cfg);

        if (step % cfg.validate_every == 0 || step == cfg.max_steps) {
            stopped = validate_now(loss_value, lr);
        } else {
            TrainLogEntry e{step, loss_value, lr,
                            std::numeric_limits<double>::quiet_NaN()};
            result.log.push_back(e);
            write_log(e);
        }
    }
    result.steps_run = step;
    return result;
}

}  // namespace ctxseq
