#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/checkpoint.hpp"
#include "duet/distsim.hpp"
#include "duet/errors.hpp"
#include "duet/losses.hpp"
#include "duet/model.hpp"
#include "duet/synthdata.hpp"
#include "duet/tensor.hpp"

namespace duet {

struct OptimizerState {
    struct Moments {
        Tensor m, v;
    };
    std::map<std::string, Moments> moments;
    std::size_t step = 0;

    static OptimizerState for_params(const ParamMap& params) {
        OptimizerState s;
        for (const auto& [name, t] : params)
            s.moments[name] = Moments{Tensor(t.shape()), Tensor(t.shape())};
        return s;
    }
};

struct TrainConfig {
    int stage = 1;
    double learning_rate = 1e-6;
    double weight_decay = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-8;
    std::size_t warmup_steps = 300;
    std::size_t batch_size = 32;
    std::size_t workers = 1;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // overrides epochs when nonzero
    std::uint64_t seed = 0;
    bool threaded = false;
    LossWeights weights{};
    ModelConfig model{};

    void validate() const {
        if (stage != 1 && stage != 2) throw Error("stage must be 1 or 2");
        if (!(learning_rate > 0.0) || !(weight_decay >= 0.0) || !(beta1 > 0.0 && beta1 < 1.0) ||
            !(beta2 > 0.0 && beta2 < 1.0) || !(adam_eps > 0.0))
            throw Error("optimizer rates must be positive and betas in (0,1)");
        if (batch_size < 1) throw Error("batch_size must be >= 1");
        if (workers < 1) throw Error("workers must be >= 1");
    }
};

/// Linear warmup from 0 to the configured rate, then constant.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.learning_rate;
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

/// AdamW with decoupled weight decay and bias-corrected moments. A non-finite
/// gradient aborts the step with parameters and state untouched.
inline void adamw_step(ParamMap& params, const ParamMap& grads, OptimizerState& state, double lr,
                       const TrainConfig& cfg) {
    for (const auto& [name, p] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) throw ShapeError("gradient missing for parameter " + name);
        if (!it->second.same_shape(p))
            throw ShapeError("gradient shape mismatch for parameter " + name);
        if (!it->second.all_finite())
            throw NonFiniteGradError("non-finite gradient for parameter " + name);
    }
    std::size_t t = ++state.step;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (auto& [name, p] : params) {
        const Tensor& g = grads.at(name);
        auto& mo = state.moments.at(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * g[i];
            mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            double mhat = mo.m[i] / bc1;
            double vhat = mo.v[i] / bc2;
            p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.adam_eps) + cfg.weight_decay * p[i]);
        }
    }
}

struct StageResult {
    Model model;
    MarginState margins;
    std::string metrics_path;
    std::string checkpoint_dir;
    std::vector<double> loss_trajectory;
};

/// One optimization stage: shard -> parallel step -> per-worker AdamW.
/// Stage 1 trains only the dual-caption global objective; stage 2 activates
/// all five objectives and requires a stage-1 model as input. Batches are
/// contiguous corpus slices cycling in order, so runs are seed/config
/// deterministic.
inline StageResult run_stage(const Corpus& corpus, const TrainConfig& cfg,
                             std::optional<Model> init, const std::string& out_dir) {
    cfg.validate();
    if (corpus.empty()) throw TooFewSamplesError("empty corpus");
    if (cfg.stage == 2 && !init)
        throw MissingCheckpointError("stage 2 requires a stage-1 checkpoint as input");
    Model model = init ? std::move(*init) : Model::init(cfg.model, cfg.seed);

    std::size_t n = corpus.size();
    std::size_t batch = std::min(cfg.batch_size, n);
    std::size_t steps_per_epoch = (n + batch - 1) / batch;
    std::size_t total_steps = cfg.max_steps > 0 ? cfg.max_steps : cfg.epochs * steps_per_epoch;

    Cluster cluster(model, cfg.workers, cfg.threaded);
    std::vector<OptimizerState> opt(cfg.workers, OptimizerState::for_params(model.params()));
    MarginState margins = MarginState::initial(model.config().fgt_negatives);

    std::filesystem::create_directories(out_dir);
    std::string metrics_path = out_dir + "/metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + metrics_path);

    StageResult result;
    for (std::size_t step = 0; step < total_steps; ++step) {
        std::vector<std::size_t> indices(batch);
        std::size_t start = (step * batch) % n;
        for (std::size_t i = 0; i < batch; ++i) indices[i] = (start + i) % n;

        double lr = lr_schedule(step, cfg);
        Cluster::StepResult sr =
            cluster.parallel_train_step(corpus, indices, cfg.stage, cfg.weights, margins);
        margins = sr.margins;
        for (std::size_t w = 0; w < cfg.workers; ++w)
            adamw_step(cluster.worker_params(w), sr.gradient, opt[w], lr, cfg);

        nlohmann::json line;
        line["step"] = step;
        line["lr"] = lr;
        line["loss_total"] = sr.loss_total;
        line["loss_global"] = sr.loss_global;
        line["loss_fgv"] = sr.loss_fgv;
        line["loss_fgt"] = sr.loss_fgt;
        line["loss_cmr"] = sr.loss_cmr;
        line["loss_tic"] = sr.loss_tic;
        line["tau"] = sr.tau_used.values();
        char hex[19];
        std::snprintf(hex, sizeof hex, "%016llx",
                      static_cast<unsigned long long>(sr.worker_hash));
        line["worker_hash"] = hex;
        metrics << line.dump() << '\n';
        result.loss_trajectory.push_back(sr.loss_total);
    }
    metrics.flush();
    if (!metrics) throw IoError("failed while writing " + metrics_path);

    std::uint64_t h0 = param_hash(cluster.worker_params(0));
    for (std::size_t w = 1; w < cfg.workers; ++w)
        if (param_hash(cluster.worker_params(w)) != h0)
            throw DesyncError("worker replicas diverged after training");

    result.model = Model::from_params(model.config(), cluster.worker_params(0));
    result.margins = margins;
    result.metrics_path = metrics_path;
    result.checkpoint_dir = out_dir + "/checkpoint";
    save_checkpoint(result.model, result.checkpoint_dir);
    return result;
}

}  // namespace duet
