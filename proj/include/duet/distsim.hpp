#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "duet/errors.hpp"
#include "duet/losses.hpp"
#include "duet/model.hpp"
#include "duet/synthdata.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// Contiguous slice of the global batch owned by one simulated worker.
struct WorkerShard {
    std::size_t worker_id = 0;
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
};

/// Balanced contiguous partition: the first N mod K shards take one extra
/// sample, so sizes never differ by more than one and the union is the batch.
inline std::vector<WorkerShard> shard_batch(std::size_t n, std::size_t k) {
    if (k < 1) throw TooFewSamplesError("need at least one worker");
    if (n < k)
        throw TooFewSamplesError("batch of " + std::to_string(n) + " cannot feed " +
                                 std::to_string(k) + " workers");
    std::vector<WorkerShard> shards;
    shards.reserve(k);
    std::size_t base = n / k, extra = n % k, at = 0;
    for (std::size_t w = 0; w < k; ++w) {
        std::size_t take = base + (w < extra ? 1 : 0);
        shards.push_back(WorkerShard{w, at, at + take});
        at += take;
    }
    return shards;
}

enum class ReduceMode { Sum, MeanWeightedByCount };

struct ReduceResult {
    Tensor value;
    std::size_t total_count = 0;
};

/// Sequential reduction in worker order 0..K-1; identical result for every
/// worker by construction. Mean mode divides the count-weighted sum by the
/// total contribution count.
inline ReduceResult all_reduce(const std::vector<Tensor>& values, ReduceMode mode,
                               const std::vector<std::size_t>& counts = {}) {
    if (values.empty()) throw ShapeError("all_reduce needs at least one contribution");
    for (std::size_t w = 1; w < values.size(); ++w)
        if (!values[w].same_shape(values[0])) throw ShapeError("worker tensor shapes disagree");
    if (!counts.empty() && counts.size() != values.size())
        throw ShapeError("one count per worker required");
    ReduceResult r;
    if (values.size() == 1) {  // single worker: bit-preserving identity
        r.value = values[0];
        r.total_count = counts.empty() ? 1 : counts[0];
        return r;
    }
    r.value = Tensor(values[0].shape());
    for (std::size_t w = 0; w < values.size(); ++w) {
        std::size_t c = counts.empty() ? 1 : counts[w];
        r.total_count += c;
        double weight = (mode == ReduceMode::MeanWeightedByCount) ? static_cast<double>(c) : 1.0;
        r.value.axpy(weight, values[w]);
    }
    if (mode == ReduceMode::MeanWeightedByCount)
        r.value *= 1.0 / static_cast<double>(r.total_count);
    return r;
}

/// Parameter-map reduction with the same fixed worker order.
inline ParamMap all_reduce_params(const std::vector<ParamMap>& grads, ReduceMode mode,
                                  const std::vector<std::size_t>& counts) {
    if (grads.empty()) throw ShapeError("all_reduce needs at least one contribution");
    ParamMap out;
    for (const auto& [name, first] : grads[0]) {
        std::vector<Tensor> per_worker;
        per_worker.reserve(grads.size());
        for (const auto& g : grads) {
            auto it = g.find(name);
            if (it == g.end()) throw ShapeError("worker gradient missing " + name);
            per_worker.push_back(it->second);
        }
        out[name] = all_reduce(per_worker, mode, counts).value;
    }
    return out;
}

/// K simulated data-parallel workers holding full parameter replicas.
/// Batch-coupled losses run on all-gathered embeddings so the K-worker
/// objective matches the single-worker objective; each worker backpropagates
/// only through its own samples' activations, then gradients are all-reduced
/// as a shard-size-weighted mean.
class Cluster {
public:
    Cluster(const Model& init, std::size_t workers, bool threaded = false)
        : cfg_(init.config()), threaded_(threaded) {
        if (workers < 1) throw TooFewSamplesError("need at least one worker");
        replicas_.assign(workers, init.params());
    }

    std::size_t workers() const { return replicas_.size(); }
    const ModelConfig& config() const { return cfg_; }
    ParamMap& worker_params(std::size_t w) { return replicas_.at(w); }
    const ParamMap& worker_params(std::size_t w) const { return replicas_.at(w); }

    std::uint64_t consistency_hash() const { return param_hash(replicas_[0]); }

    struct StepResult {
        ParamMap gradient;
        MarginState margins;
        double loss_total = 0.0;
        double loss_global = 0.0, loss_fgv = 0.0, loss_fgt = 0.0, loss_cmr = 0.0, loss_tic = 0.0;
        Tensor tau_used;
        std::uint64_t worker_hash = 0;
    };

    StepResult parallel_train_step(const Corpus& corpus, const std::vector<std::size_t>& batch,
                                   int stage, const LossWeights& weights,
                                   const MarginState& margins) {
        std::size_t k = replicas_.size();
        std::size_t n = batch.size();
        auto shards = shard_batch(n, k);

        std::uint64_t entry_hash = param_hash(replicas_[0]);
        for (std::size_t w = 1; w < k; ++w)
            if (param_hash(replicas_[w]) != entry_hash)
                throw DesyncError("worker " + std::to_string(w) +
                                  " parameters diverged at step entry");

        // Margins for this step come from the previous step's cached similarities.
        MarginState margins_now = margins;
        if (stage == 2)
            margins_now = cmr_update_margins(margins.cached_pos, margins.cached_neg, margins);

        // Phase A: each worker forwards its own samples.
        std::vector<SampleActivations> acts(n);
        auto phase_a = [&](std::size_t w) {
            ImageEncoderParams ip = image_params_from(replicas_[w], cfg_);
            TextEncoderParams tp = text_params_from(replicas_[w]);
            for (std::size_t i = shards[w].begin; i < shards[w].end; ++i)
                acts[i] = forward_sample(corpus.at(batch[i]), ip, tp, stage,
                                         cfg_.fgt_negatives);
        };
        run_workers(phase_a, k);

        // All-gather of embeddings in global batch order.
        BatchEmbeddings gathered =
            gather_embeddings(acts, stage, cfg_.fgt_negatives, cfg_.embed_dim);

        // Phase B: every worker evaluates the batch-coupled losses on the
        // gathered embeddings (identical bits), then backpropagates through
        // its own samples only.
        std::vector<StageLosses> losses(k);
        std::vector<ParamMap> local_grads(k);
        std::vector<std::size_t> region_offsets(n, 0);
        {
            std::size_t run = 0;
            for (std::size_t i = 0; i < n; ++i) {
                region_offsets[i] = run;
                run += acts[i].region_caches.size();
            }
        }
        auto phase_b = [&](std::size_t w) {
            const ParamMap& params = replicas_[w];
            SigmoidLossParams lp = loss_params_from(params);
            losses[w] = compute_losses(gathered, stage, weights, lp, margins_now, cfg_.tic_mean);
            ImageEncoderParams ip = image_params_from(params, cfg_);
            TextEncoderParams tp = text_params_from(params);
            ImageEncoderGrads ig = ImageEncoderGrads::zeros_like(ip);
            TextEncoderGrads tg = TextEncoderGrads::zeros_like(tp);
            for (std::size_t i = shards[w].begin; i < shards[w].end; ++i)
                backward_sample(acts[i], ip, tp, losses[w].total, stage, i, region_offsets[i],
                                cfg_.fgt_negatives, ig, tg);
            ParamMap g = zero_grads_like(params);
            // Owned-sample contributions scale by N / n_w so the
            // shard-size-weighted mean reduce reproduces the full-batch sum.
            double scale = static_cast<double>(n) / static_cast<double>(shards[w].size());
            add_image_grads(g, ig, scale);
            add_text_grads(g, tg, scale);
            // Scalar gradients are batch-global; every worker holds the total.
            add_scalar_grads(g, losses[w].total, 1.0);
            local_grads[w] = std::move(g);
        };
        run_workers(phase_b, k);

        std::vector<std::size_t> counts;
        counts.reserve(k);
        for (const auto& s : shards) counts.push_back(s.size());

        StepResult result;
        result.gradient = all_reduce_params(local_grads, ReduceMode::MeanWeightedByCount, counts);
        result.margins = margins_now;
        if (stage == 2) {
            result.margins.cached_pos = losses[0].pos_sims;
            result.margins.cached_neg = losses[0].neg_sims;
        }
        result.loss_total = losses[0].total.value;
        result.loss_global = losses[0].global;
        result.loss_fgv = losses[0].fgv;
        result.loss_fgt = losses[0].fgt;
        result.loss_cmr = losses[0].cmr;
        result.loss_tic = losses[0].tic;
        result.tau_used = margins_now.tau;
        result.worker_hash = entry_hash;
        return result;
    }

private:
    template <typename Fn>
    void run_workers(Fn&& fn, std::size_t k) {
        if (threaded_ && k > 1) {
            std::vector<std::exception_ptr> errors(k);
            std::vector<std::thread> threads;
            threads.reserve(k);
            for (std::size_t w = 0; w < k; ++w)
                threads.emplace_back([&fn, &errors, w] {
                    try {
                        fn(w);
                    } catch (...) {
                        errors[w] = std::current_exception();
                    }
                });
            for (auto& t : threads) t.join();  // barrier before any reduce
            for (const auto& e : errors)
                if (e) std::rethrow_exception(e);
        } else {
            for (std::size_t w = 0; w < k; ++w) fn(w);
        }
    }

    ModelConfig cfg_;
    std::vector<ParamMap> replicas_;
    bool threaded_ = false;
};

}  // namespace duet
