#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "duet/encoder.hpp"
#include "duet/errors.hpp"
#include "duet/losses.hpp"
#include "duet/numerics.hpp"
#include "duet/region.hpp"
#include "duet/rng.hpp"
#include "duet/synthdata.hpp"
#include "duet/tensor.hpp"

namespace duet {

struct ModelConfig {
    std::size_t embed_dim = 16;
    std::size_t patch_channels = kPatchChannels;
    std::size_t dense_layers = 1;
    std::size_t vocab_size = 64;
    bool image_positional = false;
    std::size_t fgt_negatives = kHardNegatives;
    double init_scale = 0.25;
    double t_prime_init = 2.302585092994045684;  // ln 10
    double bias_init = -10.0;
    bool tic_mean = false;
};

/// Dual-encoder model over a flat named-parameter store. The dense-output
/// self-attention stack feeds only the regional path; the global image
/// embedding pools the projected patch tokens directly, so the stack's
/// parameters see gradients only from region-level objectives.
class Model {
public:
    Model() = default;

    static Model init(const ModelConfig& cfg, std::uint64_t seed) {
        Model m;
        m.cfg_ = cfg;
        Rng rng(seed);
        double d_scale = cfg.init_scale / std::sqrt(static_cast<double>(cfg.embed_dim));
        double p_scale = cfg.init_scale / std::sqrt(static_cast<double>(cfg.patch_channels));
        auto gaussian = [&rng](Tensor& t, double stddev) {
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_gaussian(0.0, stddev);
        };
        auto& p = m.params_;
        p["img.proj"] = Tensor({cfg.patch_channels, cfg.embed_dim});
        gaussian(p["img.proj"], p_scale);
        for (std::size_t l = 0; l < cfg.dense_layers; ++l) {
            for (const char* w : {"wq", "wk", "wv", "wo"}) {
                std::string name = "img.dense" + std::to_string(l) + "." + w;
                p[name] = Tensor({cfg.embed_dim, cfg.embed_dim});
                gaussian(p[name], d_scale);
            }
        }
        auto init_map = [&](const std::string& prefix) {
            p[prefix + ".query"] = Tensor({cfg.embed_dim});
            gaussian(p[prefix + ".query"], cfg.init_scale);
            for (const char* w : {"wq", "wk", "wv", "wo"}) {
                p[prefix + "." + w] = Tensor({cfg.embed_dim, cfg.embed_dim});
                gaussian(p[prefix + "." + w], d_scale);
            }
        };
        init_map("img.map");
        p["txt.tok"] = Tensor({cfg.vocab_size, cfg.embed_dim});
        gaussian(p["txt.tok"], cfg.init_scale);
        p["txt.pos"] = Tensor({kMaxTextLen, cfg.embed_dim});
        gaussian(p["txt.pos"], cfg.init_scale);
        init_map("txt.map");
        p["loss.t"] = Tensor::scalar(cfg.t_prime_init);
        p["loss.b"] = Tensor::scalar(cfg.bias_init);
        return m;
    }

    static Model from_params(const ModelConfig& cfg, ParamMap params) {
        Model m;
        m.cfg_ = cfg;
        m.params_ = std::move(params);
        return m;
    }

    const ModelConfig& config() const { return cfg_; }
    ParamMap& params() { return params_; }
    const ParamMap& params() const { return params_; }

private:
    ModelConfig cfg_;
    ParamMap params_;
};

// ---- typed views over the flat parameter store ----

inline MapHeadWeights map_head_from(const ParamMap& p, const std::string& prefix) {
    return MapHeadWeights{p.at(prefix + ".query"), p.at(prefix + ".wq"), p.at(prefix + ".wk"),
                          p.at(prefix + ".wv"), p.at(prefix + ".wo")};
}

inline ImageEncoderParams image_params_from(const ParamMap& p, const ModelConfig& cfg) {
    ImageEncoderParams ip;
    ip.patch_proj = p.at("img.proj");
    for (std::size_t l = 0; l < cfg.dense_layers; ++l) {
        std::string base = "img.dense" + std::to_string(l) + ".";
        ip.layers.push_back(AttnWeights{p.at(base + "wq"), p.at(base + "wk"), p.at(base + "wv"),
                                        p.at(base + "wo")});
    }
    ip.map = map_head_from(p, "img.map");
    ip.use_positional = cfg.image_positional;
    return ip;
}

inline TextEncoderParams text_params_from(const ParamMap& p) {
    return TextEncoderParams{p.at("txt.tok"), p.at("txt.pos"), map_head_from(p, "txt.map")};
}

inline SigmoidLossParams loss_params_from(const ParamMap& p) {
    return SigmoidLossParams{p.at("loss.t")[0], p.at("loss.b")[0]};
}

inline ParamMap zero_grads_like(const ParamMap& params) {
    ParamMap g;
    for (const auto& [name, t] : params) g[name] = Tensor(t.shape());
    return g;
}

inline void add_map_head_grads(ParamMap& g, const std::string& prefix, const MapHeadGrads& mg,
                               double scale = 1.0) {
    g.at(prefix + ".query").axpy(scale, mg.query);
    g.at(prefix + ".wq").axpy(scale, mg.wq);
    g.at(prefix + ".wk").axpy(scale, mg.wk);
    g.at(prefix + ".wv").axpy(scale, mg.wv);
    g.at(prefix + ".wo").axpy(scale, mg.wo);
}

inline void add_image_grads(ParamMap& g, const ImageEncoderGrads& ig, double scale = 1.0) {
    g.at("img.proj").axpy(scale, ig.patch_proj);
    for (std::size_t l = 0; l < ig.layers.size(); ++l) {
        std::string base = "img.dense" + std::to_string(l) + ".";
        g.at(base + "wq").axpy(scale, ig.layers[l].wq);
        g.at(base + "wk").axpy(scale, ig.layers[l].wk);
        g.at(base + "wv").axpy(scale, ig.layers[l].wv);
        g.at(base + "wo").axpy(scale, ig.layers[l].wo);
    }
    add_map_head_grads(g, "img.map", ig.map, scale);
}

inline void add_text_grads(ParamMap& g, const TextEncoderGrads& tg, double scale = 1.0) {
    g.at("txt.tok").axpy(scale, tg.token_table);
    g.at("txt.pos").axpy(scale, tg.pos_table);
    add_map_head_grads(g, "txt.map", tg.map, scale);
}

// ---- per-sample forward activations ----

struct NormedVec {
    Tensor prenorm;
    double norm = 0.0;
    Tensor unit;
};

inline NormedVec normed(Tensor v) {
    double n = norm2(v);
    if (!(n > kZeroVectorEps)) throw ZeroVectorError("embedding collapsed to zero");
    NormedVec out;
    out.unit = v;
    out.unit *= 1.0 / n;
    out.norm = n;
    out.prenorm = std::move(v);
    return out;
}

struct SampleActivations {
    DenseCache dense;
    bool has_grid = false;
    FeatureGrid grid;
    MapCache img_map;
    NormedVec img;
    TextCache short_tc, long_tc;
    NormedVec short_e, long_e;
    std::vector<RegionEmbeddingCache> region_caches;
    std::vector<TextCache> phrase_tcs;
    std::vector<NormedVec> phrase_es;
    std::vector<std::vector<TextCache>> neg_tcs;
    std::vector<std::vector<NormedVec>> neg_es;
};

/// Forward one sample. Stage 1 skips the dense grid and region paths.
inline SampleActivations forward_sample(const Sample& s, const ImageEncoderParams& ip,
                                        const TextEncoderParams& tp, int stage,
                                        std::size_t fgt_m) {
    SampleActivations a;
    Tensor tokens = project_patches(s.image, ip, &a.dense);
    std::vector<char> none(tokens.rows(), 0);
    a.img = normed(pool_map(tokens, none, ip.map, &a.img_map));
    a.short_e = normed(encode_text(s.short_caption, tp, &a.short_tc));
    a.long_e = normed(encode_text(s.long_caption, tp, &a.long_tc));
    if (stage == 2) {
        Tensor x = tokens;
        a.dense.layers.resize(ip.layers.size());
        for (std::size_t l = 0; l < ip.layers.size(); ++l)
            x = attention_layer(x, ip.layers[l], &a.dense.layers[l]);
        a.grid.height = a.dense.height;
        a.grid.width = a.dense.width;
        a.grid.features = x.reshaped({a.dense.height, a.dense.width, x.cols()});
        a.has_grid = true;
        for (const auto& region : s.regions) {
            RegionEmbeddingCache rc;
            region_embedding(a.grid, region.box, &rc);
            a.region_caches.push_back(rc);
            TextCache ptc;
            a.phrase_es.push_back(normed(encode_text(region.phrase, tp, &ptc)));
            a.phrase_tcs.push_back(std::move(ptc));
            if (region.hard_negatives.size() != fgt_m)
                throw BadNegativeCountError("region carries " +
                                            std::to_string(region.hard_negatives.size()) +
                                            " negatives, model expects " + std::to_string(fgt_m));
            std::vector<TextCache> ntc(fgt_m);
            std::vector<NormedVec> nes;
            for (std::size_t k = 0; k < fgt_m; ++k)
                nes.push_back(normed(encode_text(region.hard_negatives[k], tp, &ntc[k])));
            a.neg_tcs.push_back(std::move(ntc));
            a.neg_es.push_back(std::move(nes));
        }
    }
    return a;
}

// ---- gathered batch embeddings (global order: sample-major, region-major) ----

struct RegionRef {
    std::size_t sample = 0;  // position within the batch
    std::size_t region = 0;  // region index within the sample
};

struct BatchEmbeddings {
    Tensor img, short_txt, long_txt;  // N x D unit rows
    Tensor regions, phrases;          // R x D unit rows
    Tensor negs;                      // (R*M) x D unit rows
    std::vector<RegionRef> region_refs;
    std::size_t neg_count = 0;
};

inline BatchEmbeddings gather_embeddings(const std::vector<SampleActivations>& acts, int stage,
                                         std::size_t fgt_m, std::size_t embed_dim) {
    std::size_t n = acts.size();
    BatchEmbeddings b;
    b.neg_count = fgt_m;
    b.img = Tensor({n, embed_dim});
    b.short_txt = Tensor({n, embed_dim});
    b.long_txt = Tensor({n, embed_dim});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < embed_dim; ++c) {
            b.img.at(i, c) = acts[i].img.unit[c];
            b.short_txt.at(i, c) = acts[i].short_e.unit[c];
            b.long_txt.at(i, c) = acts[i].long_e.unit[c];
        }
    }
    if (stage == 2) {
        std::size_t r = 0;
        for (const auto& a : acts) r += a.region_caches.size();
        b.regions = Tensor({r, embed_dim});
        b.phrases = Tensor({r, embed_dim});
        b.negs = Tensor({r * fgt_m, embed_dim});
        std::size_t row = 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < acts[i].region_caches.size(); ++j) {
                b.region_refs.push_back(RegionRef{i, j});
                for (std::size_t c = 0; c < embed_dim; ++c) {
                    b.regions.at(row, c) = acts[i].region_caches[j].unit[c];
                    b.phrases.at(row, c) = acts[i].phrase_es[j].unit[c];
                }
                for (std::size_t k = 0; k < fgt_m; ++k)
                    for (std::size_t c = 0; c < embed_dim; ++c)
                        b.negs.at(row * fgt_m + k, c) = acts[i].neg_es[j][k].unit[c];
                ++row;
            }
        }
    }
    return b;
}

// ---- batch-level losses over gathered embeddings ----

struct StageLosses {
    GradPair total;  // keys: img_embs, short_txt_embs, long_txt_embs, region_embs,
                     //       phrase_embs, neg_embs, t_prime, bias
    double global = 0.0, fgv = 0.0, fgt = 0.0, cmr = 0.0, tic = 0.0;
    Tensor pos_sims;  // current-step S(I,T) per pair, feeds the next margin cache
    Tensor neg_sims;  // current-step S(I,T_k), pairs x slots
};

/// FGT over all batch regions: mean of the per-region 1-vs-M losses.
inline GradPair fgt_batch_loss(const BatchEmbeddings& b, const SigmoidLossParams& p) {
    std::size_t r = b.regions.rows(), d = b.regions.cols(), m = b.neg_count;
    double inv = 1.0 / static_cast<double>(r);
    GradPair out;
    Tensor dregions({r, d}), dphrases({r, d}), dnegs({r * m, d});
    double dt = 0.0, db = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        Tensor negs({m, d});
        for (std::size_t k = 0; k < m; ++k)
            for (std::size_t c = 0; c < d; ++c) negs.at(k, c) = b.negs.at(i * m + k, c);
        GradPair one = fgt_hard_negative_loss(b.regions.row_copy(i), b.phrases.row_copy(i), negs,
                                              p, m);
        out.value += one.value * inv;
        const Tensor& dr = one.grads.at("region_emb");
        const Tensor& dp = one.grads.at("pos_emb");
        const Tensor& dn = one.grads.at("neg_embs");
        for (std::size_t c = 0; c < d; ++c) {
            dregions.at(i, c) = inv * dr[c];
            dphrases.at(i, c) = inv * dp[c];
        }
        for (std::size_t k = 0; k < m; ++k)
            for (std::size_t c = 0; c < d; ++c) dnegs.at(i * m + k, c) = inv * dn.at(k, c);
        dt += inv * one.grads.at("t_prime")[0];
        db += inv * one.grads.at("bias")[0];
    }
    out.grads["region_embs"] = std::move(dregions);
    out.grads["phrase_embs"] = std::move(dphrases);
    out.grads["neg_embs"] = std::move(dnegs);
    out.grads["t_prime"] = Tensor::scalar(dt);
    out.grads["bias"] = Tensor::scalar(db);
    return out;
}

/// Region/phrase/negative cosine similarities in global pair order.
inline void pair_similarities(const BatchEmbeddings& b, Tensor& pos, Tensor& neg) {
    std::size_t r = b.regions.rows(), d = b.regions.cols(), m = b.neg_count;
    pos = Tensor({r});
    neg = Tensor({r, m});
    for (std::size_t i = 0; i < r; ++i) {
        pos[i] = dot(b.regions.data() + i * d, b.phrases.data() + i * d, d);
        for (std::size_t k = 0; k < m; ++k)
            neg.at(i, k) = dot(b.regions.data() + i * d, b.negs.data() + (i * m + k) * d, d);
    }
}

/// CMR expressed at the embedding level: chains the hinge's similarity
/// gradients through the cosine products.
inline GradPair cmr_embedding_loss(const BatchEmbeddings& b, const Tensor& pos_sims,
                                   const Tensor& neg_sims, const MarginState& margins) {
    GradPair sims = cmr_loss(pos_sims, neg_sims, margins);
    std::size_t r = b.regions.rows(), d = b.regions.cols(), m = b.neg_count;
    const Tensor& dpos = sims.grads.at("pos_sims");
    const Tensor& dneg = sims.grads.at("neg_sims");
    GradPair out;
    out.value = sims.value;
    Tensor dregions({r, d}), dphrases({r, d}), dnegs({r * m, d});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            dregions.at(i, c) += dpos[i] * b.phrases.at(i, c);
            dphrases.at(i, c) += dpos[i] * b.regions.at(i, c);
        }
        for (std::size_t k = 0; k < m; ++k) {
            double g = dneg.at(i, k);
            if (g == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c) {
                dregions.at(i, c) += g * b.negs.at(i * m + k, c);
                dnegs.at(i * m + k, c) += g * b.regions.at(i, c);
            }
        }
    }
    out.grads["region_embs"] = std::move(dregions);
    out.grads["phrase_embs"] = std::move(dphrases);
    out.grads["neg_embs"] = std::move(dnegs);
    return out;
}

/// All active objectives over gathered embeddings. `margins` must already hold
/// the current step's synchronized tau.
inline StageLosses compute_losses(const BatchEmbeddings& b, int stage, const LossWeights& w,
                                  const SigmoidLossParams& p, const MarginState& margins,
                                  bool tic_mean) {
    StageLosses out;
    LossComponents comps;
    comps.global = dual_caption_global_loss(b.img, b.short_txt, b.long_txt, p);
    out.global = comps.global->value;
    if (stage == 2) {
        comps.fgv = fgv_regional_loss(b.regions, b.phrases, p);
        out.fgv = comps.fgv->value;
        comps.fgt = fgt_batch_loss(b, p);
        out.fgt = comps.fgt->value;
        pair_similarities(b, out.pos_sims, out.neg_sims);
        comps.cmr = cmr_embedding_loss(b, out.pos_sims, out.neg_sims, margins);
        out.cmr = comps.cmr->value;
        GradPair tic = tic_loss(b.phrases, tic_select_negatives(b.phrases), tic_mean);
        out.tic = tic.value;
        GradPair tic_renamed;
        tic_renamed.value = tic.value;
        tic_renamed.grads["phrase_embs"] = std::move(tic.grads.at("text_embs"));
        comps.tic = std::move(tic_renamed);
    }
    out.total = total_loss(stage, comps, w);
    return out;
}

// ---- backward: embedding gradients into parameter gradients ----

/// Backpropagates one sample's share of d(total)/d(embeddings) into parameter
/// space. Row gradients are taken from the gathered-batch tensors; region rows
/// for this sample start at region_row_offset.
inline void backward_sample(const SampleActivations& a, const ImageEncoderParams& ip,
                            const TextEncoderParams& tp, const GradPair& total, int stage,
                            std::size_t sample_row, std::size_t region_row_offset,
                            std::size_t fgt_m, ImageEncoderGrads& ig, TextEncoderGrads& tg) {
    std::size_t d = a.img.unit.size();
    auto row_grad = [&](const char* key, std::size_t row) {
        Tensor g({d});
        auto it = total.grads.find(key);
        if (it != total.grads.end())
            for (std::size_t c = 0; c < d; ++c) g[c] = it->second.at(row, c);
        return g;
    };

    Tensor dtokens(a.dense.tokens.shape());

    // global image path
    Tensor dimg_unit = row_grad("img_embs", sample_row);
    Tensor dimg_pre = l2_normalize_backward(a.img.unit, a.img.norm, dimg_unit);
    pool_map_backward(a.img_map, ip.map, dimg_pre, ig.map, dtokens);

    // caption paths
    Tensor dshort = l2_normalize_backward(a.short_e.unit, a.short_e.norm,
                                          row_grad("short_txt_embs", sample_row));
    encode_text_backward(a.short_tc, tp, dshort, tg);
    Tensor dlong = l2_normalize_backward(a.long_e.unit, a.long_e.norm,
                                         row_grad("long_txt_embs", sample_row));
    encode_text_backward(a.long_tc, tp, dlong, tg);

    if (stage == 2 && a.has_grid) {
        Tensor dgrid({a.grid.height, a.grid.width, d});
        for (std::size_t j = 0; j < a.region_caches.size(); ++j) {
            std::size_t row = region_row_offset + j;
            Tensor dregion_unit = row_grad("region_embs", row);
            region_embedding_backward(a.region_caches[j], dregion_unit, dgrid);

            Tensor dphrase = l2_normalize_backward(a.phrase_es[j].unit, a.phrase_es[j].norm,
                                                   row_grad("phrase_embs", row));
            encode_text_backward(a.phrase_tcs[j], tp, dphrase, tg);

            auto negs_it = total.grads.find("neg_embs");
            for (std::size_t k = 0; k < fgt_m; ++k) {
                Tensor dneg({d});
                if (negs_it != total.grads.end())
                    for (std::size_t c = 0; c < d; ++c)
                        dneg[c] = negs_it->second.at((row * fgt_m + k), c);
                Tensor dneg_pre = l2_normalize_backward(a.neg_es[j][k].unit, a.neg_es[j][k].norm,
                                                        dneg);
                encode_text_backward(a.neg_tcs[j][k], tp, dneg_pre, tg);
            }
        }
        dense_stack_backward(a.dense, ip, dgrid, ig, dtokens);
    }
    projection_backward(a.dense, dtokens, ig);
}

/// Loss-scalar gradients from the merged total into the flat gradient map.
inline void add_scalar_grads(ParamMap& g, const GradPair& total, double scale = 1.0) {
    auto t = total.grads.find("t_prime");
    if (t != total.grads.end()) g.at("loss.t")[0] += scale * t->second[0];
    auto b = total.grads.find("bias");
    if (b != total.grads.end()) g.at("loss.b")[0] += scale * b->second[0];
}

// ---- single-process batch evaluation (the K=1 reference path) ----

struct BatchGradResult {
    ParamMap grads;
    StageLosses losses;
};

/// Full-batch analytic gradient of the weighted total loss with respect to
/// every model parameter. `margins_now` must already hold this step's tau.
inline BatchGradResult batch_gradient(const ParamMap& params, const ModelConfig& cfg,
                                      const Corpus& corpus,
                                      const std::vector<std::size_t>& batch, int stage,
                                      const LossWeights& w, const MarginState& margins_now) {
    ImageEncoderParams ip = image_params_from(params, cfg);
    TextEncoderParams tp = text_params_from(params);
    SigmoidLossParams lp = loss_params_from(params);
    std::vector<SampleActivations> acts;
    acts.reserve(batch.size());
    for (std::size_t idx : batch)
        acts.push_back(forward_sample(corpus.at(idx), ip, tp, stage, cfg.fgt_negatives));
    BatchEmbeddings gathered = gather_embeddings(acts, stage, cfg.fgt_negatives, cfg.embed_dim);

    BatchGradResult out;
    out.losses = compute_losses(gathered, stage, w, lp, margins_now, cfg.tic_mean);
    ImageEncoderGrads ig = ImageEncoderGrads::zeros_like(ip);
    TextEncoderGrads tg = TextEncoderGrads::zeros_like(tp);
    std::size_t region_row = 0;
    for (std::size_t i = 0; i < acts.size(); ++i) {
        backward_sample(acts[i], ip, tp, out.losses.total, stage, i, region_row,
                        cfg.fgt_negatives, ig, tg);
        region_row += acts[i].region_caches.size();
    }
    out.grads = zero_grads_like(params);
    add_image_grads(out.grads, ig);
    add_text_grads(out.grads, tg);
    add_scalar_grads(out.grads, out.losses.total);
    return out;
}

/// Forward-only weighted total; the scalar function probed by finite differences.
inline double batch_loss_value(const ParamMap& params, const ModelConfig& cfg,
                               const Corpus& corpus, const std::vector<std::size_t>& batch,
                               int stage, const LossWeights& w, const MarginState& margins_now) {
    ImageEncoderParams ip = image_params_from(params, cfg);
    TextEncoderParams tp = text_params_from(params);
    SigmoidLossParams lp = loss_params_from(params);
    std::vector<SampleActivations> acts;
    acts.reserve(batch.size());
    for (std::size_t idx : batch)
        acts.push_back(forward_sample(corpus.at(idx), ip, tp, stage, cfg.fgt_negatives));
    BatchEmbeddings gathered = gather_embeddings(acts, stage, cfg.fgt_negatives, cfg.embed_dim);
    return compute_losses(gathered, stage, w, lp, margins_now, cfg.tic_mean).total.value;
}

/// FNV-1a over parameter names and raw tensor bytes; detects replica divergence.
inline std::uint64_t param_hash(const ParamMap& p) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, std::size_t bytes) {
        const auto* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : p) {
        mix(name.data(), name.size());
        mix(t.data(), t.size() * sizeof(double));
    }
    return h;
}

}  // namespace duet
