#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "duet/grad_check.hpp"
#include "duet/losses.hpp"
#include "duet/model.hpp"
#include "duet/rng.hpp"
#include "duet/synthdata.hpp"

namespace duet {

/// Max relative gradient errors per objective, checked by central finite
/// differences at h = 1e-5. The embedding-level checks differentiate through
/// row normalization (the path embeddings actually take); the total check
/// covers every model parameter of the weighted stage-2 objective end to end.
struct GradSuiteResult {
    double global = 0.0;
    double fgv = 0.0;
    double fgt = 0.0;
    double cmr = 0.0;
    double tic = 0.0;
    double total = 0.0;

    double worst() const {
        double w = global;
        for (double v : {fgv, fgt, cmr, tic, total}) w = std::max(w, v);
        return w;
    }
};

namespace gradsuite_detail {

struct RowNorms {
    Tensor unit;
    std::vector<double> norms;
};

inline RowNorms normalize_rows(const Tensor& x) {
    std::size_t n = x.rank() == 1 ? 1 : x.rows();
    std::size_t d = x.rank() == 1 ? x.size() : x.cols();
    RowNorms out;
    out.unit = x;
    out.norms.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.norms[i] = norm2(x.data() + i * d, d);
        for (std::size_t c = 0; c < d; ++c) out.unit[i * d + c] = x[i * d + c] / out.norms[i];
    }
    return out;
}

inline Tensor chain_rows(const RowNorms& rn, const Tensor& dunit) {
    std::size_t n = rn.norms.size();
    std::size_t d = rn.unit.size() / n;
    Tensor dx(rn.unit.shape());
    for (std::size_t i = 0; i < n; ++i) {
        double proj = 0;
        for (std::size_t c = 0; c < d; ++c) proj += dunit[i * d + c] * rn.unit[i * d + c];
        for (std::size_t c = 0; c < d; ++c)
            dx[i * d + c] = (dunit[i * d + c] - proj * rn.unit[i * d + c]) / rn.norms[i];
    }
    return dx;
}

inline Tensor random_rows(Rng& rng, std::size_t n, std::size_t d) {
    Tensor t({n, d});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.next_range(-1.0, 1.0);
    return t;
}

}  // namespace gradsuite_detail

inline GradSuiteResult run_grad_suite(std::uint64_t seed) {
    using namespace gradsuite_detail;
    GradSuiteResult out;
    FiniteDiffOptions opts{1e-5, 0};
    Rng rng(seed);
    std::size_t n = 4, d = 6, m = 10;

    {  // global sigmoid (dual-caption form)
        ParamMap p;
        p["img"] = random_rows(rng, n, d);
        p["short"] = random_rows(rng, n, d);
        p["long"] = random_rows(rng, n, d);
        p["t"] = Tensor::scalar(0.6);
        p["b"] = Tensor::scalar(-1.1);
        GradFunction f = [](const ParamMap& q) {
            RowNorms img = normalize_rows(q.at("img"));
            RowNorms st = normalize_rows(q.at("short"));
            RowNorms lt = normalize_rows(q.at("long"));
            GradPair raw = dual_caption_global_loss(img.unit, st.unit, lt.unit,
                                                    SigmoidLossParams{q.at("t")[0], q.at("b")[0]});
            GradPair g;
            g.value = raw.value;
            g.grads["img"] = chain_rows(img, raw.grads.at("img_embs"));
            g.grads["short"] = chain_rows(st, raw.grads.at("short_txt_embs"));
            g.grads["long"] = chain_rows(lt, raw.grads.at("long_txt_embs"));
            g.grads["t"] = raw.grads.at("t_prime");
            g.grads["b"] = raw.grads.at("bias");
            return g;
        };
        out.global = finite_diff_check(f, p, opts);
    }

    {  // regional sigmoid
        ParamMap p;
        p["reg"] = random_rows(rng, n, d);
        p["ph"] = random_rows(rng, n, d);
        p["t"] = Tensor::scalar(0.4);
        p["b"] = Tensor::scalar(-0.8);
        GradFunction f = [](const ParamMap& q) {
            RowNorms reg = normalize_rows(q.at("reg"));
            RowNorms ph = normalize_rows(q.at("ph"));
            GradPair raw = fgv_regional_loss(reg.unit, ph.unit,
                                             SigmoidLossParams{q.at("t")[0], q.at("b")[0]});
            GradPair g;
            g.value = raw.value;
            g.grads["reg"] = chain_rows(reg, raw.grads.at("region_embs"));
            g.grads["ph"] = chain_rows(ph, raw.grads.at("phrase_embs"));
            g.grads["t"] = raw.grads.at("t_prime");
            g.grads["b"] = raw.grads.at("bias");
            return g;
        };
        out.fgv = finite_diff_check(f, p, opts);
    }

    {  // hard-negative classification
        ParamMap p;
        p["reg"] = random_rows(rng, 1, d).reshaped({d});
        p["pos"] = random_rows(rng, 1, d).reshaped({d});
        p["negs"] = random_rows(rng, m, d);
        p["t"] = Tensor::scalar(0.9);
        p["b"] = Tensor::scalar(-2.0);
        GradFunction f = [m](const ParamMap& q) {
            RowNorms reg = normalize_rows(q.at("reg"));
            RowNorms pos = normalize_rows(q.at("pos"));
            RowNorms neg = normalize_rows(q.at("negs"));
            GradPair raw = fgt_hard_negative_loss(
                reg.unit, pos.unit, neg.unit, SigmoidLossParams{q.at("t")[0], q.at("b")[0]}, m);
            GradPair g;
            g.value = raw.value;
            g.grads["reg"] = chain_rows(reg, raw.grads.at("region_emb"));
            g.grads["pos"] = chain_rows(pos, raw.grads.at("pos_emb"));
            g.grads["negs"] = chain_rows(neg, raw.grads.at("neg_embs"));
            g.grads["t"] = raw.grads.at("t_prime");
            g.grads["b"] = raw.grads.at("bias");
            return g;
        };
        out.fgt = finite_diff_check(f, p, opts);
    }

    {  // rank hinge over similarities, probes pushed off the kinks
        std::size_t r = 3;
        MarginState margins = MarginState::initial(m);
        for (std::size_t k = 0; k < m; ++k) margins.tau[k] = rng.next_range(0.0, 0.3);
        ParamMap p;
        p["pos"] = Tensor({r});
        p["neg"] = Tensor({r, m});
        for (std::size_t i = 0; i < r; ++i) {
            p["pos"][i] = rng.next_range(-0.5, 0.9);
            for (std::size_t k = 0; k < m; ++k) {
                double v = rng.next_range(-0.9, 0.9);
                double term = v - p["pos"][i] + margins.tau[k];
                if (std::abs(term) < 2e-4) v += 5e-4;  // keep 10h clear of the hinge
                p["neg"].at(i, k) = v;
            }
        }
        GradFunction f = [&margins](const ParamMap& q) {
            GradPair raw = cmr_loss(q.at("pos"), q.at("neg"), margins);
            GradPair g;
            g.value = raw.value;
            g.grads["pos"] = raw.grads.at("pos_sims");
            g.grads["neg"] = raw.grads.at("neg_sims");
            return g;
        };
        out.cmr = finite_diff_check(f, p, opts);
    }

    {  // textual intra-modal contrastive, selection held fixed
        std::size_t nt = 8;
        ParamMap p;
        p["txt"] = random_rows(rng, nt, d);
        auto sets = tic_select_negatives(normalize_rows(p.at("txt")).unit);
        GradFunction f = [&sets](const ParamMap& q) {
            RowNorms txt = normalize_rows(q.at("txt"));
            GradPair raw = tic_loss(txt.unit, sets);
            GradPair g;
            g.value = raw.value;
            g.grads["txt"] = chain_rows(txt, raw.grads.at("text_embs"));
            return g;
        };
        out.tic = finite_diff_check(f, p, opts);
    }

    {  // weighted stage-2 total, end to end over every model parameter
        ModelConfig cfg;
        cfg.embed_dim = 6;
        GenConfig gc;
        gc.samples = 4;
        gc.regions_per_image = 2;
        gc.seed = seed;
        Corpus corpus = generate_corpus(gc);
        std::vector<std::size_t> batch{0, 1, 2, 3};
        LossWeights w{};
        out.total = 1.0;  // overwritten once a kink-free probe point is found
        // retry seeds until the probe point is at least 10h from every hinge kink
        for (std::uint64_t attempt = 0; attempt < 32; ++attempt) {
            Model model = Model::init(cfg, seed + 17 * (attempt + 1));
            MarginState m0 = MarginState::initial(cfg.fgt_negatives);
            BatchGradResult warm = batch_gradient(model.params(), cfg, corpus, batch, 2, w, m0);
            MarginState margins = cmr_update_margins(warm.losses.pos_sims,
                                                     warm.losses.neg_sims, m0);
            BatchGradResult probe =
                batch_gradient(model.params(), cfg, corpus, batch, 2, w, margins);
            bool clear = true;
            for (std::size_t i = 0; i < probe.losses.pos_sims.size(); ++i)
                for (std::size_t k = 0; k < cfg.fgt_negatives; ++k)
                    clear &= std::abs(probe.losses.neg_sims.at(i, k) -
                                      probe.losses.pos_sims[i] + margins.tau[k]) > 1.2e-4;
            if (!clear) continue;
            GradFunction f = [&](const ParamMap& q) {
                BatchGradResult r = batch_gradient(q, cfg, corpus, batch, 2, w, margins);
                GradPair g;
                g.value = r.losses.total.value;
                g.grads = std::move(r.grads);
                return g;
            };
            out.total = finite_diff_check(f, model.params(), {1e-5, 16});
            break;
        }
    }
    return out;
}

}  // namespace duet
