#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "duet/errors.hpp"
#include "duet/numerics.hpp"
#include "duet/tensor.hpp"

namespace duet {

/// Hard limit on text length; the positional table always has exactly this many rows.
inline constexpr std::size_t kMaxTextLen = 196;

struct AttnWeights {
    Tensor wq, wk, wv, wo;  // each D x D
};

/// Masked attention pooling head: one learned query attends over token features.
struct MapHeadWeights {
    Tensor query;           // D
    Tensor wq, wk, wv, wo;  // each D x D
};

struct ImageEncoderParams {
    Tensor patch_proj;               // P_in x D
    std::vector<AttnWeights> layers; // dense-output self-attention stack, >= 1 layer
    MapHeadWeights map;
    bool use_positional = false;     // fixed sinusoidal codes on projected patches
};

struct TextEncoderParams {
    Tensor token_table;  // V x D
    Tensor pos_table;    // 196 x D
    MapHeadWeights map;
};

struct FeatureGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    Tensor features;  // H x W x D
};

struct ResolutionBuckets {
    std::vector<int> sides;

    static ResolutionBuckets defaults() { return ResolutionBuckets{{128, 256, 576, 784, 1024}}; }

    void validate() const {
        if (sides.empty()) throw ShapeError("resolution bucket list is empty");
        for (std::size_t i = 1; i < sides.size(); ++i)
            if (sides[i] <= sides[i - 1])
                throw ShapeError("resolution buckets must be strictly increasing");
    }
};

/// Bucket with minimal |log(bucket / max_side)|; ties resolve to the smaller bucket.
inline int select_resolution_bucket(double max_side, const ResolutionBuckets& buckets) {
    buckets.validate();
    if (!(max_side > 0.0)) throw ShapeError("max_side must be positive");
    int best = buckets.sides.front();
    double best_cost = std::abs(std::log(best / max_side));
    for (std::size_t i = 1; i < buckets.sides.size(); ++i) {
        double cost = std::abs(std::log(buckets.sides[i] / max_side));
        if (cost < best_cost) {
            best_cost = cost;
            best = buckets.sides[i];
        }
    }
    return best;
}

// ---- caches kept by forward passes for the hand-derived backward passes ----

struct AttentionCache {
    Tensor input;  // n x D
    Tensor q, k, v;
    Tensor attn;  // n x n row-softmax
    Tensor ctx;   // n x D
};

struct DenseCache {
    std::size_t height = 0, width = 0;
    Tensor patches;  // (H*W) x P_in
    Tensor tokens;   // (H*W) x D, after projection (+ positional codes)
    std::vector<AttentionCache> layers;
};

struct MapCache {
    Tensor tokens;             // K x D
    std::vector<char> masked;  // 1 = excluded
    Tensor qproj;              // D
    Tensor keys, vals;         // K x D
    Tensor weights;            // K, exactly zero at masked positions
    Tensor pooled;             // D
};

struct TextCache {
    std::vector<int> ids;
    Tensor summed;  // L x D token + positional sums
    MapCache map;
};

struct AttnGrads {
    Tensor wq, wk, wv, wo;
    static AttnGrads zeros_like(const AttnWeights& w) {
        return {Tensor(w.wq.shape()), Tensor(w.wk.shape()), Tensor(w.wv.shape()),
                Tensor(w.wo.shape())};
    }
};

struct MapHeadGrads {
    Tensor query, wq, wk, wv, wo;
    static MapHeadGrads zeros_like(const MapHeadWeights& w) {
        return {Tensor(w.query.shape()), Tensor(w.wq.shape()), Tensor(w.wk.shape()),
                Tensor(w.wv.shape()), Tensor(w.wo.shape())};
    }
};

// ---- single-head self-attention with residual add ----

/// y = x + softmax(x Wq (x Wk)^T / sqrt(D)) x Wv Wo
inline Tensor attention_layer(const Tensor& x, const AttnWeights& w, AttentionCache* cache) {
    std::size_t n = x.rows(), d = x.cols();
    if (w.wq.rows() != d) throw ShapeError("attention weight dimension mismatch");
    Tensor q = matmul(x, w.wq);
    Tensor k = matmul(x, w.wk);
    Tensor v = matmul(x, w.wv);
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor logits = matmul_nt(q, k);
    logits *= inv_sqrt_d;
    Tensor attn({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        Tensor row = softmax_row(logits.row_copy(i));
        for (std::size_t j = 0; j < n; ++j) attn.at(i, j) = row[j];
    }
    Tensor ctx = matmul(attn, v);
    Tensor out = matmul(ctx, w.wo);
    out += x;
    if (cache) *cache = AttentionCache{x, q, k, v, attn, ctx};
    return out;
}

inline void attention_layer_backward(const AttentionCache& c, const AttnWeights& w,
                                     const Tensor& dy, AttnGrads& g, Tensor& dx) {
    std::size_t n = c.input.rows(), d = c.input.cols();
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    dx += dy;  // residual branch
    // out = ctx Wo
    g.wo += matmul_tn(c.ctx, dy);
    Tensor dctx = matmul_nt(dy, w.wo);
    // ctx = attn V
    Tensor dattn = matmul_nt(dctx, c.v);
    Tensor dv = matmul_tn(c.attn, dctx);
    // row softmax of logits = q k^T / sqrt(d)
    Tensor dlogits({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += dattn.at(i, j) * c.attn.at(i, j);
        for (std::size_t j = 0; j < n; ++j)
            dlogits.at(i, j) = c.attn.at(i, j) * (dattn.at(i, j) - inner);
    }
    dlogits *= inv_sqrt_d;
    Tensor dq = matmul(dlogits, c.k);
    Tensor dk = matmul_tn(dlogits, c.q);
    g.wq += matmul_tn(c.input, dq);
    g.wk += matmul_tn(c.input, dk);
    g.wv += matmul_tn(c.input, dv);
    dx += matmul_nt(dq, w.wq);
    dx += matmul_nt(dk, w.wk);
    dx += matmul_nt(dv, w.wv);
}

// ---- patch projection and the dense-output stack ----

/// Fixed sinusoidal code for token position t, channel c.
inline double positional_code(std::size_t t, std::size_t c, std::size_t d) {
    double rate = std::pow(10000.0, -(double)(c / 2 * 2) / (double)d);
    double angle = static_cast<double>(t) * rate;
    return (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
}

/// Projects an H x W x P patch grid to (H*W) x D tokens.
inline Tensor project_patches(const Tensor& image, const ImageEncoderParams& p,
                              DenseCache* cache) {
    if (image.rank() != 3) throw ShapeError("image must be H x W x P");
    std::size_t h = image.dim(0), w = image.dim(1), pc = image.dim(2);
    if (pc != p.patch_proj.rows())
        throw ShapeError("patch channel count " + std::to_string(pc) +
                         " does not match projection rows " +
                         std::to_string(p.patch_proj.rows()));
    Tensor patches = image.reshaped({h * w, pc});
    Tensor tokens = matmul(patches, p.patch_proj);
    if (p.use_positional) {
        std::size_t d = tokens.cols();
        for (std::size_t t = 0; t < tokens.rows(); ++t)
            for (std::size_t c = 0; c < d; ++c) tokens.at(t, c) += positional_code(t, c, d);
    }
    if (cache) {
        cache->height = h;
        cache->width = w;
        cache->patches = patches;
        cache->tokens = tokens;
    }
    return tokens;
}

/// Dense feature grid: projected patches run through the self-attention stack.
/// Rows are not normalized; use sites normalize as needed.
inline FeatureGrid encode_image_dense(const Tensor& image, const ImageEncoderParams& p,
                                      DenseCache* cache = nullptr) {
    if (p.layers.empty()) throw ShapeError("dense stack needs at least one layer");
    DenseCache local;
    DenseCache* c = cache ? cache : &local;
    Tensor x = project_patches(image, p, c);
    c->layers.resize(p.layers.size());
    for (std::size_t l = 0; l < p.layers.size(); ++l)
        x = attention_layer(x, p.layers[l], &c->layers[l]);
    FeatureGrid grid;
    grid.height = c->height;
    grid.width = c->width;
    grid.features = x.reshaped({c->height, c->width, x.cols()});
    return grid;
}

struct ImageEncoderGrads {
    Tensor patch_proj;
    std::vector<AttnGrads> layers;
    MapHeadGrads map;

    static ImageEncoderGrads zeros_like(const ImageEncoderParams& p) {
        ImageEncoderGrads g;
        g.patch_proj = Tensor(p.patch_proj.shape());
        for (const auto& l : p.layers) g.layers.push_back(AttnGrads::zeros_like(l));
        g.map = MapHeadGrads::zeros_like(p.map);
        return g;
    }
};

/// Backward through the dense stack only; accumulates into dtokens (gradient at
/// the projected-token stage) so callers can merge other branches before the
/// projection backward.
inline void dense_stack_backward(const DenseCache& c, const ImageEncoderParams& p,
                                 const Tensor& dgrid, ImageEncoderGrads& g, Tensor& dtokens) {
    Tensor dx = dgrid.rank() == 3
                    ? dgrid.reshaped({dgrid.dim(0) * dgrid.dim(1), dgrid.dim(2)})
                    : dgrid;
    for (std::size_t l = p.layers.size(); l-- > 0;) {
        Tensor dprev(c.layers[l].input.shape());
        attention_layer_backward(c.layers[l], p.layers[l], dx, g.layers[l], dprev);
        dx = dprev;
    }
    dtokens += dx;
}

/// dWproj from the merged token gradient. Positional codes are constants.
inline void projection_backward(const DenseCache& c, const Tensor& dtokens,
                                ImageEncoderGrads& g) {
    g.patch_proj += matmul_tn(c.patches, dtokens);
}

// ---- masked attention pooling ----

/// Pools K x D tokens to one D vector. masked[i] != 0 excludes position i;
/// excluded positions get exactly zero attention weight.
inline Tensor pool_map(const Tensor& tokens, const std::vector<char>& masked,
                       const MapHeadWeights& head, MapCache* cache = nullptr) {
    std::size_t k = tokens.rows(), d = tokens.cols();
    if (masked.size() != k) throw ShapeError("mask length does not match token count");
    std::size_t alive = 0;
    for (char m : masked)
        if (!m) ++alive;
    if (alive == 0) throw EmptyPoolError("all positions masked");

    Tensor qproj = vecmat(head.query, head.wq);
    Tensor keys = matmul(tokens, head.wk);
    Tensor vals = matmul(tokens, head.wv);
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    // softmax over unmasked logits only
    Tensor weights({k});
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> logits(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        if (masked[i]) continue;
        logits[i] = dot(qproj.data(), keys.data() + i * d, d) * inv_sqrt_d;
        m = std::max(m, logits[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        if (masked[i]) continue;
        weights[i] = std::exp(logits[i] - m);
        z += weights[i];
    }
    for (std::size_t i = 0; i < k; ++i)
        if (!masked[i]) weights[i] /= z;

    Tensor pooled({d});
    for (std::size_t i = 0; i < k; ++i) {
        if (masked[i]) continue;
        for (std::size_t c = 0; c < d; ++c) pooled[c] += weights[i] * vals.at(i, c);
    }
    Tensor out = vecmat(pooled, head.wo);
    if (cache) *cache = MapCache{tokens, masked, qproj, keys, vals, weights, pooled};
    return out;
}

inline void pool_map_backward(const MapCache& c, const MapHeadWeights& head, const Tensor& dout,
                              MapHeadGrads& g, Tensor& dtokens) {
    std::size_t k = c.tokens.rows(), d = c.tokens.cols();
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    // out = pooled Wo
    g.wo += outer(c.pooled, dout);
    Tensor dpooled = vecmat_t(dout, head.wo);
    // pooled = sum_i w_i v_i over unmasked
    Tensor dweights({k});
    Tensor dvals({k, d});
    for (std::size_t i = 0; i < k; ++i) {
        if (c.masked[i]) continue;
        dweights[i] = dot(dpooled.data(), c.vals.data() + i * d, d);
        for (std::size_t cc = 0; cc < d; ++cc) dvals.at(i, cc) = c.weights[i] * dpooled[cc];
    }
    // softmax over unmasked logits
    double inner = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        if (!c.masked[i]) inner += dweights[i] * c.weights[i];
    Tensor dlogits({k});
    for (std::size_t i = 0; i < k; ++i)
        if (!c.masked[i]) dlogits[i] = c.weights[i] * (dweights[i] - inner);
    // logit_i = <qproj, key_i> / sqrt(d)
    Tensor dqproj({d});
    Tensor dkeys({k, d});
    for (std::size_t i = 0; i < k; ++i) {
        if (c.masked[i]) continue;
        double s = dlogits[i] * inv_sqrt_d;
        for (std::size_t cc = 0; cc < d; ++cc) {
            dqproj[cc] += s * c.keys.at(i, cc);
            dkeys.at(i, cc) = s * c.qproj[cc];
        }
    }
    // qproj = query Wq; keys = T Wk; vals = T Wv
    g.wq += outer(head.query, dqproj);
    g.query += vecmat_t(dqproj, head.wq);
    g.wk += matmul_tn(c.tokens, dkeys);
    g.wv += matmul_tn(c.tokens, dvals);
    dtokens += matmul_nt(dkeys, head.wk);
    dtokens += matmul_nt(dvals, head.wv);
}

// ---- text encoder ----

struct TextEncoderGrads {
    Tensor token_table, pos_table;
    MapHeadGrads map;

    static TextEncoderGrads zeros_like(const TextEncoderParams& p) {
        return {Tensor(p.token_table.shape()), Tensor(p.pos_table.shape()),
                MapHeadGrads::zeros_like(p.map)};
    }
};

/// Token + positional sums pooled through the MAP head. ids longer than the
/// true length may be supplied with pad_to > ids.size() for batch layouts;
/// padding positions are masked and never read the embedding tables.
inline Tensor encode_text(const std::vector<int>& ids, const TextEncoderParams& p,
                          TextCache* cache = nullptr, std::size_t pad_to = 0) {
    if (ids.empty()) throw EmptyPoolError("empty token sequence");
    if (ids.size() > kMaxTextLen)
        throw TooLongError("sequence length " + std::to_string(ids.size()) + " exceeds " +
                           std::to_string(kMaxTextLen));
    if (p.pos_table.rows() != kMaxTextLen)
        throw ShapeError("positional table must have exactly 196 rows");
    std::size_t v = p.token_table.rows(), d = p.token_table.cols();
    for (int id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= v)
            throw UnknownTokenError("token id " + std::to_string(id) + " outside vocabulary of " +
                                    std::to_string(v));
    std::size_t len = ids.size();
    std::size_t total = std::max(pad_to, len);
    if (total > kMaxTextLen) throw TooLongError("padded length exceeds 196");
    Tensor summed({total, d});
    std::vector<char> masked(total, 1);
    for (std::size_t i = 0; i < len; ++i) {
        masked[i] = 0;
        for (std::size_t c = 0; c < d; ++c)
            summed.at(i, c) = p.token_table.at(static_cast<std::size_t>(ids[i]), c) +
                              p.pos_table.at(i, c);
    }
    TextCache local;
    TextCache* tc = cache ? cache : &local;
    tc->ids = ids;
    tc->summed = summed;
    return pool_map(summed, masked, p.map, &tc->map);
}

inline void encode_text_backward(const TextCache& c, const TextEncoderParams& p,
                                 const Tensor& dout, TextEncoderGrads& g) {
    Tensor dsummed(c.summed.shape());
    pool_map_backward(c.map, p.map, dout, g.map, dsummed);
    std::size_t d = p.token_table.cols();
    for (std::size_t i = 0; i < c.ids.size(); ++i) {
        auto id = static_cast<std::size_t>(c.ids[i]);
        for (std::size_t cc = 0; cc < d; ++cc) {
            g.token_table.at(id, cc) += dsummed.at(i, cc);
            g.pos_table.at(i, cc) += dsummed.at(i, cc);
        }
    }
}

}  // namespace duet
