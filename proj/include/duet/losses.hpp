#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "duet/errors.hpp"
#include "duet/numerics.hpp"
#include "duet/tensor.hpp"

namespace duet {

inline constexpr double kTicSimilarityCeiling = 0.95;
inline constexpr std::size_t kTicMaxNegatives = 10;

/// Fixed combination weights for the five training objectives.
struct LossWeights {
    double global = 1.0;
    double fgv = 0.1;
    double fgt = 0.5;
    double cmr = 0.4;
    double tic = 0.1;
};

/// Learnable scalars of the pairwise sigmoid loss; logit scale is exp(log_scale).
struct SigmoidLossParams {
    double log_scale = std::log(10.0);
    double bias = -10.0;
};

/// Per-slot rank margins plus the previous-step similarity cache that feeds them.
struct MarginState {
    Tensor tau;         // one margin per hard-negative slot
    Tensor cached_pos;  // previous-step S(I,T), one per pair (global batch order)
    Tensor cached_neg;  // previous-step S(I,T_k), pairs x slots
    std::size_t step = 0;

    static MarginState initial(std::size_t slots) {
        MarginState s;
        s.tau = Tensor({slots});
        return s;
    }

    bool has_cache() const { return cached_pos.size() > 0; }
};

/// Filtered hard-negative set for one text: indices into the batch plus their similarities.
struct TicNegativeSet {
    std::vector<std::size_t> indices;
    std::vector<double> sims;
};

namespace detail {

inline void require_unit_rows(const Tensor& t, const char* what) {
    std::size_t n = t.rank() == 1 ? 1 : t.rows();
    std::size_t d = t.rank() == 1 ? t.size() : t.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double norm = norm2(t.data() + i * d, d);
        if (std::abs(norm - 1.0) > 1e-6)
            throw NotNormalizedError(std::string(what) + " row " + std::to_string(i) +
                                     " has norm " + std::to_string(norm));
    }
}

}  // namespace detail

/// Pairwise sigmoid loss over all N x N image-text pairs:
///   -(1/N) sum_ij log sigmoid(z_ij (exp(t') S_ij + b)),  z_ij = +1 on the diagonal.
/// Gradient keys follow the supplied row names.
inline GradPair sigmoid_pair_loss(const Tensor& lhs, const Tensor& rhs,
                                  const SigmoidLossParams& p, const char* lhs_name,
                                  const char* rhs_name) {
    if (lhs.rank() != 2 || rhs.rank() != 2 || !lhs.same_shape(rhs))
        throw ShapeError("sigmoid loss expects matching N x D embedding sets");
    if (lhs.rows() == 0) throw ShapeError("empty batch");
    detail::require_unit_rows(lhs, lhs_name);
    detail::require_unit_rows(rhs, rhs_name);
    std::size_t n = lhs.rows(), d = lhs.cols();
    double scale = std::exp(p.log_scale);
    GradPair out;
    Tensor dlhs({n, d}), drhs({n, d});
    double dt = 0.0, db = 0.0, loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = dot(lhs.data() + i * d, rhs.data() + j * d, d);
            double z = (i == j) ? 1.0 : -1.0;
            double logit = scale * s + p.bias;
            loss += -log_sigmoid(z * logit);
            double dlogit = (-z * sigmoid(-z * logit)) / static_cast<double>(n);
            double ds = dlogit * scale;
            for (std::size_t c = 0; c < d; ++c) {
                dlhs.at(i, c) += ds * rhs.at(j, c);
                drhs.at(j, c) += ds * lhs.at(i, c);
            }
            dt += dlogit * s * scale;
            db += dlogit;
        }
    }
    out.value = loss / static_cast<double>(n);
    out.grads[lhs_name] = std::move(dlhs);
    out.grads[rhs_name] = std::move(drhs);
    out.grads["t_prime"] = Tensor::scalar(dt);
    out.grads["bias"] = Tensor::scalar(db);
    return out;
}

/// Global image-text alignment loss over unit-norm embedding rows.
inline GradPair global_sigmoid_loss(const Tensor& img_embs, const Tensor& txt_embs,
                                    const SigmoidLossParams& p) {
    return sigmoid_pair_loss(img_embs, txt_embs, p, "img_embs", "txt_embs");
}

/// Mean of the global loss against short and against long captions.
inline GradPair dual_caption_global_loss(const Tensor& img_embs, const Tensor& short_txt_embs,
                                         const Tensor& long_txt_embs,
                                         const SigmoidLossParams& p) {
    GradPair a = sigmoid_pair_loss(img_embs, short_txt_embs, p, "img_embs", "short_txt_embs");
    GradPair b = sigmoid_pair_loss(img_embs, long_txt_embs, p, "img_embs", "long_txt_embs");
    GradPair out;
    out.value = 0.5 * (a.value + b.value);
    for (auto& [name, g] : a.grads) {
        g *= 0.5;
        out.grads[name] = std::move(g);
    }
    for (auto& [name, g] : b.grads) {
        g *= 0.5;
        auto it = out.grads.find(name);
        if (it == out.grads.end())
            out.grads[name] = std::move(g);
        else
            it->second += g;
    }
    return out;
}

/// Regional contrastive loss: the sigmoid pairwise form over region/phrase pairs.
inline GradPair fgv_regional_loss(const Tensor& region_embs, const Tensor& phrase_embs,
                                  const SigmoidLossParams& p) {
    return sigmoid_pair_loss(region_embs, phrase_embs, p, "region_embs", "phrase_embs");
}

/// Binary classification over 1 positive and M hard-negative texts for one region:
///   (1/(M+1)) [ -log sigmoid(l_pos) + sum_k -log sigmoid(-l_k) ],  l = exp(t') S + b.
inline GradPair fgt_hard_negative_loss(const Tensor& region_emb, const Tensor& pos_emb,
                                       const Tensor& neg_embs, const SigmoidLossParams& p,
                                       std::size_t expected_negatives = 10) {
    if (neg_embs.rank() != 2 || neg_embs.rows() != expected_negatives)
        throw BadNegativeCountError("expected " + std::to_string(expected_negatives) +
                                    " negatives, got " +
                                    std::to_string(neg_embs.rank() == 2 ? neg_embs.rows() : 0));
    if (region_emb.size() != pos_emb.size() || region_emb.size() != neg_embs.cols())
        throw ShapeError("embedding dimensions disagree");
    detail::require_unit_rows(region_emb, "region_emb");
    detail::require_unit_rows(pos_emb, "pos_emb");
    detail::require_unit_rows(neg_embs, "neg_embs");
    std::size_t m = neg_embs.rows(), d = region_emb.size();
    double scale = std::exp(p.log_scale);
    double inv = 1.0 / static_cast<double>(m + 1);
    GradPair out;
    Tensor dregion({d}), dpos({d}), dnegs({m, d});
    double dt = 0.0, db = 0.0;

    double s_pos = dot(region_emb, pos_emb);
    double l_pos = scale * s_pos + p.bias;
    double loss = -log_sigmoid(l_pos);
    double dl = inv * (-sigmoid(-l_pos));
    for (std::size_t c = 0; c < d; ++c) {
        dregion[c] += dl * scale * pos_emb[c];
        dpos[c] += dl * scale * region_emb[c];
    }
    dt += dl * s_pos * scale;
    db += dl;

    for (std::size_t k = 0; k < m; ++k) {
        double s_k = dot(region_emb.data(), neg_embs.data() + k * d, d);
        double l_k = scale * s_k + p.bias;
        loss += -log_sigmoid(-l_k);
        double dlk = inv * sigmoid(l_k);
        for (std::size_t c = 0; c < d; ++c) {
            dregion[c] += dlk * scale * neg_embs.at(k, c);
            dnegs.at(k, c) += dlk * scale * region_emb[c];
        }
        dt += dlk * s_k * scale;
        db += dlk;
    }
    out.value = loss * inv;
    out.grads["region_emb"] = std::move(dregion);
    out.grads["pos_emb"] = std::move(dpos);
    out.grads["neg_embs"] = std::move(dnegs);
    out.grads["t_prime"] = Tensor::scalar(dt);
    out.grads["bias"] = Tensor::scalar(db);
    return out;
}

/// Rank hinge with per-slot margins, mean over all (pair, slot) terms:
///   mean max(0, S(I,T_k) - S(I,T) + tau_k).  Margins are previous-step
/// constants and receive no gradient.
inline GradPair cmr_loss(const Tensor& pos_sims, const Tensor& neg_sims,
                         const MarginState& margins) {
    if (pos_sims.rank() != 1 || neg_sims.rank() != 2 || neg_sims.rows() != pos_sims.size())
        throw ShapeError("cmr_loss expects pos_sims (R) and neg_sims (R x M)");
    if (margins.tau.size() != neg_sims.cols())
        throw ShapeError("margin slot count does not match hard-negative count");
    std::size_t r = pos_sims.size(), m = neg_sims.cols();
    double inv = 1.0 / static_cast<double>(r * m);
    GradPair out;
    Tensor dpos({r}), dneg({r, m});
    double loss = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t k = 0; k < m; ++k) {
            double term = neg_sims.at(i, k) - pos_sims[i] + margins.tau[k];
            if (term > 0.0) {
                loss += term;
                dneg.at(i, k) += inv;
                dpos[i] -= inv;
            }
        }
    }
    out.value = loss * inv;
    out.grads["pos_sims"] = std::move(dpos);
    out.grads["neg_sims"] = std::move(dneg);
    return out;
}

/// New margins from the previous-step similarity cache:
///   tau_k = mean over pairs of (S(I,T) - S(I,T_k)).
/// Summation runs in global pair order, so any sharding of the batch that
/// preserves that order reproduces the same bits. An empty cache (step 0)
/// yields all-zero margins.
inline MarginState cmr_update_margins(const Tensor& prev_pos_sims, const Tensor& prev_neg_sims,
                                      const MarginState& state) {
    std::size_t slots = state.tau.size();
    MarginState next = state;
    next.step = state.step + 1;
    next.tau = Tensor({slots});
    if (prev_pos_sims.size() == 0) return next;
    if (prev_neg_sims.rank() != 2 || prev_neg_sims.rows() != prev_pos_sims.size() ||
        prev_neg_sims.cols() != slots)
        throw ShapeError("margin cache shapes do not match pair/slot layout");
    std::size_t r = prev_pos_sims.size();
    for (std::size_t k = 0; k < slots; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < r; ++i) s += prev_pos_sims[i] - prev_neg_sims.at(i, k);
        next.tau[k] = s / static_cast<double>(r);
    }
    return next;
}

/// For each text: candidates j != i with S_ij <= 0.95, sorted by similarity
/// descending (ties to the lower index), truncated to the top 10.
inline std::vector<TicNegativeSet> tic_select_negatives(const Tensor& text_embs) {
    if (text_embs.rank() != 2 || text_embs.rows() < 2)
        throw BatchTooSmallError("need at least 2 texts to select negatives");
    detail::require_unit_rows(text_embs, "text_embs");
    std::size_t n = text_embs.rows(), d = text_embs.cols();
    std::vector<TicNegativeSet> sets(n);
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double s = dot(text_embs.data() + i * d, text_embs.data() + j * d, d);
            if (s <= kTicSimilarityCeiling) cand.emplace_back(s, j);
        }
        std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        std::size_t keep = std::min(cand.size(), kTicMaxNegatives);
        for (std::size_t t = 0; t < keep; ++t) {
            sets[i].indices.push_back(cand[t].second);
            sets[i].sims.push_back(cand[t].first);
        }
    }
    return sets;
}

/// Textual intra-modal contrastive loss:
///   sum_i log sum_{m in T_i} exp(S(T_i, T_m)),  empty sets contribute zero.
/// With mean_over_texts the sum is divided by the number of texts.
inline GradPair tic_loss(const Tensor& text_embs, const std::vector<TicNegativeSet>& neg_sets,
                         bool mean_over_texts = false) {
    if (text_embs.rank() != 2 || neg_sets.size() != text_embs.rows())
        throw ShapeError("need one negative set per text");
    std::size_t n = text_embs.rows(), d = text_embs.cols();
    double norm = mean_over_texts ? 1.0 / static_cast<double>(n) : 1.0;
    GradPair out;
    Tensor dtext({n, d});
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& set = neg_sets[i];
        if (set.indices.empty()) continue;
        std::vector<double> sims(set.indices.size());
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < set.indices.size(); ++t) {
            std::size_t j = set.indices[t];
            if (j >= n || j == i)
                throw BadIndexError("negative index " + std::to_string(j) +
                                    " invalid for text " + std::to_string(i));
            sims[t] = dot(text_embs.data() + i * d, text_embs.data() + j * d, d);
            m = std::max(m, sims[t]);
        }
        double z = 0.0;
        for (double s : sims) z += std::exp(s - m);
        loss += m + std::log(z);
        for (std::size_t t = 0; t < set.indices.size(); ++t) {
            std::size_t j = set.indices[t];
            double w = std::exp(sims[t] - m) / z * norm;
            for (std::size_t c = 0; c < d; ++c) {
                dtext.at(i, c) += w * text_embs.at(j, c);
                dtext.at(j, c) += w * text_embs.at(i, c);
            }
        }
    }
    out.value = loss * norm;
    out.grads["text_embs"] = std::move(dtext);
    return out;
}

struct LossComponents {
    std::optional<GradPair> global;
    std::optional<GradPair> fgv;
    std::optional<GradPair> fgt;
    std::optional<GradPair> cmr;
    std::optional<GradPair> tic;
};

/// Weighted total objective. Stage 1 uses only the global term; stage 2
/// requires all five. The scalar accumulates with compensated summation so
/// the weighted total is correctly rounded; gradients merge linearly by key.
inline GradPair total_loss(int stage, const LossComponents& c, const LossWeights& w) {
    if (stage != 1 && stage != 2) throw Error("stage must be 1 or 2");
    if (!c.global) throw MissingComponentError("global component is required");
    std::vector<std::pair<double, const GradPair*>> active;
    active.emplace_back(w.global, &*c.global);
    if (stage == 2) {
        if (!c.fgv) throw MissingComponentError("stage 2 requires the FGV component");
        if (!c.fgt) throw MissingComponentError("stage 2 requires the FGT component");
        if (!c.cmr) throw MissingComponentError("stage 2 requires the CMR component");
        if (!c.tic) throw MissingComponentError("stage 2 requires the TIC component");
        active.emplace_back(w.fgv, &*c.fgv);
        active.emplace_back(w.fgt, &*c.fgt);
        active.emplace_back(w.cmr, &*c.cmr);
        active.emplace_back(w.tic, &*c.tic);
    }
    GradPair out;
    CompensatedSum total;
    for (const auto& [weight, comp] : active) {
        total.add(weight * comp->value);
        for (const auto& [name, g] : comp->grads) {
            auto it = out.grads.find(name);
            if (it == out.grads.end()) {
                Tensor scaled = g;
                scaled *= weight;
                out.grads[name] = std::move(scaled);
            } else {
                it->second.axpy(weight, g);
            }
        }
    }
    out.value = total.value();
    return out;
}

}  // namespace duet
