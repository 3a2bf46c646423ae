#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "duet/errors.hpp"
#include "duet/losses.hpp"
#include "duet/model.hpp"
#include "duet/numerics.hpp"
#include "duet/region.hpp"
#include "duet/synthdata.hpp"
#include "duet/tensor.hpp"

namespace duet {

struct RetrievalResult {
    double i2t_r1 = 0.0, i2t_r5 = 0.0, i2t_r10 = 0.0;
    double t2i_r1 = 0.0, t2i_r5 = 0.0, t2i_r10 = 0.0;
};

/// Recall@k over an N x N similarity matrix whose ground truth is the
/// diagonal. Pessimistic tie rule: the diagonal must strictly beat a
/// competitor to outrank it, so ties count against recall.
inline std::pair<double, double> recall_at_k(const Tensor& sims, std::size_t k) {
    if (sims.rank() != 2 || sims.rows() != sims.cols())
        throw ShapeError("recall_at_k expects a square similarity matrix");
    std::size_t n = sims.rows();
    if (n == 0) throw ShapeError("empty similarity matrix");
    std::size_t i2t_hits = 0, t2i_hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t row_above = 0, col_above = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            if (sims.at(i, j) >= sims.at(i, i)) ++row_above;
            if (sims.at(j, i) >= sims.at(i, i)) ++col_above;
        }
        if (row_above < k) ++i2t_hits;
        if (col_above < k) ++t2i_hits;
    }
    return {static_cast<double>(i2t_hits) / static_cast<double>(n),
            static_cast<double>(t2i_hits) / static_cast<double>(n)};
}

inline RetrievalResult retrieval_recalls(const Tensor& sims) {
    RetrievalResult r;
    auto [a1, b1] = recall_at_k(sims, 1);
    auto [a5, b5] = recall_at_k(sims, 5);
    auto [a10, b10] = recall_at_k(sims, 10);
    r.i2t_r1 = a1;
    r.i2t_r5 = a5;
    r.i2t_r10 = a10;
    r.t2i_r1 = b1;
    r.t2i_r5 = b5;
    r.t2i_r10 = b10;
    return r;
}

/// Zero-shot classification accuracy: per row of region_embs, argmax cosine
/// similarity over class embeddings, lowest index winning exact ties. Applied
/// to global image embeddings this realizes zero-shot image classification.
inline double bbox_classification_top1(const Tensor& region_embs, const Tensor& class_embs,
                                       const std::vector<std::size_t>& labels) {
    if (region_embs.rank() != 2 || class_embs.rank() != 2 ||
        region_embs.cols() != class_embs.cols())
        throw ShapeError("embedding dimensions disagree");
    if (labels.size() != region_embs.rows()) throw ShapeError("one label per region required");
    std::size_t r = region_embs.rows(), c = class_embs.rows(), d = region_embs.cols();
    for (std::size_t i = 0; i < r; ++i)
        if (labels[i] >= c)
            throw BadLabelError("label " + std::to_string(labels[i]) + " out of range for " +
                                std::to_string(c) + " classes");
    detail::require_unit_rows(region_embs, "region_embs");
    detail::require_unit_rows(class_embs, "class_embs");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t best = 0;
        double best_sim = dot(region_embs.data() + i * d, class_embs.data(), d);
        for (std::size_t j = 1; j < c; ++j) {
            double s = dot(region_embs.data() + i * d, class_embs.data() + j * d, d);
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        if (best == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(r);
}

/// One positive description plus ten perturbed distractors for a region.
struct CandidateSet {
    Box box;
    Tensor embeddings;           // 11 x D, unit rows
    std::size_t positive = 0;    // flagged positive row
};

/// Hit iff the positive similarity strictly exceeds every distractor's;
/// an exact tie counts as a miss.
inline bool candidate_match_top1(const Tensor& region_emb, const CandidateSet& candidates) {
    if (candidates.embeddings.rank() != 2 || candidates.embeddings.rows() != 11)
        throw BadCandidateCountError("candidate set must hold exactly 11 embeddings");
    if (candidates.positive >= 11) throw BadIndexError("positive index out of range");
    if (candidates.embeddings.cols() != region_emb.size())
        throw ShapeError("embedding dimensions disagree");
    std::size_t d = region_emb.size();
    double pos = dot(region_emb.data(),
                     candidates.embeddings.data() + candidates.positive * d, d);
    for (std::size_t j = 0; j < 11; ++j) {
        if (j == candidates.positive) continue;
        double s = dot(region_emb.data(), candidates.embeddings.data() + j * d, d);
        if (!(pos > s)) return false;
    }
    return true;
}

// ---- corpus embedding drivers shared by the CLI, tests and acceptance ----

struct CorpusEmbeddings {
    Tensor img;        // N x D unit rows
    Tensor short_txt;  // N x D
    Tensor long_txt;   // N x D
};

inline CorpusEmbeddings embed_corpus(const Model& model, const Corpus& corpus) {
    ImageEncoderParams ip = image_params_from(model.params(), model.config());
    TextEncoderParams tp = text_params_from(model.params());
    std::size_t n = corpus.size(), d = model.config().embed_dim;
    CorpusEmbeddings out;
    out.img = Tensor({n, d});
    out.short_txt = Tensor({n, d});
    out.long_txt = Tensor({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        DenseCache dc;
        Tensor tokens = project_patches(corpus[i].image, ip, &dc);
        std::vector<char> none(tokens.rows(), 0);
        Tensor img = l2_normalize(pool_map(tokens, none, ip.map));
        Tensor st = l2_normalize(encode_text(corpus[i].short_caption, tp));
        Tensor lt = l2_normalize(encode_text(corpus[i].long_caption, tp));
        for (std::size_t c = 0; c < d; ++c) {
            out.img.at(i, c) = img[c];
            out.short_txt.at(i, c) = st[c];
            out.long_txt.at(i, c) = lt[c];
        }
    }
    return out;
}

/// Region features plus matching phrase/negative embeddings for every region
/// of every corpus sample, in corpus order.
struct RegionEvalData {
    std::vector<Tensor> region_embs;          // unit D vectors
    std::vector<std::vector<int>> phrases;    // matching token sequences
    std::vector<CandidateSet> candidates;     // positive at index 0
};

inline RegionEvalData embed_regions(const Model& model, const Corpus& corpus) {
    ImageEncoderParams ip = image_params_from(model.params(), model.config());
    TextEncoderParams tp = text_params_from(model.params());
    std::size_t d = model.config().embed_dim;
    RegionEvalData out;
    for (const auto& sample : corpus) {
        FeatureGrid grid = encode_image_dense(sample.image, ip);
        for (const auto& region : sample.regions) {
            out.region_embs.push_back(region_embedding(grid, region.box));
            out.phrases.push_back(region.phrase);
            CandidateSet cs;
            cs.box = region.box;
            cs.positive = 0;
            cs.embeddings = Tensor({1 + region.hard_negatives.size(), d});
            Tensor pos = l2_normalize(encode_text(region.phrase, tp));
            for (std::size_t c = 0; c < d; ++c) cs.embeddings.at(0, c) = pos[c];
            for (std::size_t k = 0; k < region.hard_negatives.size(); ++k) {
                Tensor neg = l2_normalize(encode_text(region.hard_negatives[k], tp));
                for (std::size_t c = 0; c < d; ++c) cs.embeddings.at(k + 1, c) = neg[c];
            }
            out.candidates.push_back(std::move(cs));
        }
    }
    return out;
}

}  // namespace duet
