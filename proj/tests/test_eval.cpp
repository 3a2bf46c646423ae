#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "duet/eval.hpp"
#include "duet/rng.hpp"

using namespace duet;

namespace {

Tensor unit_rows(Rng& rng, std::size_t n, std::size_t d) {
    Tensor t({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                t.at(i, c) = rng.next_range(-1.0, 1.0);
                norm += t.at(i, c) * t.at(i, c);
            }
        } while (norm < 1e-6);
        norm = std::sqrt(norm);
        for (std::size_t c = 0; c < d; ++c) t.at(i, c) /= norm;
    }
    return t;
}

}  // namespace

TEST_CASE("recall_at_k identity and anti-diagonal") {
    Tensor eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    auto [i2t, t2i] = recall_at_k(eye, 1);
    CHECK(i2t == 1.0);
    CHECK(t2i == 1.0);

    Tensor anti({4, 4});
    for (int i = 0; i < 4; ++i) anti.at(i, 3 - i) = 1.0;
    auto [a, b] = recall_at_k(anti, 1);
    CHECK(a == 0.0);
    CHECK(b == 0.0);

    CHECK_THROWS_AS(recall_at_k(Tensor({2, 3}), 1), ShapeError);
}

TEST_CASE("recall_at_k matches an exhaustive rank oracle") {
    Rng rng(71);
    Tensor sims({8, 8});
    for (std::size_t i = 0; i < sims.size(); ++i) sims[i] = rng.next_range(-1.0, 1.0);
    for (std::size_t k = 1; k <= 8; ++k) {
        auto [i2t, t2i] = recall_at_k(sims, k);
        std::size_t expect_i2t = 0, expect_t2i = 0;
        for (std::size_t i = 0; i < 8; ++i) {
            std::size_t row_rank = 1, col_rank = 1;
            for (std::size_t j = 0; j < 8; ++j) {
                if (j == i) continue;
                if (sims.at(i, j) >= sims.at(i, i)) ++row_rank;
                if (sims.at(j, i) >= sims.at(i, i)) ++col_rank;
            }
            if (row_rank <= k) ++expect_i2t;
            if (col_rank <= k) ++expect_t2i;
        }
        CHECK(i2t == static_cast<double>(expect_i2t) / 8.0);
        CHECK(t2i == static_cast<double>(expect_t2i) / 8.0);
    }
    // full-depth recall is always 1
    auto [full_a, full_b] = recall_at_k(sims, 8);
    CHECK(full_a == 1.0);
    CHECK(full_b == 1.0);
}

TEST_CASE("recall is pessimistic about ties and monotone in k") {
    // diagonal ties the best distractor: counted as a miss at k=1
    Tensor tied({2, 2}, {0.5, 0.5, 0.1, 0.9});
    auto [i2t, t2i] = recall_at_k(tied, 1);
    CHECK(i2t == 0.5);  // row 0 misses on the tie, row 1 hits

    Rng rng(72);
    Tensor sims({6, 6});
    for (std::size_t i = 0; i < sims.size(); ++i) sims[i] = rng.next_range(-1.0, 1.0);
    RetrievalResult r = retrieval_recalls(sims);
    CHECK(r.i2t_r1 <= r.i2t_r5);
    CHECK(r.i2t_r5 <= r.i2t_r10);
    CHECK(r.t2i_r1 <= r.t2i_r5);
    CHECK(r.t2i_r5 <= r.t2i_r10);
}

TEST_CASE("metrics are invariant under monotone transforms of similarity") {
    Rng rng(73);
    Tensor sims({7, 7});
    for (std::size_t i = 0; i < sims.size(); ++i) sims[i] = rng.next_range(-1.0, 1.0);
    Tensor warped = sims;
    for (std::size_t i = 0; i < warped.size(); ++i) warped[i] = std::exp(2.0 * warped[i]) + 3.0;
    for (std::size_t k = 1; k <= 7; ++k) {
        auto a = recall_at_k(sims, k);
        auto b = recall_at_k(warped, k);
        CHECK(a.first == b.first);
        CHECK(a.second == b.second);
    }
}

TEST_CASE("bbox classification identities and oracle") {
    Rng rng(74);
    Tensor classes = unit_rows(rng, 5, 6);
    std::vector<std::size_t> identity_labels{0, 1, 2, 3, 4};
    CHECK(bbox_classification_top1(classes, classes, identity_labels) == 1.0);

    // single region orthogonal to every class but its own
    Tensor region({1, 3}, {1.0, 0.0, 0.0});
    Tensor cls({3, 3}, {0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0});
    CHECK(bbox_classification_top1(region, cls, {1}) == 1.0);

    // random regions vs exhaustive argmax oracle
    Tensor regions = unit_rows(rng, 20, 6);
    std::vector<std::size_t> labels(20);
    for (auto& l : labels) l = rng.next_index(5);
    double acc = bbox_classification_top1(regions, classes, labels);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < 20; ++i) {
        std::size_t best = 0;
        double best_sim = -2.0;
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0;
            for (std::size_t c = 0; c < 6; ++c) s += regions.at(i, c) * classes.at(j, c);
            if (s > best_sim) {
                best_sim = s;
                best = j;
            }
        }
        if (best == labels[i]) ++hits;
    }
    CHECK(acc == static_cast<double>(hits) / 20.0);

    CHECK_THROWS_AS(bbox_classification_top1(regions, classes, std::vector<std::size_t>(20, 9)),
                    BadLabelError);
}

TEST_CASE("appending duplicate classes after the label range cannot change accuracy") {
    Rng rng(75);
    Tensor classes = unit_rows(rng, 4, 5);
    Tensor regions = unit_rows(rng, 12, 5);
    std::vector<std::size_t> labels(12);
    for (auto& l : labels) l = rng.next_index(4);
    double base = bbox_classification_top1(regions, classes, labels);

    Tensor extended({8, 5});
    for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t c = 0; c < 5; ++c) {
            extended.at(j, c) = classes.at(j, c);
            extended.at(j + 4, c) = classes.at(j, c);  // duplicates with higher indices
        }
    CHECK(bbox_classification_top1(regions, extended, labels) == base);
}

TEST_CASE("candidate matching is strict about ties") {
    Tensor region({2}, {1.0, 0.0});
    CandidateSet cs;
    cs.positive = 0;
    cs.embeddings = Tensor({11, 2});
    cs.embeddings.at(0, 0) = 1.0;  // positive aligned with the region
    for (std::size_t j = 1; j < 11; ++j) cs.embeddings.at(j, 1) = 1.0;  // orthogonal distractors
    CHECK(candidate_match_top1(region, cs));

    // exact tie with one distractor counts as a miss
    cs.embeddings.at(5, 0) = 1.0;
    cs.embeddings.at(5, 1) = 0.0;
    CHECK(!candidate_match_top1(region, cs));

    CandidateSet wrong;
    wrong.positive = 0;
    wrong.embeddings = Tensor({10, 2});
    CHECK_THROWS_AS(candidate_match_top1(region, wrong), BadCandidateCountError);
}

TEST_CASE("candidate accuracy matches the exhaustive comparison oracle") {
    Rng rng(76);
    std::size_t d = 5;
    std::size_t hits_impl = 0, hits_oracle = 0;
    for (int rep = 0; rep < 50; ++rep) {
        Tensor region = unit_rows(rng, 1, d).reshaped({d});
        CandidateSet cs;
        cs.positive = rng.next_index(11);
        cs.embeddings = unit_rows(rng, 11, d);
        if (candidate_match_top1(region, cs)) ++hits_impl;

        double pos = 0;
        for (std::size_t c = 0; c < d; ++c)
            pos += region[c] * cs.embeddings.at(cs.positive, c);
        bool win = true;
        for (std::size_t j = 0; j < 11; ++j) {
            if (j == cs.positive) continue;
            double s = 0;
            for (std::size_t c = 0; c < d; ++c) s += region[c] * cs.embeddings.at(j, c);
            win &= pos > s;
        }
        if (win) ++hits_oracle;
    }
    CHECK(hits_impl == hits_oracle);
}
