#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "duet/grad_check.hpp"
#include "duet/model.hpp"
#include "duet/synthdata.hpp"

using namespace duet;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.embed_dim = 6;
    cfg.dense_layers = 1;
    cfg.vocab_size = 64;
    return cfg;
}

Corpus tiny_corpus(std::size_t samples, std::size_t regions, std::uint64_t seed) {
    GenConfig gc;
    gc.samples = samples;
    gc.regions_per_image = regions;
    gc.seed = seed;
    return generate_corpus(gc);
}

GradFunction batch_loss_fn(const ModelConfig& cfg, const Corpus& corpus,
                           const std::vector<std::size_t>& batch, int stage,
                           const LossWeights& w, const MarginState& margins) {
    return [=, &corpus](const ParamMap& p) {
        BatchGradResult r = batch_gradient(p, cfg, corpus, batch, stage, w, margins);
        GradPair g;
        g.value = r.losses.total.value;
        g.grads = std::move(r.grads);
        return g;
    };
}

}  // namespace

TEST_CASE("stage-1 end-to-end parameter gradient matches finite differences") {
    ModelConfig cfg = tiny_config();
    Corpus corpus = tiny_corpus(4, 1, 2);
    Model model = Model::init(cfg, 5);
    std::vector<std::size_t> batch{0, 1, 2, 3};
    MarginState margins = MarginState::initial(cfg.fgt_negatives);
    GradFunction f = batch_loss_fn(cfg, corpus, batch, 1, LossWeights{}, margins);
    double err = finite_diff_check(f, model.params(), {.step = 1e-5, .max_coords_per_param = 24});
    CHECK(err < 1e-4);
}

TEST_CASE("stage-2 total loss parameter gradient matches finite differences") {
    ModelConfig cfg = tiny_config();
    Corpus corpus = tiny_corpus(4, 2, 3);
    Model model = Model::init(cfg, 7);
    std::vector<std::size_t> batch{0, 1, 2, 3};

    // margins from one warmup evaluation, as in a real second step
    MarginState m0 = MarginState::initial(cfg.fgt_negatives);
    BatchGradResult warm =
        batch_gradient(model.params(), cfg, corpus, batch, 2, LossWeights{}, m0);
    MarginState margins = cmr_update_margins(warm.losses.pos_sims, warm.losses.neg_sims, m0);

    // probe point must sit clear of every CMR hinge kink
    BatchGradResult probe =
        batch_gradient(model.params(), cfg, corpus, batch, 2, LossWeights{}, margins);
    for (std::size_t i = 0; i < probe.losses.pos_sims.size(); ++i)
        for (std::size_t k = 0; k < cfg.fgt_negatives; ++k) {
            double term = probe.losses.neg_sims.at(i, k) - probe.losses.pos_sims[i] +
                          margins.tau[k];
            REQUIRE(std::abs(term) > 1e-4);
        }

    GradFunction f = batch_loss_fn(cfg, corpus, batch, 2, LossWeights{}, margins);
    double err = finite_diff_check(f, model.params(), {.step = 1e-5, .max_coords_per_param = 16});
    CHECK(err < 1e-4);
}

TEST_CASE("stage-1 gradients for the dense regional stack are exactly zero") {
    ModelConfig cfg = tiny_config();
    cfg.dense_layers = 2;
    Corpus corpus = tiny_corpus(4, 1, 4);
    Model model = Model::init(cfg, 9);
    MarginState margins = MarginState::initial(cfg.fgt_negatives);
    BatchGradResult r = batch_gradient(model.params(), cfg, corpus, {0, 1, 2, 3}, 1,
                                       LossWeights{}, margins);
    for (const auto& [name, g] : r.grads) {
        if (name.rfind("img.dense", 0) == 0) {
            for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
        }
    }
    // while the shared projection and global head do receive gradient
    double proj_mag = 0.0;
    for (std::size_t i = 0; i < r.grads.at("img.proj").size(); ++i)
        proj_mag += std::abs(r.grads.at("img.proj")[i]);
    CHECK(proj_mag > 0.0);
}

TEST_CASE("stage-2 activates gradients on the dense stack") {
    ModelConfig cfg = tiny_config();
    Corpus corpus = tiny_corpus(4, 2, 4);
    Model model = Model::init(cfg, 9);
    MarginState margins = MarginState::initial(cfg.fgt_negatives);
    BatchGradResult r = batch_gradient(model.params(), cfg, corpus, {0, 1, 2, 3}, 2,
                                       LossWeights{}, margins);
    double mag = 0.0;
    for (const auto& [name, g] : r.grads)
        if (name.rfind("img.dense", 0) == 0)
            for (std::size_t i = 0; i < g.size(); ++i) mag += std::abs(g[i]);
    CHECK(mag > 0.0);
}

TEST_CASE("gathered embeddings preserve sample-major region order") {
    ModelConfig cfg = tiny_config();
    Corpus corpus = tiny_corpus(3, 2, 6);
    Model model = Model::init(cfg, 11);
    ImageEncoderParams ip = image_params_from(model.params(), cfg);
    TextEncoderParams tp = text_params_from(model.params());
    std::vector<SampleActivations> acts;
    for (std::size_t i = 0; i < 3; ++i)
        acts.push_back(forward_sample(corpus[i], ip, tp, 2, cfg.fgt_negatives));
    BatchEmbeddings b = gather_embeddings(acts, 2, cfg.fgt_negatives, cfg.embed_dim);
    REQUIRE(b.region_refs.size() == 6);
    for (std::size_t r = 0; r < 6; ++r) {
        CHECK(b.region_refs[r].sample == r / 2);
        CHECK(b.region_refs[r].region == r % 2);
        for (std::size_t c = 0; c < cfg.embed_dim; ++c)
            CHECK(b.regions.at(r, c) == acts[r / 2].region_caches[r % 2].unit[c]);
    }
    // all gathered rows are unit norm
    for (std::size_t i = 0; i < b.img.rows(); ++i)
        CHECK(std::abs(norm2(b.img.data() + i * cfg.embed_dim, cfg.embed_dim) - 1.0) < 1e-12);
}

TEST_CASE("param hash detects any single-coordinate change") {
    Model a = Model::init(tiny_config(), 1);
    Model b = Model::init(tiny_config(), 1);
    CHECK(param_hash(a.params()) == param_hash(b.params()));
    b.params().at("txt.tok")[7] += 1e-12;
    CHECK(param_hash(a.params()) != param_hash(b.params()));
}

TEST_CASE("model initialization is seed-deterministic") {
    Model a = Model::init(tiny_config(), 42);
    Model b = Model::init(tiny_config(), 42);
    Model c = Model::init(tiny_config(), 43);
    CHECK(param_hash(a.params()) == param_hash(b.params()));
    CHECK(param_hash(a.params()) != param_hash(c.params()));
    CHECK(a.params().at("loss.t")[0] == Catch::Approx(std::log(10.0)).margin(1e-15));
    CHECK(a.params().at("loss.b")[0] == -10.0);
}
