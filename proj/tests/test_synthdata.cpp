#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "duet/synthdata.hpp"

using namespace duet;

namespace {

std::string corpus_text(const Corpus& c) {
    std::ostringstream oss;
    for (const auto& s : c) oss << sample_to_json(s).dump() << '\n';
    return oss.str();
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream oss;
    oss << in.rdbuf();
    return oss.str();
}

std::string temp_path(const char* name) {
    return std::string("synthdata_test_") + name + ".jsonl";
}

}  // namespace

TEST_CASE("corpus generation is seed-deterministic") {
    GenConfig cfg;
    cfg.samples = 12;
    cfg.seed = 7;
    Corpus a = generate_corpus(cfg);
    Corpus b = generate_corpus(cfg);
    CHECK(corpus_text(a) == corpus_text(b));

    cfg.seed = 8;
    Corpus c = generate_corpus(cfg);
    CHECK(corpus_text(a) != corpus_text(c));
}

TEST_CASE("single-region long captions are the phrase plus scene tokens") {
    GenConfig cfg;
    cfg.samples = 6;
    cfg.regions_per_image = 1;
    cfg.seed = 3;
    Corpus corpus = generate_corpus(cfg);
    for (const auto& s : corpus) {
        REQUIRE(s.regions.size() == 1);
        const auto& phrase = s.regions[0].phrase;
        REQUIRE(phrase.size() == 4);
        REQUIRE(s.long_caption.size() == 6);
        CHECK(s.long_caption[0] == phrase[0]);  // shared language prefix
        CHECK(s.long_caption[2] == phrase[1]);
        CHECK(s.long_caption[3] == phrase[2]);
        CHECK(s.long_caption[4] == phrase[3]);
        // the remaining two are scene tokens
        for (std::size_t i : {std::size_t(1), std::size_t(5)}) {
            CHECK(s.long_caption[i] >= cfg.vocab.scene_base());
            CHECK(s.long_caption[i] < cfg.vocab.scene_base() + cfg.vocab.scenes);
        }
    }
}

TEST_CASE("rendered patch codes decode back to the phrase attributes") {
    GenConfig cfg;
    cfg.samples = 100;
    cfg.regions_per_image = 2;
    cfg.seed = 11;
    Corpus corpus = generate_corpus(cfg);
    std::size_t side = static_cast<std::size_t>(cfg.bucket_side / kPatchPixels);
    for (const auto& s : corpus) {
        for (const auto& r : s.regions) {
            // region cell from the box center
            auto i = static_cast<std::size_t>((r.box.y1 + r.box.y2) / 2.0 * side);
            auto j = static_cast<std::size_t>((r.box.x1 + r.box.x2) / 2.0 * side);
            auto decoded = decode_patch(s.image, i, j, cfg.vocab);
            REQUIRE(decoded.has_value());
            CHECK(cfg.vocab.color_base() + decoded->color == r.phrase[1]);
            CHECK(cfg.vocab.count_base() + decoded->count == r.phrase[2]);
            CHECK(cfg.vocab.shape_base() + decoded->shape == r.phrase[3]);
        }
    }
}

TEST_CASE("generated boxes stay off the border sentinel cells") {
    GenConfig cfg;
    cfg.samples = 40;
    cfg.regions_per_image = 3;
    cfg.seed = 5;
    Corpus corpus = generate_corpus(cfg);
    double side = static_cast<double>(cfg.bucket_side / kPatchPixels);
    for (const auto& s : corpus) {
        CHECK(s.image.dim(0) == static_cast<std::size_t>(side));
        CHECK(s.image.dim(1) == static_cast<std::size_t>(side));
        for (const auto& r : s.regions) {
            CHECK(r.box.x1 >= 1.0 / side - 1e-12);
            CHECK(r.box.y1 >= 1.0 / side - 1e-12);
            CHECK(r.box.x2 <= (side - 1.0) / side + 1e-12);
            CHECK(r.box.y2 <= (side - 1.0) / side + 1e-12);
            CHECK(r.hard_negatives.size() == kHardNegatives);
        }
    }
}

TEST_CASE("attribute tuples are unique across the corpus") {
    GenConfig cfg;
    cfg.samples = 32;
    cfg.regions_per_image = 2;
    cfg.seed = 0;
    Corpus corpus = generate_corpus(cfg);
    std::set<std::vector<int>> seen;
    for (const auto& s : corpus)
        for (const auto& r : s.regions) {
            std::vector<int> attrs(r.phrase.begin() + 1, r.phrase.end());
            CHECK(seen.insert(attrs).second);
        }
}

TEST_CASE("generation rejects impossible configurations") {
    GenConfig small;
    small.vocab.colors = 10;
    CHECK_THROWS_AS(generate_corpus(small), VocabTooSmallError);

    GenConfig crowded;
    crowded.regions_per_image = 100;
    CHECK_THROWS_AS(generate_corpus(crowded), ValidationError);

    GenConfig zero;
    zero.regions_per_image = 0;
    CHECK_THROWS_AS(generate_corpus(zero), ValidationError);

    GenConfig bad_bucket;
    bad_bucket.bucket_side = 200;
    CHECK_THROWS_AS(generate_corpus(bad_bucket), ValidationError);
}

TEST_CASE("perturbing a single-slot phrase yields ten distinct colors") {
    AttributeVocab vocab;
    std::vector<int> phrase{vocab.lang_token(0), vocab.color_base() + 4};
    auto negs = perturb_attributes(phrase, vocab, 99);
    REQUIRE(negs.size() == 10);
    std::set<int> values;
    for (const auto& n : negs) {
        REQUIRE(n.size() == phrase.size());
        CHECK(n[0] == phrase[0]);
        CHECK(n[1] != phrase[1]);
        CHECK(vocab.slot_of(n[1]).has_value());
        values.insert(n[1]);
    }
    CHECK(values.size() == 10);  // all distinct replacement colors
}

TEST_CASE("perturbation preserves length and changes exactly one slot token") {
    AttributeVocab vocab;
    Rng rng(123);
    for (int rep = 0; rep < 1000; ++rep) {
        std::vector<int> phrase{vocab.lang_token(static_cast<int>(rng.next_index(2))),
                                vocab.color_base() + static_cast<int>(rng.next_index(11)),
                                vocab.count_base() + static_cast<int>(rng.next_index(11)),
                                vocab.shape_base() + static_cast<int>(rng.next_index(11))};
        auto negs = perturb_attributes(phrase, vocab, rng.next_u64());
        REQUIRE(negs.size() == 10);
        std::set<std::vector<int>> unique(negs.begin(), negs.end());
        CHECK(unique.size() == 10);
        for (const auto& n : negs) {
            REQUIRE(n.size() == phrase.size());
            std::size_t diffs = 0;
            for (std::size_t i = 0; i < n.size(); ++i)
                if (n[i] != phrase[i]) {
                    ++diffs;
                    CHECK(vocab.slot_of(phrase[i]).has_value());
                    CHECK(vocab.slot_of(n[i]) == vocab.slot_of(phrase[i]));
                }
            CHECK(diffs == 1);
        }
    }
}

TEST_CASE("perturbation requires a perturbable slot") {
    AttributeVocab vocab;
    std::vector<int> no_slots{vocab.lang_token(0), vocab.scene_base() + 1};
    CHECK_THROWS_AS(perturb_attributes(no_slots, vocab, 1), NoSlotError);
}

TEST_CASE("corpus round trip is byte-identical") {
    GenConfig cfg;
    cfg.samples = 10;
    cfg.seed = 17;
    Corpus corpus = generate_corpus(cfg);
    std::string p1 = temp_path("rt1"), p2 = temp_path("rt2");
    save_corpus(corpus, p1);
    Corpus loaded = load_corpus(p1);
    save_corpus(loaded, p2);
    CHECK(read_file(p1) == read_file(p2));
    REQUIRE(loaded.size() == corpus.size());
    CHECK(loaded[3].short_caption == corpus[3].short_caption);
    CHECK(loaded[3].image == corpus[3].image);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("loader reports schema violations with line numbers") {
    GenConfig cfg;
    cfg.samples = 2;
    cfg.seed = 1;
    Corpus corpus = generate_corpus(cfg);
    nlohmann::json good = sample_to_json(corpus[0]);

    std::string path = temp_path("parse");
    {
        nlohmann::json bad = sample_to_json(corpus[1]);
        bad["regions"][0].erase("hard_negatives");
        std::ofstream out(path, std::ios::binary);
        out << good.dump() << '\n' << bad.dump() << '\n';
    }
    try {
        load_corpus(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
        CHECK(std::string(e.what()).find("hard_negatives") != std::string::npos);
    }

    {
        std::ofstream out(path, std::ios::binary);
        out << good.dump() << '\n' << "{not json" << '\n';
    }
    CHECK_THROWS_AS(load_corpus(path), ParseError);
    std::remove(path.c_str());
}

TEST_CASE("loader enforces the caption and negative-count invariants") {
    GenConfig cfg;
    cfg.samples = 1;
    cfg.seed = 2;
    Corpus corpus = generate_corpus(cfg);
    std::string path = temp_path("validate");

    {
        nlohmann::json j = sample_to_json(corpus[0]);
        j["long_caption"] = std::vector<int>(197, 1);
        std::ofstream out(path, std::ios::binary);
        out << j.dump() << '\n';
    }
    try {
        load_corpus(path);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(e.line() == 1);
        CHECK(std::string(e.what()).find("196") != std::string::npos);
    }

    {
        nlohmann::json j = sample_to_json(corpus[0]);
        j["regions"][0]["hard_negatives"].erase(9);  // down to 9 negatives
        std::ofstream out(path, std::ios::binary);
        out << j.dump() << '\n';
    }
    try {
        load_corpus(path);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(e.line() == 1);
        CHECK(std::string(e.what()).find("9") != std::string::npos);
    }

    {
        nlohmann::json j = sample_to_json(corpus[0]);
        j["regions"][0]["box"] = {0.5, 0.2, 0.5, 0.8};  // degenerate
        std::ofstream out(path, std::ios::binary);
        out << j.dump() << '\n';
    }
    CHECK_THROWS_AS(load_corpus(path), ValidationError);
    std::remove(path.c_str());
}
