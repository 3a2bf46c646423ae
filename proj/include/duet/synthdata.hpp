#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "duet/encoder.hpp"
#include "duet/errors.hpp"
#include "duet/region.hpp"
#include "duet/rng.hpp"
#include "duet/tensor.hpp"

namespace duet {

inline constexpr std::size_t kHardNegatives = 10;
inline constexpr int kPatchPixels = 16;   // bucket side / patch side = patch grid side
inline constexpr std::size_t kPatchChannels = 5;  // color, count, shape, occupancy, scene

/// Token-id layout for the toy vocabulary: two language prefixes, then the
/// three perturbable attribute slots, then scene tokens. Each perturbable slot
/// needs at least 11 values so 10 distinct single-token negatives always exist.
struct AttributeVocab {
    int colors = 11;
    int counts = 11;
    int shapes = 11;
    int scenes = 8;
    int vocab_size = 64;

    enum class Slot { Color, Count, Shape };

    int lang_token(int lang) const { return lang; }
    int color_base() const { return 2; }
    int count_base() const { return 2 + colors; }
    int shape_base() const { return 2 + colors + counts; }
    int scene_base() const { return 2 + colors + counts + shapes; }
    int required_size() const { return scene_base() + scenes; }

    int slot_base(Slot s) const {
        switch (s) {
            case Slot::Color: return color_base();
            case Slot::Count: return count_base();
            default: return shape_base();
        }
    }
    int slot_size(Slot s) const {
        switch (s) {
            case Slot::Color: return colors;
            case Slot::Count: return counts;
            default: return shapes;
        }
    }

    std::optional<Slot> slot_of(int token) const {
        if (token >= color_base() && token < color_base() + colors) return Slot::Color;
        if (token >= count_base() && token < count_base() + counts) return Slot::Count;
        if (token >= shape_base() && token < shape_base() + shapes) return Slot::Shape;
        return std::nullopt;
    }

    void validate() const {
        if (colors < 11 || counts < 11 || shapes < 11)
            throw VocabTooSmallError("each perturbable slot needs at least 11 values");
        if (scenes < 1) throw VocabTooSmallError("need at least one scene token");
        if (vocab_size < required_size())
            throw VocabTooSmallError("vocab_size " + std::to_string(vocab_size) +
                                     " below required " + std::to_string(required_size()));
    }
};

struct SynthRegion {
    Box box;
    std::vector<int> phrase;
    std::vector<std::vector<int>> hard_negatives;  // exactly 10, single-token edits
};

struct Sample {
    Tensor image;  // side x side x kPatchChannels patch values
    int lang = 0;
    std::vector<int> short_caption;
    std::vector<int> long_caption;
    std::vector<SynthRegion> regions;
};

using Corpus = std::vector<Sample>;

struct GenConfig {
    std::size_t samples = 32;
    std::uint64_t seed = 0;
    std::size_t regions_per_image = 2;
    int bucket_side = 128;
    ResolutionBuckets buckets = ResolutionBuckets::defaults();
    AttributeVocab vocab{};
};

/// Attribute indices carried by one rendered region cell.
struct PatchAttributes {
    int color = 0, count = 0, shape = 0;
};

/// Inverse of the rendering map: reads the attribute indices back out of a
/// patch, or nothing for background cells.
inline std::optional<PatchAttributes> decode_patch(const Tensor& image, std::size_t i,
                                                   std::size_t j, const AttributeVocab& vocab) {
    if (image.at(i, j, 3) < 0.5) return std::nullopt;
    PatchAttributes a;
    a.color = static_cast<int>(std::lround(image.at(i, j, 0) * vocab.colors)) - 1;
    a.count = static_cast<int>(std::lround(image.at(i, j, 1) * vocab.counts)) - 1;
    a.shape = static_cast<int>(std::lround(image.at(i, j, 2) * vocab.shapes)) - 1;
    return a;
}

/// 10 hard negatives for a phrase: each differs from the original in exactly
/// one attribute slot token, all mutually distinct, slots cycled round-robin.
inline std::vector<std::vector<int>> perturb_attributes(const std::vector<int>& phrase,
                                                        const AttributeVocab& vocab,
                                                        std::uint64_t seed) {
    vocab.validate();
    std::vector<std::size_t> slot_positions;
    for (std::size_t i = 0; i < phrase.size(); ++i)
        if (vocab.slot_of(phrase[i])) slot_positions.push_back(i);
    if (slot_positions.empty()) throw NoSlotError("phrase has no perturbable attribute slot");

    Rng rng(seed);
    // shuffled alternative values per slot position, originals excluded
    std::vector<std::vector<int>> alternatives(slot_positions.size());
    for (std::size_t s = 0; s < slot_positions.size(); ++s) {
        int token = phrase[slot_positions[s]];
        auto slot = *vocab.slot_of(token);
        for (int v = 0; v < vocab.slot_size(slot); ++v) {
            int candidate = vocab.slot_base(slot) + v;
            if (candidate != token) alternatives[s].push_back(candidate);
        }
        rng.shuffle(alternatives[s]);
    }
    std::vector<std::size_t> used(slot_positions.size(), 0);
    std::vector<std::vector<int>> negatives;
    negatives.reserve(kHardNegatives);
    for (std::size_t n = 0; n < kHardNegatives; ++n) {
        std::size_t s = n % slot_positions.size();
        if (used[s] >= alternatives[s].size())
            throw VocabTooSmallError("slot exhausted while generating negatives");
        std::vector<int> neg = phrase;
        neg[slot_positions[s]] = alternatives[s][used[s]++];
        negatives.push_back(std::move(neg));
    }
    return negatives;
}

/// Deterministic synthetic corpus. Every image is a pure function of its
/// regions' attribute tokens: region cells carry normalized attribute codes,
/// background cells carry the scene code, and the one-patch border stays
/// empty so RoIAlign never clamps on generated boxes. Attribute tuples are
/// sampled without replacement across the whole corpus, which makes captions
/// unique and the corpus memorizable.
inline Corpus generate_corpus(const GenConfig& cfg) {
    cfg.vocab.validate();
    cfg.buckets.validate();
    if (cfg.regions_per_image < 1) throw ValidationError("regions_per_image must be >= 1");
    bool known_bucket = false;
    for (int side : cfg.buckets.sides) known_bucket |= (side == cfg.bucket_side);
    if (!known_bucket || cfg.bucket_side % kPatchPixels != 0)
        throw ValidationError("bucket_side must be a known bucket divisible by patch size");
    std::size_t side = static_cast<std::size_t>(cfg.bucket_side / kPatchPixels);
    if (side < 4) throw ValidationError("patch grid too small for a bordered layout");

    // interior lattice on every other cell, one-cell border excluded
    std::vector<std::pair<std::size_t, std::size_t>> lattice;
    for (std::size_t r = 1; r + 1 < side; r += 2)
        for (std::size_t c = 1; c + 1 < side; c += 2) lattice.emplace_back(r, c);
    if (cfg.regions_per_image > lattice.size())
        throw ValidationError("regions_per_image exceeds layout capacity of " +
                              std::to_string(lattice.size()));

    std::size_t combos = static_cast<std::size_t>(cfg.vocab.colors) * cfg.vocab.counts *
                         cfg.vocab.shapes;
    std::size_t needed = cfg.samples * cfg.regions_per_image;
    if (needed > combos)
        throw ValidationError("corpus needs " + std::to_string(needed) +
                              " unique attribute tuples but only " + std::to_string(combos) +
                              " exist");

    Rng rng(cfg.seed);
    std::vector<std::array<int, 3>> tuples;
    tuples.reserve(combos);
    for (int c = 0; c < cfg.vocab.colors; ++c)
        for (int n = 0; n < cfg.vocab.counts; ++n)
            for (int s = 0; s < cfg.vocab.shapes; ++s) tuples.push_back({c, n, s});
    rng.shuffle(tuples);

    Corpus corpus;
    corpus.reserve(cfg.samples);
    std::size_t tuple_at = 0;
    for (std::size_t idx = 0; idx < cfg.samples; ++idx) {
        Sample sample;
        sample.lang = static_cast<int>(idx % 2);
        int lang_tok = cfg.vocab.lang_token(sample.lang);
        int scene_a = static_cast<int>(rng.next_index(static_cast<std::size_t>(cfg.vocab.scenes)));
        int scene_b = static_cast<int>(rng.next_index(static_cast<std::size_t>(cfg.vocab.scenes)));
        double scene_code = static_cast<double>(scene_a + 1) / cfg.vocab.scenes;

        sample.image = Tensor({side, side, kPatchChannels});
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) sample.image.at(r, c, 4) = scene_code;

        auto cells = lattice;
        rng.shuffle(cells);
        cells.resize(cfg.regions_per_image);
        std::sort(cells.begin(), cells.end());

        sample.short_caption.push_back(lang_tok);
        sample.long_caption.push_back(lang_tok);
        sample.long_caption.push_back(cfg.vocab.scene_base() + scene_a);

        for (std::size_t ri = 0; ri < cfg.regions_per_image; ++ri) {
            auto [r, c] = cells[ri];
            auto [color, count, shape] = tuples[tuple_at++];
            sample.image.at(r, c, 0) = static_cast<double>(color + 1) / cfg.vocab.colors;
            sample.image.at(r, c, 1) = static_cast<double>(count + 1) / cfg.vocab.counts;
            sample.image.at(r, c, 2) = static_cast<double>(shape + 1) / cfg.vocab.shapes;
            sample.image.at(r, c, 3) = 1.0;
            sample.image.at(r, c, 4) = 0.0;

            SynthRegion region;
            region.box = Box{static_cast<double>(c) / side, static_cast<double>(r) / side,
                             static_cast<double>(c + 1) / side, static_cast<double>(r + 1) / side};
            region.phrase = {lang_tok, cfg.vocab.color_base() + color,
                             cfg.vocab.count_base() + count, cfg.vocab.shape_base() + shape};
            region.hard_negatives = perturb_attributes(region.phrase, cfg.vocab, rng.next_u64());
            for (std::size_t t = 1; t < region.phrase.size(); ++t) {
                sample.short_caption.push_back(region.phrase[t]);
                sample.long_caption.push_back(region.phrase[t]);
            }
            sample.regions.push_back(std::move(region));
        }
        sample.long_caption.push_back(cfg.vocab.scene_base() + scene_b);
        if (sample.long_caption.size() > kMaxTextLen)
            throw ValidationError("generated long caption exceeds 196 tokens");
        corpus.push_back(std::move(sample));
    }
    return corpus;
}

namespace detail {

inline std::vector<int> read_id_list(const nlohmann::json& j, const char* key,
                                     std::size_t line) {
    if (!j.contains(key)) throw ParseError(line, std::string("missing \"") + key + "\"");
    const auto& arr = j.at(key);
    if (!arr.is_array()) throw ParseError(line, std::string("\"") + key + "\" must be an array");
    std::vector<int> ids;
    ids.reserve(arr.size());
    for (const auto& v : arr) {
        if (!v.is_number_integer())
            throw ParseError(line, std::string("\"") + key + "\" must hold integer token ids");
        int id = v.get<int>();
        if (id < 0) throw ValidationError(line, "negative token id");
        ids.push_back(id);
    }
    return ids;
}

inline void validate_sample(const Sample& s, std::size_t line) {
    std::size_t h = s.image.dim(0), w = s.image.dim(1);
    if (h != w) throw ValidationError(line, "image patch grid must be square");
    bool bucket_ok = false;
    for (int side : ResolutionBuckets::defaults().sides)
        bucket_ok |= (side % kPatchPixels == 0 &&
                      static_cast<std::size_t>(side / kPatchPixels) == h);
    if (!bucket_ok)
        throw ValidationError(line, "image dimensions match no resolution bucket layout");
    if (s.lang != 0 && s.lang != 1) throw ValidationError(line, "lang must be 0 or 1");
    if (s.short_caption.empty()) throw ValidationError(line, "short_caption is empty");
    if (s.long_caption.empty()) throw ValidationError(line, "long_caption is empty");
    if (s.long_caption.size() > kMaxTextLen)
        throw ValidationError(line, "long_caption length " +
                                        std::to_string(s.long_caption.size()) +
                                        " exceeds the 196-token limit");
    for (const auto& r : s.regions) {
        try {
            r.box.validate();
        } catch (const InvalidBoxError& e) {
            throw ValidationError(line, e.what());
        }
        if (r.phrase.empty()) throw ValidationError(line, "region phrase is empty");
        if (r.hard_negatives.size() != kHardNegatives)
            throw ValidationError(line, "region has " + std::to_string(r.hard_negatives.size()) +
                                            " hard negatives, expected exactly " +
                                            std::to_string(kHardNegatives));
        for (const auto& neg : r.hard_negatives) {
            if (neg.size() != r.phrase.size())
                throw ValidationError(line, "hard negative length differs from phrase length");
            if (neg == r.phrase)
                throw ValidationError(line, "hard negative equals the phrase");
        }
    }
}

}  // namespace detail

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json j;
    std::size_t h = s.image.dim(0), w = s.image.dim(1), p = s.image.dim(2);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < h; ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t c = 0; c < w; ++c) {
            nlohmann::json patch = nlohmann::json::array();
            for (std::size_t k = 0; k < p; ++k) patch.push_back(s.image.at(r, c, k));
            row.push_back(std::move(patch));
        }
        rows.push_back(std::move(row));
    }
    j["image"] = std::move(rows);
    j["lang"] = s.lang;
    j["short_caption"] = s.short_caption;
    j["long_caption"] = s.long_caption;
    nlohmann::json regions = nlohmann::json::array();
    for (const auto& r : s.regions) {
        nlohmann::json jr;
        jr["box"] = {r.box.x1, r.box.y1, r.box.x2, r.box.y2};
        jr["phrase"] = r.phrase;
        jr["hard_negatives"] = r.hard_negatives;
        regions.push_back(std::move(jr));
    }
    j["regions"] = std::move(regions);
    return j;
}

inline Sample sample_from_json(const nlohmann::json& j, std::size_t line) {
    if (!j.is_object()) throw ParseError(line, "expected a JSON object");
    for (const char* key : {"image", "lang", "short_caption", "long_caption", "regions"})
        if (!j.contains(key)) throw ParseError(line, std::string("missing \"") + key + "\"");
    Sample s;
    const auto& img = j.at("image");
    if (!img.is_array() || img.empty() || !img[0].is_array() || img[0].empty() ||
        !img[0][0].is_array())
        throw ParseError(line, "\"image\" must be a 3-level nested array");
    std::size_t h = img.size(), w = img[0].size(), p = img[0][0].size();
    std::vector<double> data;
    data.reserve(h * w * p);
    for (const auto& row : img) {
        if (!row.is_array() || row.size() != w)
            throw ParseError(line, "ragged image rows");
        for (const auto& patch : row) {
            if (!patch.is_array() || patch.size() != p)
                throw ParseError(line, "ragged patch channels");
            for (const auto& v : patch) {
                if (!v.is_number()) throw ParseError(line, "image values must be numbers");
                data.push_back(v.get<double>());
            }
        }
    }
    try {
        s.image = Tensor({h, w, p}, std::move(data));
    } catch (const NonFiniteError& e) {
        throw ValidationError(line, e.what());
    }
    if (!j.at("lang").is_number_integer()) throw ParseError(line, "\"lang\" must be an integer");
    s.lang = j.at("lang").get<int>();
    s.short_caption = detail::read_id_list(j, "short_caption", line);
    s.long_caption = detail::read_id_list(j, "long_caption", line);
    const auto& regions = j.at("regions");
    if (!regions.is_array()) throw ParseError(line, "\"regions\" must be an array");
    for (const auto& jr : regions) {
        if (!jr.is_object()) throw ParseError(line, "region entries must be objects");
        for (const char* key : {"box", "phrase", "hard_negatives"})
            if (!jr.contains(key)) throw ParseError(line, std::string("missing \"") + key + "\"");
        SynthRegion r;
        const auto& box = jr.at("box");
        if (!box.is_array() || box.size() != 4 || !box[0].is_number())
            throw ParseError(line, "\"box\" must be [x1,y1,x2,y2]");
        r.box = Box{box[0].get<double>(), box[1].get<double>(), box[2].get<double>(),
                    box[3].get<double>()};
        r.phrase = detail::read_id_list(jr, "phrase", line);
        const auto& negs = jr.at("hard_negatives");
        if (!negs.is_array()) throw ParseError(line, "\"hard_negatives\" must be an array");
        for (const auto& jn : negs) {
            nlohmann::json holder;
            holder["n"] = jn;
            r.hard_negatives.push_back(detail::read_id_list(holder, "n", line));
        }
        s.regions.push_back(std::move(r));
    }
    detail::validate_sample(s, line);
    return s;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const auto& s : corpus) out << sample_to_json(s).dump() << '\n';
    if (!out) throw IoError("failed while writing " + path);
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    Corpus corpus;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded()) throw ParseError(line, "invalid JSON");
        corpus.push_back(sample_from_json(j, line));
    }
    return corpus;
}

}  // namespace duet
