#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "duet/checkpoint.hpp"
#include "duet/model.hpp"

using namespace duet;

namespace {

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const char* name)
        : path(std::filesystem::temp_directory_path() / name) {
        std::filesystem::remove_all(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("checkpoint round trip restores parameters and config exactly") {
    ModelConfig cfg;
    cfg.embed_dim = 8;
    cfg.dense_layers = 2;
    cfg.tic_mean = true;
    Model model = Model::init(cfg, 99);
    TempDir dir("duet_ckpt_rt");
    save_checkpoint(model, dir.str());

    Model loaded = load_checkpoint(dir.str());
    CHECK(loaded.config().embed_dim == 8);
    CHECK(loaded.config().dense_layers == 2);
    CHECK(loaded.config().tic_mean == true);
    REQUIRE(loaded.params().size() == model.params().size());
    for (const auto& [name, t] : model.params()) CHECK(loaded.params().at(name) == t);
    CHECK(param_hash(loaded.params()) == param_hash(model.params()));

    // no temporary files left behind
    CHECK(!std::filesystem::exists(std::filesystem::path(dir.str()) / "params.bin.tmp"));
    CHECK(!std::filesystem::exists(std::filesystem::path(dir.str()) / "manifest.json.tmp"));
}

TEST_CASE("manifest offsets index the raw little-endian array") {
    ModelConfig cfg;
    cfg.embed_dim = 4;
    Model model = Model::init(cfg, 7);
    TempDir dir("duet_ckpt_manifest");
    save_checkpoint(model, dir.str());

    std::ifstream mf(std::filesystem::path(dir.str()) / "manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    CHECK(manifest.at("dtype") == "float64-le");

    std::ifstream data(std::filesystem::path(dir.str()) / "params.bin", std::ios::binary);
    std::size_t expected_offset = 0;
    for (const auto& e : manifest.at("params")) {
        std::string name = e.at("name").get<std::string>();
        std::size_t offset = e.at("offset").get<std::size_t>();
        CHECK(offset == expected_offset);
        const Tensor& t = model.params().at(name);
        // first element at the recorded offset decodes to the parameter value
        data.seekg(static_cast<std::streamoff>(offset));
        unsigned char bytes[8];
        data.read(reinterpret_cast<char*>(bytes), 8);
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
        CHECK(std::bit_cast<double>(bits) == t[0]);
        expected_offset += t.size() * 8;
    }
    CHECK(std::filesystem::file_size(std::filesystem::path(dir.str()) / "params.bin") ==
          expected_offset);
}

TEST_CASE("missing and corrupt checkpoints are reported") {
    TempDir dir("duet_ckpt_missing");
    CHECK_THROWS_AS(load_checkpoint(dir.str() + "/nowhere"), MissingCheckpointError);

    std::filesystem::create_directories(dir.str());
    std::ofstream(std::filesystem::path(dir.str()) / "manifest.json") << "{broken";
    CHECK_THROWS_AS(load_checkpoint(dir.str()), IoError);
}

TEST_CASE("checkpoint files are byte-identical across saves") {
    Model model = Model::init(ModelConfig{}, 3);
    TempDir d1("duet_ckpt_a"), d2("duet_ckpt_b");
    save_checkpoint(model, d1.str());
    save_checkpoint(model, d2.str());
    auto read = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
    };
    CHECK(read(std::filesystem::path(d1.str()) / "params.bin") ==
          read(std::filesystem::path(d2.str()) / "params.bin"));
    CHECK(read(std::filesystem::path(d1.str()) / "manifest.json") ==
          read(std::filesystem::path(d2.str()) / "manifest.json"));
}
