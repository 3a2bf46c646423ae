#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "duet/errors.hpp"
#include "duet/model.hpp"
#include "duet/tensor.hpp"

namespace duet {

// Checkpoint layout: <dir>/manifest.json lists every parameter's name, shape
// and byte offset into <dir>/params.bin, a raw little-endian float64 array in
// manifest order. The manifest also embeds the model configuration so a
// checkpoint is self-describing.

namespace detail {

inline void write_le_doubles(std::ofstream& out, const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(t[i]);
        unsigned char bytes[8];
        for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
        out.write(reinterpret_cast<const char*>(bytes), 8);
    }
}

inline double read_le_double(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
    return std::bit_cast<double>(bits);
}

}  // namespace detail

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["embed_dim"] = c.embed_dim;
    j["patch_channels"] = c.patch_channels;
    j["dense_layers"] = c.dense_layers;
    j["vocab_size"] = c.vocab_size;
    j["image_positional"] = c.image_positional;
    j["fgt_negatives"] = c.fgt_negatives;
    j["init_scale"] = c.init_scale;
    j["t_prime_init"] = c.t_prime_init;
    j["bias_init"] = c.bias_init;
    j["tic_mean"] = c.tic_mean;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.embed_dim = j.at("embed_dim").get<std::size_t>();
    c.patch_channels = j.at("patch_channels").get<std::size_t>();
    c.dense_layers = j.at("dense_layers").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.image_positional = j.at("image_positional").get<bool>();
    c.fgt_negatives = j.at("fgt_negatives").get<std::size_t>();
    c.init_scale = j.at("init_scale").get<double>();
    c.t_prime_init = j.at("t_prime_init").get<double>();
    c.bias_init = j.at("bias_init").get<double>();
    c.tic_mean = j.at("tic_mean").get<bool>();
    return c;
}

/// Atomic checkpoint write: data and manifest land under temporary names and
/// are renamed into place, manifest last.
inline void save_checkpoint(const Model& model, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    fs::path data_tmp = fs::path(dir) / "params.bin.tmp";
    fs::path data_final = fs::path(dir) / "params.bin";
    fs::path manifest_tmp = fs::path(dir) / "manifest.json.tmp";
    fs::path manifest_final = fs::path(dir) / "manifest.json";

    nlohmann::json entries = nlohmann::json::array();
    {
        std::ofstream out(data_tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + data_tmp.string());
        std::size_t offset = 0;
        for (const auto& [name, t] : model.params()) {
            nlohmann::json e;
            e["name"] = name;
            e["shape"] = t.shape();
            e["offset"] = offset;
            entries.push_back(std::move(e));
            detail::write_le_doubles(out, t);
            offset += t.size() * 8;
        }
        if (!out) throw IoError("failed while writing " + data_tmp.string());
    }
    nlohmann::json manifest;
    manifest["format"] = "duet-checkpoint-v1";
    manifest["dtype"] = "float64-le";
    manifest["data_file"] = "params.bin";
    manifest["config"] = model_config_to_json(model.config());
    manifest["params"] = std::move(entries);
    {
        std::ofstream out(manifest_tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + manifest_tmp.string());
        out << manifest.dump(2) << '\n';
        if (!out) throw IoError("failed while writing " + manifest_tmp.string());
    }
    fs::rename(data_tmp, data_final);
    fs::rename(manifest_tmp, manifest_final);
}

inline Model load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::path manifest_path = fs::path(dir) / "manifest.json";
    if (!fs::exists(manifest_path))
        throw MissingCheckpointError("no checkpoint manifest at " + manifest_path.string());
    std::ifstream mf(manifest_path);
    nlohmann::json manifest = nlohmann::json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) throw IoError("corrupt manifest at " + manifest_path.string());
    if (manifest.value("format", "") != "duet-checkpoint-v1")
        throw IoError("unrecognized checkpoint format");
    ModelConfig cfg = model_config_from_json(manifest.at("config"));
    fs::path data_path = fs::path(dir) / manifest.at("data_file").get<std::string>();
    std::ifstream data(data_path, std::ios::binary);
    if (!data) throw MissingCheckpointError("missing checkpoint data at " + data_path.string());

    ParamMap params;
    for (const auto& e : manifest.at("params")) {
        std::string name = e.at("name").get<std::string>();
        std::vector<std::size_t> shape = e.at("shape").get<std::vector<std::size_t>>();
        std::size_t offset = e.at("offset").get<std::size_t>();
        std::size_t n = Tensor::count(shape);
        data.seekg(static_cast<std::streamoff>(offset));
        std::vector<double> values(n);
        for (std::size_t i = 0; i < n; ++i) values[i] = detail::read_le_double(data);
        if (!data) throw IoError("checkpoint data truncated reading " + name);
        params[name] = Tensor(std::move(shape), std::move(values));
    }
    return Model::from_params(cfg, std::move(params));
}

}  // namespace duet
