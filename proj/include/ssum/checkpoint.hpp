#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssum/model.hpp"

namespace ssum {

// Checkpoint container:
//   "DFCK" | u16 LE format version | u32 LE manifest length |
//   manifest (UTF-8 JSON: model config + group names/shapes/frozen flags) |
//   raw little-endian f64 parameter data in manifest order.
inline constexpr char kCheckpointMagic[4] = {'D', 'F', 'C', 'K'};
inline constexpr u16 kCheckpointVersion = 1;

namespace detail {

using ordered_json = nlohmann::ordered_json;

inline ordered_json config_to_json(const ModelConfig& c) {
    ordered_json j;
    j["vocab"] = {{"size", c.vocab.size}, {"pad", c.vocab.pad}, {"bos", c.vocab.bos},
                  {"eos", c.vocab.eos},   {"sep", c.vocab.sep}};
    j["d_audio"] = c.d_audio;
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["max_ctx"] = c.max_ctx;
    j["lora_rank"] = c.lora_rank;
    j["lora_alpha"] = c.lora_alpha;
    j["init_seed"] = c.init_seed;
    return j;
}

inline ModelConfig config_from_json(const ordered_json& j) {
    ModelConfig c;
    const auto& v = j.at("vocab");
    c.vocab.size = v.at("size").get<int>();
    c.vocab.pad = v.at("pad").get<Token>();
    c.vocab.bos = v.at("bos").get<Token>();
    c.vocab.eos = v.at("eos").get<Token>();
    c.vocab.sep = v.at("sep").get<Token>();
    c.d_audio = j.at("d_audio").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.max_ctx = j.at("max_ctx").get<int>();
    c.lora_rank = j.at("lora_rank").get<int>();
    c.lora_alpha = j.at("lora_alpha").get<double>();
    c.init_seed = j.at("init_seed").get<u64>();
    return c;
}

template <typename T>
void append_le(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

}  // namespace detail

inline std::string checkpoint_bytes(const ModelParams& p) {
    detail::ordered_json manifest;
    manifest["model"] = detail::config_to_json(p.cfg());
    auto& groups = manifest["groups"] = detail::ordered_json::array();
    for (std::size_t i = 0; i < p.num_groups(); ++i) {
        const ParamGroup& g = p.group(i);
        groups.push_back({{"name", g.name},
                          {"rows", g.w.rows},
                          {"cols", g.w.cols},
                          {"frozen", g.frozen}});
    }
    const std::string mtext = manifest.dump();

    std::string out;
    out.append(kCheckpointMagic, 4);
    detail::append_le<u16>(out, kCheckpointVersion);
    detail::append_le<u32>(out, static_cast<u32>(mtext.size()));
    out += mtext;
    for (std::size_t i = 0; i < p.num_groups(); ++i) {
        const Mat& w = p.group(i).w;
        const std::size_t nbytes = w.a.size() * sizeof(double);
        const std::size_t off = out.size();
        out.resize(off + nbytes);
        std::memcpy(out.data() + off, w.a.data(), nbytes);
    }
    return out;
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    const std::string bytes = checkpoint_bytes(p);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("checkpoint write failed: " + path);
}

inline ModelParams checkpoint_from_bytes(const std::string& bytes) {
    if (bytes.size() < 10) throw TruncatedFileError("checkpoint shorter than header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
        throw BadMagicError("checkpoint magic mismatch");
    u16 version = 0;
    std::memcpy(&version, bytes.data() + 4, 2);
    if (version != kCheckpointVersion)
        throw BadVersionError("unsupported checkpoint version " + std::to_string(version));
    u32 mlen = 0;
    std::memcpy(&mlen, bytes.data() + 6, 4);
    if (bytes.size() < 10 + static_cast<std::size_t>(mlen))
        throw TruncatedFileError("checkpoint manifest truncated");

    detail::ordered_json manifest;
    try {
        manifest = detail::ordered_json::parse(bytes.substr(10, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw TruncatedFileError(std::string("checkpoint manifest unparseable: ") + e.what());
    }

    ModelConfig cfg;
    std::vector<ParamGroup> groups;
    std::size_t off = 10 + mlen;
    try {
        cfg = detail::config_from_json(manifest.at("model"));
        for (const auto& gj : manifest.at("groups")) {
            ParamGroup g;
            g.name = gj.at("name").get<std::string>();
            g.frozen = gj.at("frozen").get<bool>();
            const std::size_t rows = gj.at("rows").get<std::size_t>();
            const std::size_t cols = gj.at("cols").get<std::size_t>();
            g.w = Mat(rows, cols);
            const std::size_t nbytes = rows * cols * sizeof(double);
            if (off + nbytes > bytes.size())
                throw TruncatedFileError("checkpoint data truncated at group " + g.name);
            std::memcpy(g.w.a.data(), bytes.data() + off, nbytes);
            off += nbytes;
            groups.push_back(std::move(g));
        }
    } catch (const nlohmann::json::exception& e) {
        throw TruncatedFileError(std::string("checkpoint manifest malformed: ") + e.what());
    }
    if (off != bytes.size()) throw TruncatedFileError("checkpoint has trailing bytes");

    ModelParams p = make_params_from_groups(cfg, std::move(groups));
    // sanity: the manifest must describe the architecture it claims
    ModelParams ref = ModelParams::init(cfg);
    if (ref.num_groups() != p.num_groups()) throw ShapeDisagreementError("group count mismatch");
    for (std::size_t i = 0; i < p.num_groups(); ++i) {
        if (p.group(i).name != ref.group(i).name || !p.group(i).w.same_shape(ref.group(i).w) ||
            p.group(i).frozen != ref.group(i).frozen)
            throw ShapeDisagreementError("group " + p.group(i).name +
                                         " disagrees with declared model config");
    }
    return p;
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

// Load and insist the file matches an expected architecture.
inline ModelParams load_checkpoint(const std::string& path, const ModelConfig& expected) {
    ModelParams p = load_checkpoint(path);
    if (!(p.cfg() == expected))
        throw ShapeDisagreementError("checkpoint model config disagrees with expectation");
    return p;
}

}  // namespace ssum
