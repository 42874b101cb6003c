#pragma once

// Checkpoint file format (little-endian):
//   magic "CTXSEQCK" | u32 version | u64 run_config_hash | u64 vocab_hash
//   | u64 len + ModelConfig JSON | u64 len + RunConfig JSON
//   | u64 n_params | records { u64 name_len, name, u32 rank, u64 dims[rank],
//                              f64 payload }
// Reload is bit-exact: f64 payloads round-trip unchanged.

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxseq/model.hpp"

namespace ctxseq {

constexpr char kCheckpointMagic[8] = {'C', 'T', 'X', 'S', 'E', 'Q', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["ffn_dim"] = cfg.ffn_dim;
    j["layers_enc"] = cfg.layers_enc;
    j["layers_dec"] = cfg.layers_dec;
    j["n_heads"] = cfg.n_heads;
    j["strategy"] = strategy_name(cfg.strategy);
    j["source_layers"] = cfg.source_layers;
    j["context_layers"] = cfg.context_layers;
    j["tau"] = cfg.focus.tau;
    j["sigma"] = cfg.focus.sigma;
    j["enable_temperature"] = cfg.focus.enable_temperature;
    j["enable_window"] = cfg.focus.enable_window;
    j["scaled_dot"] = cfg.scaled_dot;
    j["share_embeddings"] = cfg.share_embeddings;
    j["use_value_proj"] = cfg.use_value_proj;
    j["pre_norm"] = cfg.pre_norm;
    return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.layers_enc = j.at("layers_enc").get<int>();
    cfg.layers_dec = j.at("layers_dec").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
    cfg.source_layers = j.at("source_layers").get<std::vector<int>>();
    cfg.context_layers = j.at("context_layers").get<std::vector<int>>();
    cfg.focus.tau = j.at("tau").get<double>();
    cfg.focus.sigma = j.at("sigma").get<double>();
    cfg.focus.enable_temperature = j.at("enable_temperature").get<bool>();
    cfg.focus.enable_window = j.at("enable_window").get<bool>();
    cfg.scaled_dot = j.at("scaled_dot").get<bool>();
    cfg.share_embeddings = j.at("share_embeddings").get<bool>();
    cfg.use_value_proj = j.at("use_value_proj").get<bool>();
    cfg.pre_norm = j.at("pre_norm").get<bool>();
    return cfg;
}

struct CheckpointData {
    ModelConfig config;
    std::string run_config_json;
    uint64_t run_config_hash = 0;
    uint64_t vocab_hash = 0;
    std::vector<std::pair<std::string, Tensor>> params;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("checkpoint: truncated file '" + path + "'");
    return v;
}

inline void write_sized(std::ostream& out, const std::string& s) {
    write_pod<uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_sized(std::istream& in, const std::string& path) {
    uint64_t len = read_pod<uint64_t>(in, path);
    if (len > (1ULL << 32)) throw DataError("checkpoint: corrupt length field in '" + path + "'");
    std::string s(static_cast<size_t>(len), '\0');
    in.read(s.data(), static_cast<std::streamsize>(len));
    if (!in) throw DataError("checkpoint: truncated file '" + path + "'");
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Model& model,
                            const std::string& run_config_json = "",
                            uint64_t run_config_hash = 0, uint64_t vocab_hash = 0) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_pod<uint32_t>(out, kCheckpointVersion);
    detail::write_pod<uint64_t>(out, run_config_hash);
    detail::write_pod<uint64_t>(out, vocab_hash);
    detail::write_sized(out, model_config_to_json(model.config()).dump());
    detail::write_sized(out, run_config_json);
    detail::write_pod<uint64_t>(out, model.parameters().size());
    for (const auto& [name, t] : model.parameters()) {
        detail::write_sized(out, name);
        detail::write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i)
            detail::write_pod<uint64_t>(out, static_cast<uint64_t>(t.dim(i)));
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
    if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw DataError("checkpoint: '" + path + "' is not a ctxseq checkpoint");
    uint32_t version = detail::read_pod<uint32_t>(in, path);
    if (version != kCheckpointVersion)
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    CheckpointData data;
    data.run_config_hash = detail::read_pod<uint64_t>(in, path);
    data.vocab_hash = detail::read_pod<uint64_t>(in, path);
    std::string cfg_json = detail::read_sized(in, path);
    try {
        data.config = model_config_from_json(nlohmann::json::parse(cfg_json));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: bad config block in '" + path + "': " + e.what());
    }
    data.run_config_json = detail::read_sized(in, path);
    uint64_t n = detail::read_pod<uint64_t>(in, path);
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = detail::read_sized(in, path);
        uint32_t rank = detail::read_pod<uint32_t>(in, path);
        if (rank < 1 || rank > 3) throw DataError("checkpoint: bad tensor rank in '" + path + "'");
        Shape shape;
        int64_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            auto d = detail::read_pod<uint64_t>(in, path);
            shape.push_back(static_cast<int>(d));
            numel *= static_cast<int64_t>(d);
        }
        std::vector<double> values(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!in) throw DataError("checkpoint: truncated tensor '" + name + "' in '" + path + "'");
        data.params.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
    }
    return data;
}

// Reconstructs the saved model. Parameters are restored bit-exactly.
inline Model model_from_checkpoint(const CheckpointData& data, uint64_t init_seed = 0) {
    Model model(data.config, init_seed);
    model.load_state(data.params);
    return model;
}

// Warm-start compatibility: identical parameter-shaping fields, and the
// strategy may only change between parameter-count-equal strategies
// (sequential / concatenate / interleave).
inline void check_warm_start_compatible(const ModelConfig& from, const ModelConfig& to) {
    auto same_family = [](DecoderStrategy s) { return s != DecoderStrategy::Alternate; };
    if (from.strategy != to.strategy && !(same_family(from.strategy) && same_family(to.strategy)))
        throw DataError(std::string("warm start: parameter mismatch between strategies '") +
                        strategy_name(from.strategy) + "' and '" + strategy_name(to.strategy) + "'");
    if (from.vocab_size != to.vocab_size || from.d_model != to.d_model ||
        from.ffn_dim != to.ffn_dim || from.layers_enc != to.layers_enc ||
        from.layers_dec != to.layers_dec || from.n_heads != to.n_heads ||
        from.share_embeddings != to.share_embeddings ||
        from.use_value_proj != to.use_value_proj || from.pre_norm != to.pre_norm)
        throw DataError("warm start: checkpoint model dimensions do not match the target config");
}

}  // namespace ctxseq
