#pragma once

// Unified run configuration for the CLI: one flat key-value config file plus
// flag overrides, serialized (with its hash) into every artifact a run
// produces. The CTXSEQ_SEED environment variable overrides the file seed;
// explicit flags override everything.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxseq/decoding.hpp"
#include "ctxseq/model.hpp"
#include "ctxseq/training.hpp"

namespace ctxseq {

struct RunConfig {
    // model
    std::string strategy = "interleave";
    int d_model = 64;
    int ffn_dim = 128;
    int layers_enc = 4;
    int layers_dec = 4;
    int n_heads = 1;
    std::string layers_source;   // csv of 1-based decoder layers, empty = default split
    std::string layers_context;
    double tau = 1.0;
    double sigma = 40.0;
    bool enable_temperature = false;
    bool enable_window = false;
    bool scaled_dot = false;
    bool share_embeddings = true;
    bool use_value_proj = false;
    bool pre_norm = false;

    // training
    double lr_peak = 1e-4;
    int warmup_steps = 4000;
    double warmup_init_lr = 1e-7;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-9;
    double clip_norm = 1.0;
    int batch_size = 8;
    int max_steps = 1000;
    int validate_every = 200;
    double p_st = 0.0;
    double p_sc = 0.0;
    uint64_t seed = 1;

    // decoding
    int beam_size = 5;
    double length_penalty = 1.5;
    int max_len = 500;
    int no_repeat_ngram = 3;
    int min_len = 0;
    int nbest = 1;

    // synth task
    int n_keys = 6;
    int n_ops = 2;
    int n_examples = 2000;

    // analysis
    int window_radius = 40;
    int threads = 1;

    // paths
    std::string train_data;
    std::string valid_data;
    std::string data;
    std::string vocab;
    std::string checkpoint;
    std::string reverse_checkpoint;
    std::string init_checkpoint;
    std::string generations;
    std::string input;
    std::string out_dir;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["strategy"] = strategy;
        j["d_model"] = d_model;
        j["ffn_dim"] = ffn_dim;
        j["layers_enc"] = layers_enc;
        j["layers_dec"] = layers_dec;
        j["n_heads"] = n_heads;
        j["layers_source"] = layers_source;
        j["layers_context"] = layers_context;
        j["tau"] = tau;
        j["sigma"] = sigma;
        j["enable_temperature"] = enable_temperature;
        j["enable_window"] = enable_window;
        j["scaled_dot"] = scaled_dot;
        j["share_embeddings"] = share_embeddings;
        j["use_value_proj"] = use_value_proj;
        j["pre_norm"] = pre_norm;
        j["lr_peak"] = lr_peak;
        j["warmup_steps"] = warmup_steps;
        j["warmup_init_lr"] = warmup_init_lr;
        j["adam_beta1"] = adam_beta1;
        j["adam_beta2"] = adam_beta2;
        j["adam_eps"] = adam_eps;
        j["clip_norm"] = clip_norm;
        j["batch_size"] = batch_size;
        j["max_steps"] = max_steps;
        j["validate_every"] = validate_every;
        j["p_st"] = p_st;
        j["p_sc"] = p_sc;
        j["seed"] = seed;
        j["beam_size"] = beam_size;
        j["length_penalty"] = length_penalty;
        j["max_len"] = max_len;
        j["no_repeat_ngram"] = no_repeat_ngram;
        j["min_len"] = min_len;
        j["nbest"] = nbest;
        j["n_keys"] = n_keys;
        j["n_ops"] = n_ops;
        j["n_examples"] = n_examples;
        j["window_radius"] = window_radius;
        j["threads"] = threads;
        j["train_data"] = train_data;
        j["valid_data"] = valid_data;
        j["data"] = data;
        j["vocab"] = vocab;
        j["checkpoint"] = checkpoint;
        j["reverse_checkpoint"] = reverse_checkpoint;
        j["init_checkpoint"] = init_checkpoint;
        j["generations"] = generations;
        j["input"] = input;
        j["out_dir"] = out_dir;
        return j;
    }

    std::string to_json_string() const { return to_json().dump(); }

    uint64_t hash() const { return fnv1a(to_json_string()); }

    // Flat `key = value` lines; '#' starts a comment; keys match the flag
    // names with underscores.
    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config: cannot open '" + path + "'");
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            auto hash_pos = line.find('#');
            if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
            auto trim = [](std::string s) {
                size_t a = s.find_first_not_of(" \t\r");
                if (a == std::string::npos) return std::string();
                size_t b = s.find_last_not_of(" \t\r");
                return s.substr(a, b - a + 1);
            };
            std::string stripped = trim(line);
            if (stripped.empty()) continue;
            auto eq = stripped.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config: expected 'key = value' at " + path + ":" +
                                  std::to_string(line_no));
            set(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)), path, line_no);
        }
    }

    void apply_env() {
        if (const char* s = std::getenv("CTXSEQ_SEED")) {
            try {
                seed = std::stoull(s);
            } catch (...) {
                throw ConfigError("CTXSEQ_SEED: not an integer: " + std::string(s));
            }
        }
    }

    ModelConfig to_model_config(int vocab_size) const {
        ModelConfig m;
        m.vocab_size = vocab_size;
        m.d_model = d_model;
        m.ffn_dim = ffn_dim;
        m.layers_enc = layers_enc;
        m.layers_dec = layers_dec;
        m.n_heads = n_heads;
        m.strategy = strategy_from_name(strategy);
        m.source_layers = parse_layer_list(layers_source);
        m.context_layers = parse_layer_list(layers_context);
        m.focus.tau = tau;
        m.focus.sigma = sigma;
        m.focus.enable_temperature = enable_temperature;
        m.focus.enable_window = enable_window;
        m.scaled_dot = scaled_dot;
        m.share_embeddings = share_embeddings;
        m.use_value_proj = use_value_proj;
        m.pre_norm = pre_norm;
        m.finalize();
        return m;
    }

    TrainConfig to_train_config() const {
        TrainConfig t;
        t.lr_peak = lr_peak;
        t.warmup_steps = warmup_steps;
        t.warmup_init_lr = warmup_init_lr;
        t.adam_beta1 = adam_beta1;
        t.adam_beta2 = adam_beta2;
        t.adam_eps = adam_eps;
        t.clip_norm = clip_norm;
        t.batch_size = batch_size;
        t.max_steps = max_steps;
        t.validate_every = validate_every;
        t.seed = seed;
        t.augmentation.p_st = p_st;
        t.augmentation.p_sc = p_sc;
        t.augmentation.seed = seed;
        if (!init_checkpoint.empty()) t.init_checkpoint = init_checkpoint;
        return t;
    }

    DecodeConfig to_decode_config() const {
        DecodeConfig d;
        d.beam_size = beam_size;
        d.length_penalty = length_penalty;
        d.max_len = max_len;
        d.no_repeat_ngram = no_repeat_ngram;
        d.min_len = min_len;
        return d;
    }

    static std::vector<int> parse_layer_list(const std::string& csv) {
        std::vector<int> out;
        if (csv.empty()) return out;
        size_t start = 0;
        while (start <= csv.size()) {
            size_t comma = csv.find(',', start);
            std::string item = csv.substr(start, comma == std::string::npos ? std::string::npos
                                                                            : comma - start);
            if (!item.empty()) {
                try {
                    out.push_back(std::stoi(item));
                } catch (...) {
                    throw ConfigError("config: bad layer list entry '" + item + "'");
                }
            }
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }

private:
    void set(const std::string& key, const std::string& value, const std::string& path, int line) {
        auto bad = [&](const std::string& why) {
            return ConfigError("config: " + why + " for '" + key + "' at " + path + ":" +
                               std::to_string(line));
        };
        auto as_int = [&]() {
            try {
                return std::stoi(value);
            } catch (...) {
                throw bad("expected integer");
            }
        };
        auto as_double = [&]() {
            try {
                return std::stod(value);
            } catch (...) {
                throw bad("expected number");
            }
        };
        auto as_bool = [&]() {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw bad("expected true/false");
        };
        if (key == "strategy") strategy = value;
        else if (key == "d_model") d_model = as_int();
        else if (key == "ffn_dim") ffn_dim = as_int();
        else if (key == "layers_enc") layers_enc = as_int();
        else if (key == "layers_dec") layers_dec = as_int();
        else if (key == "n_heads") n_heads = as_int();
        else if (key == "layers_source") layers_source = value;
        else if (key == "layers_context") layers_context = value;
        else if (key == "tau") tau = as_double();
        else if (key == "sigma") sigma = as_double();
        else if (key == "enable_temperature") enable_temperature = as_bool();
        else if (key == "enable_window") enable_window = as_bool();
        else if (key == "scaled_dot") scaled_dot = as_bool();
        else if (key == "share_embeddings") share_embeddings = as_bool();
        else if (key == "use_value_proj") use_value_proj = as_bool();
        else if (key == "pre_norm") pre_norm = as_bool();
        else if (key == "lr_peak") lr_peak = as_double();
        else if (key == "warmup_steps") warmup_steps = as_int();
        else if (key == "warmup_init_lr") warmup_init_lr = as_double();
        else if (key == "adam_beta1") adam_beta1 = as_double();
        else if (key == "adam_beta2") adam_beta2 = as_double();
        else if (key == "adam_eps") adam_eps = as_double();
        else if (key == "clip_norm") clip_norm = as_double();
        else if (key == "batch_size") batch_size = as_int();
        else if (key == "max_steps") max_steps = as_int();
        else if (key == "validate_every") validate_every = as_int();
        else if (key == "p_st") p_st = as_double();
        else if (key == "p_sc") p_sc = as_double();
        else if (key == "seed") {
            try {
                seed = std::stoull(value);
            } catch (...) {
                throw bad("expected integer");
            }
        } else if (key == "beam_size") beam_size = as_int();
        else if (key == "length_penalty") length_penalty = as_double();
        else if (key == "max_len") max_len = as_int();
        else if (key == "no_repeat_ngram") no_repeat_ngram = as_int();
        else if (key == "min_len") min_len = as_int();
        else if (key == "nbest") nbest = as_int();
        else if (key == "n_keys") n_keys = as_int();
        else if (key == "n_ops") n_ops = as_int();
        else if (key == "n_examples") n_examples = as_int();
        else if (key == "window_radius") window_radius = as_int();
        else if (key == "threads") threads = as_int();
        else if (key == "train_data") train_data = value;
        else if (key == "valid_data") valid_data = value;
        else if (key == "data") data = value;
        else if (key == "vocab") vocab = value;
        else if (key == "checkpoint") checkpoint = value;
        else if (key == "reverse_checkpoint") reverse_checkpoint = value;
        else if (key == "init_checkpoint") init_checkpoint = value;
        else if (key == "generations") generations = value;
        else if (key == "input") input = value;
        else if (key == "out_dir") out_dir = value;
        else throw bad("unknown key");
    }
};

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// Run-directory manifest: provenance for every artifact the command wrote.
inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const RunConfig& rc, const std::vector<std::string>& artifacts) {
    nlohmann::json j;
    j["command"] = command;
    j["runconfig"] = rc.to_json();
    j["runconfig_hash"] = hash_hex(rc.hash());
    j["artifacts"] = artifacts;
    std::ofstream out(std::filesystem::path(out_dir) / "manifest.json");
    if (!out) throw DataError("manifest: cannot write into '" + out_dir + "'");
    out << j.dump(2) << "\n";
}

}  // namespace ctxseq
