#pragma once

// Vocabulary, dataset I/O, the S/C/T task-resampling augmentation, and a
// synthetic key-value lookup task whose answers provably require both the
// source (which key, which op) and the context (the value).

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ctxseq/common.hpp"

namespace ctxseq {

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kSepId = 3;
constexpr int kUnkId = 4;
constexpr int kNumReserved = 5;

inline const char* kReservedTokens[kNumReserved] = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};

class Vocabulary {
public:
    // Fresh vocabulary holding only the reserved tokens.
    static Vocabulary with_reserved() {
        Vocabulary v;
        for (const char* t : kReservedTokens) v.append(t, false);
        return v;
    }

    int add(const std::string& token, bool content = false) {
        auto it = ids_.find(token);
        if (it != ids_.end()) {
            if (content) set_content(it->second, true);
            return it->second;
        }
        return append(token, content);
    }

    // Lookup that maps unknown tokens to <unk>.
    int lookup(const std::string& token) const {
        auto it = ids_.find(token);
        return it == ids_.end() ? kUnkId : it->second;
    }

    bool contains(const std::string& token) const { return ids_.count(token) > 0; }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<size_t>(id)];
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    bool is_content(int id) const {
        return id >= 0 && id < size() && content_[static_cast<size_t>(id)];
    }

    void set_content(int id, bool flag) {
        if (id < 0 || id >= size()) throw DataError("vocabulary: id out of range");
        if (flag && id < kNumReserved)
            throw DataError("vocabulary: reserved token '" + tokens_[static_cast<size_t>(id)] +
                            "' cannot be a content token");
        content_[static_cast<size_t>(id)] = flag;
    }

    std::vector<int> encode_line(const std::string& line) const {
        std::vector<int> out;
        std::istringstream is(line);
        std::string tok;
        while (is >> tok) out.push_back(lookup(tok));
        return out;
    }

    std::string decode(const std::vector<int>& ids, bool skip_special = true) const {
        std::string out;
        for (int id : ids) {
            if (skip_special && id < kNumReserved && id != kUnkId) continue;
            if (!out.empty()) out += ' ';
            out += token(id);
        }
        return out;
    }

    // One token per line; content tokens carry a "\t#content" suffix.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("vocabulary: cannot open '" + path + "' for writing");
        for (int i = 0; i < size(); ++i) {
            out << tokens_[static_cast<size_t>(i)];
            if (content_[static_cast<size_t>(i)]) out << "\t#content";
            out << '\n';
        }
    }

    // Files written by save() start with the reserved tokens; user-authored
    // files that omit them get the reserved block prepended.
    static Vocabulary load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("vocabulary: cannot open '" + path + "'");
        std::vector<std::pair<std::string, bool>> entries;
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            bool content = false;
            auto tab = line.find('\t');
            std::string tok = line;
            if (tab != std::string::npos) {
                std::string suffix = line.substr(tab + 1);
                tok = line.substr(0, tab);
                if (suffix == "#content")
                    content = true;
                else
                    throw DataError("vocabulary: bad suffix '" + suffix + "' at " + path + ":" +
                                    std::to_string(line_no));
            }
            entries.emplace_back(tok, content);
        }
        Vocabulary v;
        bool has_reserved = !entries.empty() && entries[0].first == kReservedTokens[0];
        if (!has_reserved)
            for (const char* t : kReservedTokens) v.append(t, false);
        for (auto& [tok, content] : entries) {
            if (v.contains(tok))
                throw DataError("vocabulary: duplicate token '" + tok + "' in " + path);
            v.append(tok, content);
        }
        if (v.size() < kNumReserved || v.token(kPadId) != kReservedTokens[0] ||
            v.token(kBosId) != kReservedTokens[1] || v.token(kEosId) != kReservedTokens[2] ||
            v.token(kSepId) != kReservedTokens[3] || v.token(kUnkId) != kReservedTokens[4])
            throw DataError("vocabulary: reserved tokens corrupted in " + path);
        return v;
    }

    // Order- and flag-sensitive digest used to refuse mismatched vocabularies.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (int i = 0; i < size(); ++i) {
            h = fnv1a(tokens_[static_cast<size_t>(i)], h);
            unsigned char f = content_[static_cast<size_t>(i)] ? 1 : 0;
            h = fnv1a(&f, 1, h);
        }
        return h;
    }

private:
    int append(const std::string& token, bool content) {
        if (content && static_cast<int>(tokens_.size()) < kNumReserved)
            throw DataError("vocabulary: reserved token cannot be content");
        int id = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
        content_.push_back(content);
        ids_.emplace(token, id);
        return id;
    }

    std::vector<std::string> tokens_;
    std::vector<bool> content_;
    std::unordered_map<std::string, int> ids_;
};

struct ExampleTriple {
    std::vector<int> source;
    std::vector<int> context;  // possibly empty
    std::vector<int> target;
};

struct AugmentationConfig {
    double p_st = 0.0;  // probability of dropping C and keeping the S -> T task
    double p_sc = 0.0;  // probability of switching to the S -> C prediction task
    uint64_t seed = 0;

    void validate() const {
        if (p_st < 0.0 || p_st > 1.0 || p_sc < 0.0 || p_sc > 1.0)
            throw ConfigError("augmentation: probabilities must lie in [0,1]");
        if (p_st + p_sc > 1.0 + 1e-12)
            throw ConfigError("augmentation: p_st + p_sc must not exceed 1");
    }
};

// Deterministic per-example stream: both runs over the same (seed, index)
// draw identical samples.
inline Rng augment_rng(const AugmentationConfig& cfg, uint64_t example_index) {
    return Rng(mix64(cfg.seed, 0xA46D17ULL, example_index));
}

// Task resampling. In effect the decoding task for this example is randomly
// replaced: drop C (learn T from S alone) or predict C from S.
inline ExampleTriple augment(const ExampleTriple& ex, const AugmentationConfig& cfg, Rng& rng) {
    cfg.validate();
    double u = rng.next_double();
    if (u < cfg.p_st) return ExampleTriple{ex.source, {}, ex.target};
    if (u < cfg.p_st + cfg.p_sc) return ExampleTriple{ex.source, {}, ex.context};
    return ex;
}

// TSV reader: each line is `S \t C \t T` with whitespace-separated tokens;
// the middle field may be empty. Unknown tokens map to <unk>.
inline std::vector<ExampleTriple> load_dataset(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("dataset: cannot open '" + path + "'");
    std::vector<ExampleTriple> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                fields.push_back(line.substr(start));
                break;
            }
            fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        if (fields.size() != 3)
            throw DataError("dataset: expected 3 tab-separated fields at " + path + ":" +
                            std::to_string(line_no) + ", got " + std::to_string(fields.size()));
        ExampleTriple ex;
        ex.source = vocab.encode_line(fields[0]);
        ex.context = vocab.encode_line(fields[1]);
        ex.target = vocab.encode_line(fields[2]);
        out.push_back(std::move(ex));
    }
    return out;
}

inline void save_dataset(const std::string& path, const std::vector<ExampleTriple>& data,
                         const Vocabulary& vocab) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("dataset: cannot open '" + path + "' for writing");
    auto write_seq = [&](const std::vector<int>& ids) {
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out << ' ';
            out << vocab.token(ids[i]);
        }
    };
    for (const auto& ex : data) {
        write_seq(ex.source);
        out << '\t';
        write_seq(ex.context);
        out << '\t';
        write_seq(ex.target);
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic key-value lookup task
// ---------------------------------------------------------------------------
//
// C = "k1 v1 k2 v2 ... kK vK" lists the K distinct keys with independently
// random values. S = "query k_i op_j". T = f_j(v_i) where f_j is a fixed
// bijective cyclic shift on the value token set. Value tokens are
// content-flagged. Splits are disjoint in (key-assignment, op) signatures.

struct SynthSplits {
    std::vector<ExampleTriple> train, valid, test;
    Vocabulary vocab;
    int n_keys = 0;
    int n_values = 0;
    int n_ops = 0;
};

inline SynthSplits synth_lookup_task(int n_keys, int n_ops, int n_examples, uint64_t seed) {
    if (n_keys < 1) throw ConfigError("synth: n_keys must be >= 1");
    if (n_ops < 1) throw ConfigError("synth: n_ops must be >= 1");
    if (n_examples < 3) throw ConfigError("synth: need at least 3 examples for the splits");

    SynthSplits out;
    out.n_keys = n_keys;
    out.n_ops = n_ops;
    out.n_values = 4 * n_keys;
    int n_values = out.n_values;

    out.vocab = Vocabulary::with_reserved();
    int query_id = out.vocab.add("query");
    std::vector<int> key_ids, value_ids, op_ids;
    for (int i = 0; i < n_keys; ++i) key_ids.push_back(out.vocab.add("k" + std::to_string(i)));
    for (int i = 0; i < n_values; ++i)
        value_ids.push_back(out.vocab.add("v" + std::to_string(i), /*content=*/true));
    for (int i = 0; i < n_ops; ++i) op_ids.push_back(out.vocab.add("op" + std::to_string(i)));

    // Capacity: value assignments per key times ops.
    double capacity = static_cast<double>(n_ops);
    for (int i = 0; i < n_keys; ++i) {
        capacity *= n_values;
        if (capacity > 1e15) break;  // plenty; avoid overflow
    }
    if (static_cast<double>(n_examples) > capacity)
        throw ConfigError("synth: n_examples=" + std::to_string(n_examples) +
                          " exceeds distinct (key-assignment, op) capacity");

    Rng rng(mix64(seed, 0x5EEDULL));
    std::set<std::string> signatures;
    std::vector<ExampleTriple> examples;
    examples.reserve(static_cast<size_t>(n_examples));
    int attempts = 0;
    const int max_attempts = n_examples * 200 + 10000;
    while (static_cast<int>(examples.size()) < n_examples) {
        if (++attempts > max_attempts)
            throw ConfigError("synth: unable to draw enough distinct examples; reduce n_examples");
        // Key assignment: value index per key, plus an op.
        std::vector<int> assignment(static_cast<size_t>(n_keys));
        for (int i = 0; i < n_keys; ++i)
            assignment[static_cast<size_t>(i)] = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_values)));
        int op = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_ops)));
        std::string sig;
        for (int a : assignment) sig += std::to_string(a) + ",";
        sig += "|" + std::to_string(op);
        if (!signatures.insert(sig).second) continue;

        int queried = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_keys)));

        ExampleTriple ex;
        for (int k = 0; k < n_keys; ++k) {
            ex.context.push_back(key_ids[static_cast<size_t>(k)]);
            ex.context.push_back(value_ids[static_cast<size_t>(assignment[static_cast<size_t>(k)])]);
        }
        ex.source = {query_id, key_ids[static_cast<size_t>(queried)], op_ids[static_cast<size_t>(op)]};
        int shifted = (assignment[static_cast<size_t>(queried)] + op) % n_values;
        ex.target = {value_ids[static_cast<size_t>(shifted)]};
        examples.push_back(std::move(ex));
    }

    // Contiguous 80/10/10 split over distinct signatures keeps the splits
    // disjoint by construction.
    int n_valid = std::max(1, n_examples / 10);
    int n_test = std::max(1, n_examples / 10);
    int n_train = n_examples - n_valid - n_test;
    if (n_train < 1) throw ConfigError("synth: n_examples too small to form all three splits");
    out.train.assign(examples.begin(), examples.begin() + n_train);
    out.valid.assign(examples.begin() + n_train, examples.begin() + n_train + n_valid);
    out.test.assign(examples.begin() + n_train + n_valid, examples.end());
    return out;
}

// Reference solver for generated examples: reads the queried key's value out
// of C and applies the op shift. Used as the task oracle in tests.
inline std::vector<int> synth_solve(const ExampleTriple& ex, const SynthSplits& task) {
    if (ex.source.size() != 3) throw DataError("synth_solve: malformed source");
    const Vocabulary& v = task.vocab;
    const std::string& key_tok = v.token(ex.source[1]);
    const std::string& op_tok = v.token(ex.source[2]);
    int op = std::stoi(op_tok.substr(2));
    for (size_t i = 0; i + 1 < ex.context.size(); i += 2) {
        if (v.token(ex.context[i]) == key_tok) {
            int value_index = std::stoi(v.token(ex.context[i + 1]).substr(1));
            int shifted = (value_index + op) % task.n_values;
            return {v.lookup("v" + std::to_string(shifted))};
        }
    }
    throw DataError("synth_solve: queried key not present in context");
}

}  // namespace ctxseq
