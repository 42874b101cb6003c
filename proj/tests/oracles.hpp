#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they check: brute-force overlap metrics (linear scans and erase-style
// clipped matching), an exhaustive beam-search enumerator, and a plain
// repeated-n-gram scanner.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctxseq/data.hpp"
#include "ctxseq/decoding.hpp"
#include "ctxseq/model.hpp"

namespace oracles {

using ctxseq::ExampleTriple;
using ctxseq::Model;
using ctxseq::Vocabulary;

inline std::vector<std::vector<int>> ngram_list(const std::vector<int>& seq, int n) {
    std::vector<std::vector<int>> out;
    for (int i = 0; i + n <= static_cast<int>(seq.size()); ++i)
        out.emplace_back(seq.begin() + i, seq.begin() + i + n);
    return out;
}

inline int clipped_overlap(const std::vector<int>& gen, const std::vector<int>& ref, int n) {
    auto gg = ngram_list(gen, n);
    auto rr = ngram_list(ref, n);
    int overlap = 0;
    for (const auto& g : gg) {
        for (size_t j = 0; j < rr.size(); ++j) {
            if (rr[j] == g) {
                rr.erase(rr.begin() + static_cast<long>(j));
                ++overlap;
                break;
            }
        }
    }
    return overlap;
}

inline double rouge_n_ref(const std::vector<int>& gen, const std::vector<int>& ref, int n) {
    int gtot = std::max(0, static_cast<int>(gen.size()) - n + 1);
    int rtot = std::max(0, static_cast<int>(ref.size()) - n + 1);
    if (gtot == 0 || rtot == 0) return 0.0;
    double overlap = clipped_overlap(gen, ref, n);
    double p = overlap / gtot, r = overlap / rtot;
    if (p + r == 0.0) return 0.0;
    return 100.0 * 2.0 * p * r / (p + r);
}

inline int lcs_memo(const std::vector<int>& a, const std::vector<int>& b, size_t i, size_t j,
                    std::vector<std::vector<int>>& memo) {
    if (i == a.size() || j == b.size()) return 0;
    int& m = memo[i][j];
    if (m >= 0) return m;
    if (a[i] == b[j])
        m = 1 + lcs_memo(a, b, i + 1, j + 1, memo);
    else
        m = std::max(lcs_memo(a, b, i + 1, j, memo), lcs_memo(a, b, i, j + 1, memo));
    return m;
}

inline double rouge_l_ref(const std::vector<int>& gen, const std::vector<int>& ref) {
    if (gen.empty() || ref.empty()) return 0.0;
    std::vector<std::vector<int>> memo(gen.size(), std::vector<int>(ref.size(), -1));
    double lcs = lcs_memo(gen, ref, 0, 0, memo);
    double p = lcs / gen.size(), r = lcs / ref.size();
    if (p + r == 0.0) return 0.0;
    return 100.0 * 2.0 * p * r / (p + r);
}

inline double bleu_ref(const std::vector<std::vector<int>>& gens,
                       const std::vector<std::vector<int>>& refs) {
    long glen = 0, rlen = 0;
    double prec[5];
    for (int n = 1; n <= 4; ++n) {
        long match = 0, total = 0;
        for (size_t e = 0; e < gens.size(); ++e) {
            match += clipped_overlap(gens[e], refs[e], n);
            total += static_cast<long>(ngram_list(gens[e], n).size());
        }
        if (n == 1) {
            if (total == 0 || match == 0) return 0.0;
            prec[n] = static_cast<double>(match) / total;
        } else {
            prec[n] = static_cast<double>(match + 1) / (total + 1);
        }
    }
    for (size_t e = 0; e < gens.size(); ++e) {
        glen += static_cast<long>(gens[e].size());
        rlen += static_cast<long>(refs[e].size());
    }
    if (glen == 0) return 0.0;
    double bp = glen >= rlen ? 1.0 : std::exp(1.0 - static_cast<double>(rlen) / glen);
    return 100.0 * bp * std::pow(prec[1] * prec[2] * prec[3] * prec[4], 0.25);
}

inline std::vector<int> unique_content(const std::vector<int>& toks, const Vocabulary& vocab) {
    std::vector<int> out;
    for (int t : toks) {
        if (!vocab.is_content(t)) continue;
        bool seen = false;
        for (int u : out)
            if (u == t) seen = true;
        if (!seen) out.push_back(t);
    }
    return out;
}

inline double context_use_ref(const std::vector<int>& ctx, const std::vector<int>& gold,
                              const std::vector<int>& gen, const Vocabulary& vocab,
                              bool& skipped) {
    auto nc = unique_content(ctx, vocab);
    auto ngold = unique_content(gold, vocab);
    auto ngen = unique_content(gen, vocab);
    int denom = 0, num = 0;
    for (int t : nc) {
        bool in_gold = false, in_gen = false;
        for (int u : ngold)
            if (u == t) in_gold = true;
        for (int u : ngen)
            if (u == t) in_gen = true;
        if (in_gold) {
            ++denom;
            if (in_gen) ++num;
        }
    }
    skipped = denom == 0;
    return skipped ? 0.0 : 100.0 * num / denom;
}

inline bool contains_repeated_ngram(const std::vector<int>& seq, int n) {
    for (size_t i = 0; i + n <= seq.size(); ++i)
        for (size_t j = i + 1; j + n <= seq.size(); ++j) {
            bool same = true;
            for (int k = 0; k < n; ++k)
                if (seq[i + k] != seq[j + k]) same = false;
            if (same) return true;
        }
    return false;
}

inline std::vector<double> next_logp(const Model& model, const Model::EncodedExample& enc,
                                     const std::vector<int>& generated) {
    std::vector<int> prefix{ctxseq::kBosId};
    prefix.insert(prefix.end(), generated.begin(), generated.end());
    ctxseq::Tensor logits = model.decode_step_stack(prefix, enc.source, enc.context);
    int row = logits.rows() - 1, v = logits.cols();
    std::vector<double> out(static_cast<size_t>(v));
    double mx = logits.at(row, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(row, j));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(logits.at(row, j) - mx);
    double lse = mx + std::log(sum);
    for (int j = 0; j < v; ++j) out[static_cast<size_t>(j)] = logits.at(row, j) - lse;
    return out;
}

// Exhaustive enumeration over every terminal sequence under the beam-search
// scoring contract: EOS-terminated or cut at max_len, blocked n-grams
// excluded, score = sum_logp / len^alpha.
struct BeamEnumerator {
    const Model& model;
    const Model::EncodedExample& enc;
    const ctxseq::DecodeConfig& cfg;
    double best_score = -std::numeric_limits<double>::infinity();
    std::vector<int> best_tokens;

    void consider(const std::vector<int>& tokens, double sum_logp) {
        double score = sum_logp / std::pow(static_cast<double>(std::max<size_t>(1, tokens.size())),
                                           cfg.length_penalty);
        if (score > best_score) {
            best_score = score;
            best_tokens = tokens;
        }
    }

    void walk(std::vector<int>& tokens, double sum_logp) {
        std::vector<double> logp = next_logp(model, enc, tokens);
        for (int tok = 0; tok < model.config().vocab_size; ++tok) {
            if (tok == ctxseq::kEosId && static_cast<int>(tokens.size()) < cfg.min_len) continue;
            tokens.push_back(tok);
            if (cfg.no_repeat_ngram > 0 &&
                contains_repeated_ngram(tokens, cfg.no_repeat_ngram)) {
                tokens.pop_back();
                continue;
            }
            double s = sum_logp + logp[static_cast<size_t>(tok)];
            if (tok == ctxseq::kEosId || static_cast<int>(tokens.size()) == cfg.max_len)
                consider(tokens, s);
            else
                walk(tokens, s);
            tokens.pop_back();
        }
    }
};

}  // namespace oracles
