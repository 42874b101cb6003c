#pragma once

// Beam search over next-token log-probabilities with power length penalty
// (sum_logp / len^alpha), no-repeat-ngram blocking inside the hypothesis,
// and a maximum-length cutoff. The decoder recomputes the full prefix each
// step; no incremental K/V caching.

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctxseq/model.hpp"

namespace ctxseq {

struct DecodeConfig {
    int beam_size = 5;
    double length_penalty = 1.5;
    int max_len = 500;
    int no_repeat_ngram = 3;  // 0 disables blocking
    int min_len = 0;

    void validate() const {
        if (beam_size < 1) throw ConfigError("decode: beam_size must be >= 1");
        if (max_len < 1) throw ConfigError("decode: max_len must be >= 1");
        if (length_penalty < 0.0) throw ConfigError("decode: length penalty must be >= 0");
        if (no_repeat_ngram < 0 || min_len < 0)
            throw ConfigError("decode: no_repeat_ngram and min_len must be >= 0");
    }
};

struct Hypothesis {
    std::vector<int> tokens;  // generated tokens; includes the final EOS if emitted
    double sum_logp = 0.0;
    double score = 0.0;       // sum_logp / len^alpha
    bool ended_eos = false;
};

namespace detail {

// True when appending `next` to `tokens` would close an n-gram already
// present in the sequence.
inline bool repeats_ngram(const std::vector<int>& tokens, int next, int n) {
    if (n < 1) return false;
    int len = static_cast<int>(tokens.size());
    if (len < n) return false;  // overlapping occurrences count as repeats
    std::vector<int> tail(tokens.end() - (n - 1), tokens.end());
    tail.push_back(next);
    for (int start = 0; start + n <= len; ++start) {
        bool same = true;
        for (int j = 0; j < n; ++j)
            if (tokens[static_cast<size_t>(start + j)] != tail[static_cast<size_t>(j)]) {
                same = false;
                break;
            }
        if (same) return true;
    }
    return false;
}

inline double length_norm(double sum_logp, int len, double alpha) {
    return sum_logp / std::pow(static_cast<double>(std::max(1, len)), alpha);
}

inline std::vector<double> log_softmax_row(const Tensor& logits, int row) {
    int v = logits.cols();
    std::vector<double> out(static_cast<size_t>(v));
    double mx = logits.at(row, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(row, j));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(logits.at(row, j) - mx);
    double lse = mx + std::log(sum);
    for (int j = 0; j < v; ++j) out[static_cast<size_t>(j)] = logits.at(row, j) - lse;
    return out;
}

}  // namespace detail

// Standard beam search. Finished hypotheses are ranked by sum_logp / len^alpha
// where len counts generated tokens (EOS included when emitted). Expansions
// that would repeat an n-gram inside the hypothesis score -inf. The search
// stops once no live hypothesis can still beat the worst of a full finished
// pool.
inline std::vector<Hypothesis> beam_search(const Model& model, const std::vector<int>& source,
                                           const std::vector<int>& context,
                                           const DecodeConfig& cfg) {
    cfg.validate();
    if (source.empty()) throw DataError("beam_search: empty source");
    NoGradGuard ng;

    Model::EncodedExample enc = model.encode_example(source, context);
    const double neg_inf = -std::numeric_limits<double>::infinity();
    double alpha = cfg.length_penalty;

    std::vector<Hypothesis> live{Hypothesis{}};
    std::vector<Hypothesis> finished;

    auto worst_finished = [&]() {
        double w = std::numeric_limits<double>::infinity();
        for (const auto& h : finished) w = std::min(w, h.score);
        return w;
    };

    for (int step = 1; step <= cfg.max_len && !live.empty(); ++step) {
        struct Candidate {
            size_t from;
            int token;
            double sum_logp;
        };
        std::vector<Candidate> cands;
        cands.reserve(live.size() * static_cast<size_t>(model.config().vocab_size));

        for (size_t hi = 0; hi < live.size(); ++hi) {
            const Hypothesis& h = live[hi];
            std::vector<int> prefix;
            prefix.reserve(h.tokens.size() + 1);
            prefix.push_back(kBosId);
            prefix.insert(prefix.end(), h.tokens.begin(), h.tokens.end());
            Tensor logits = model.decode_step_stack(prefix, enc.source, enc.context);
            std::vector<double> logp = detail::log_softmax_row(logits, logits.rows() - 1);
            for (int tok = 0; tok < model.config().vocab_size; ++tok) {
                double lp = logp[static_cast<size_t>(tok)];
                if (tok == kEosId && static_cast<int>(h.tokens.size()) < cfg.min_len) lp = neg_inf;
                if (cfg.no_repeat_ngram > 0 &&
                    detail::repeats_ngram(h.tokens, tok, cfg.no_repeat_ngram))
                    lp = neg_inf;
                if (lp == neg_inf) continue;
                cands.push_back({hi, tok, h.sum_logp + lp});
            }
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& a, const Candidate& b) { return a.sum_logp > b.sum_logp; });
        // Only the top beam_size candidates survive; an EOS candidate consumes
        // its slot by moving to the finished pool. This keeps beam_size = 1
        // exactly equal to greedy argmax decoding.
        if (static_cast<int>(cands.size()) > cfg.beam_size)
            cands.resize(static_cast<size_t>(cfg.beam_size));

        std::vector<Hypothesis> next_live;
        for (const Candidate& c : cands) {
            Hypothesis h = live[c.from];
            h.tokens.push_back(c.token);
            h.sum_logp = c.sum_logp;
            if (c.token == kEosId) {
                h.ended_eos = true;
                h.score = detail::length_norm(h.sum_logp, static_cast<int>(h.tokens.size()), alpha);
                finished.push_back(std::move(h));
            } else {
                next_live.push_back(std::move(h));
            }
        }
        // Keep only the best beam_size finished hypotheses.
        if (static_cast<int>(finished.size()) > cfg.beam_size) {
            std::stable_sort(finished.begin(), finished.end(),
                             [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
            finished.resize(static_cast<size_t>(cfg.beam_size));
        }
        live = std::move(next_live);

        if (step == cfg.max_len) {
            for (Hypothesis& h : live) {
                h.score = detail::length_norm(h.sum_logp, static_cast<int>(h.tokens.size()), alpha);
                finished.push_back(std::move(h));
            }
            live.clear();
            break;
        }

        // Prune: a live hypothesis can reach at best sum_logp / max_len^alpha.
        if (static_cast<int>(finished.size()) >= cfg.beam_size && !live.empty()) {
            double bound = neg_inf;
            for (const Hypothesis& h : live)
                bound = std::max(bound, detail::length_norm(h.sum_logp, cfg.max_len, alpha));
            if (bound <= worst_finished()) break;
        }
    }

    std::stable_sort(finished.begin(), finished.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
    if (static_cast<int>(finished.size()) > cfg.beam_size)
        finished.resize(static_cast<size_t>(cfg.beam_size));
    if (finished.empty())
        throw NumericError("beam_search: no hypothesis survived the constraints");
    return finished;
}

// Greedy decode convenience (beam 1) returning the generated tokens with the
// trailing EOS stripped.
inline std::vector<int> greedy_decode(const Model& model, const std::vector<int>& source,
                                      const std::vector<int>& context, int max_len) {
    DecodeConfig cfg;
    cfg.beam_size = 1;
    cfg.length_penalty = 0.0;
    cfg.max_len = max_len;
    cfg.no_repeat_ngram = 0;
    std::vector<int> toks = beam_search(model, source, context, cfg).front().tokens;
    if (!toks.empty() && toks.back() == kEosId) toks.pop_back();
    return toks;
}

}  // namespace ctxseq
