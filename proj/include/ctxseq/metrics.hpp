#pragma once

// Evaluation and analysis measures: ROUGE-1/2/L (F1-flavored, no stemming),
// unigram F1, corpus BLEU-4 with add-one smoothing on the higher orders,
// perplexity, the backward-perplexity harness, context use percentage, and
// encoder attention statistics (S_attn-C, C_attn-S, Win_attn).

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "ctxseq/data.hpp"
#include "ctxseq/decoding.hpp"
#include "ctxseq/model.hpp"

namespace ctxseq {

namespace detail {

inline std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& seq, int n) {
    std::map<std::vector<int>, int> counts;
    for (size_t i = 0; i + n <= seq.size(); ++i)
        ++counts[std::vector<int>(seq.begin() + static_cast<long>(i),
                                  seq.begin() + static_cast<long>(i) + n)];
    return counts;
}

inline double f1_pct(double precision, double recall) {
    if (precision + recall <= 0.0) return 0.0;
    return 100.0 * 2.0 * precision * recall / (precision + recall);
}

}  // namespace detail

// Clipped n-gram overlap F1, as a percentage.
inline double rouge_n(const std::vector<int>& gen, const std::vector<int>& ref, int n) {
    if (n < 1) throw ConfigError("rouge_n: n must be >= 1");
    if (ref.empty()) {
        std::cerr << "warning: rouge_n with empty reference, scoring 0\n";
        return 0.0;
    }
    auto gc = detail::ngram_counts(gen, n);
    auto rc = detail::ngram_counts(ref, n);
    long gen_total = 0, ref_total = 0, overlap = 0;
    for (const auto& [ng, c] : gc) gen_total += c;
    for (const auto& [ng, c] : rc) ref_total += c;
    for (const auto& [ng, c] : gc) {
        auto it = rc.find(ng);
        if (it != rc.end()) overlap += std::min(c, it->second);
    }
    if (gen_total == 0 || ref_total == 0) return 0.0;
    double p = static_cast<double>(overlap) / gen_total;
    double r = static_cast<double>(overlap) / ref_total;
    return detail::f1_pct(p, r);
}

// Longest-common-subsequence F1, as a percentage.
inline double rouge_l(const std::vector<int>& gen, const std::vector<int>& ref) {
    if (ref.empty()) {
        std::cerr << "warning: rouge_l with empty reference, scoring 0\n";
        return 0.0;
    }
    if (gen.empty()) return 0.0;
    size_t n = gen.size(), m = ref.size();
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            if (gen[i - 1] == ref[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    double lcs = prev[m];
    double p = lcs / static_cast<double>(n);
    double r = lcs / static_cast<double>(m);
    return detail::f1_pct(p, r);
}

// Bag-of-words overlap F1; by definition identical to rouge_n with n = 1.
inline double unigram_f1(const std::vector<int>& gen, const std::vector<int>& ref) {
    return rouge_n(gen, ref, 1);
}

// Corpus BLEU-4 with brevity penalty. Unigram precision is unsmoothed;
// higher orders use add-one smoothing so micro-corpora stay deterministic.
inline double corpus_bleu(const std::vector<std::vector<int>>& gens,
                          const std::vector<std::vector<int>>& refs) {
    if (gens.size() != refs.size())
        throw DataError("corpus_bleu: " + std::to_string(gens.size()) + " generations vs " +
                        std::to_string(refs.size()) + " references");
    if (gens.empty()) throw DataError("corpus_bleu: empty corpus");
    long gen_len = 0, ref_len = 0;
    long match[5] = {0}, total[5] = {0};
    for (size_t e = 0; e < gens.size(); ++e) {
        gen_len += static_cast<long>(gens[e].size());
        ref_len += static_cast<long>(refs[e].size());
        for (int n = 1; n <= 4; ++n) {
            auto gc = detail::ngram_counts(gens[e], n);
            auto rc = detail::ngram_counts(refs[e], n);
            for (const auto& [ng, c] : gc) {
                total[n] += c;
                auto it = rc.find(ng);
                if (it != rc.end()) match[n] += std::min(c, it->second);
            }
        }
    }
    if (gen_len == 0) return 0.0;
    double log_prec = 0.0;
    for (int n = 1; n <= 4; ++n) {
        double p;
        if (n == 1) {
            if (total[1] == 0 || match[1] == 0) return 0.0;
            p = static_cast<double>(match[1]) / total[1];
        } else {
            p = static_cast<double>(match[n] + 1) / (total[n] + 1);
        }
        log_prec += std::log(p);
    }
    double bp = gen_len >= ref_len ? 1.0
                                   : std::exp(1.0 - static_cast<double>(ref_len) / gen_len);
    return 100.0 * bp * std::exp(log_prec / 4.0);
}

// ---------------------------------------------------------------------------
// Context use percentage (content-token set arithmetic)
// ---------------------------------------------------------------------------

inline std::set<int> content_set(const std::vector<int>& tokens, const Vocabulary& vocab) {
    std::set<int> out;
    for (int t : tokens)
        if (vocab.is_content(t)) out.insert(t);
    return out;
}

// |N(ctx) & N(gold) & N(gen)| / |N(ctx) & N(gold)| * 100, or nullopt when the
// denominator set is empty (such examples are skipped).
inline std::optional<double> context_use_pct(const std::vector<int>& ctx,
                                             const std::vector<int>& gold,
                                             const std::vector<int>& gen,
                                             const Vocabulary& vocab) {
    std::set<int> nc = content_set(ctx, vocab);
    std::set<int> ngold = content_set(gold, vocab);
    std::set<int> ngen = content_set(gen, vocab);
    std::vector<int> denom;
    std::set_intersection(nc.begin(), nc.end(), ngold.begin(), ngold.end(),
                          std::back_inserter(denom));
    if (denom.empty()) return std::nullopt;
    int num = 0;
    for (int t : denom)
        if (ngen.count(t)) ++num;
    return 100.0 * num / static_cast<double>(denom.size());
}

struct ContextUseSummary {
    double mean = 0.0;
    int used = 0;
    int skipped = 0;
};

inline ContextUseSummary corpus_context_use(const std::vector<ExampleTriple>& examples,
                                            const std::vector<std::vector<int>>& gens,
                                            const Vocabulary& vocab) {
    if (examples.size() != gens.size())
        throw DataError("corpus_context_use: generation count mismatch");
    ContextUseSummary s;
    double total = 0.0;
    for (size_t i = 0; i < examples.size(); ++i) {
        auto u = context_use_pct(examples[i].context, examples[i].target, gens[i], vocab);
        if (u) {
            total += *u;
            ++s.used;
        } else {
            ++s.skipped;
        }
    }
    s.mean = s.used ? total / s.used : 0.0;
    return s;
}

// ---------------------------------------------------------------------------
// Attention statistics
// ---------------------------------------------------------------------------

enum class Segment { Source, Context };

struct AttnStats {
    double s_attn_c = 0.0;  // source-query mass spent on context keys
    double c_attn_s = 0.0;  // context-query mass spent on source keys
    double win_attn = 0.0;  // mass within |i-j| <= window_radius
    int window_radius = 40;
};

// Streaming aggregator so corpus statistics can be accumulated example by
// example. Every record must be square self-attention over the mapped
// positions.
class AttnStatsAccumulator {
public:
    explicit AttnStatsAccumulator(int window_radius = 40) : radius_(window_radius) {}

    void add(const std::vector<AttentionRecord>& records, const std::vector<Segment>& segments) {
        for (const auto& rec : records) {
            if (rec.n_queries != static_cast<int>(segments.size()) ||
                rec.n_keys != static_cast<int>(segments.size()))
                throw DataError("attention_stats: segment map length " +
                                std::to_string(segments.size()) + " does not match a " +
                                std::to_string(rec.n_queries) + "x" + std::to_string(rec.n_keys) +
                                " record");
            for (int i = 0; i < rec.n_queries; ++i) {
                double cross = 0.0, win = 0.0;
                for (int j = 0; j < rec.n_keys; ++j) {
                    double a = rec.at(i, j);
                    bool same_segment = segments[static_cast<size_t>(i)] ==
                                        segments[static_cast<size_t>(j)];
                    if (!same_segment) cross += a;
                    if (std::abs(i - j) <= radius_) win += a;
                }
                win_sum_ += win;
                ++win_rows_;
                if (segments[static_cast<size_t>(i)] == Segment::Source) {
                    s_to_c_ += cross;
                    ++s_rows_;
                } else {
                    c_to_s_ += cross;
                    ++c_rows_;
                }
            }
        }
    }

    AttnStats finalize() const {
        AttnStats out;
        out.window_radius = radius_;
        out.s_attn_c = s_rows_ ? s_to_c_ / s_rows_ : 0.0;
        out.c_attn_s = c_rows_ ? c_to_s_ / c_rows_ : 0.0;
        out.win_attn = win_rows_ ? win_sum_ / win_rows_ : 0.0;
        return out;
    }

private:
    int radius_;
    double s_to_c_ = 0.0, c_to_s_ = 0.0, win_sum_ = 0.0;
    long s_rows_ = 0, c_rows_ = 0, win_rows_ = 0;
};

inline AttnStats attention_stats(const std::vector<AttentionRecord>& records,
                                 const std::vector<Segment>& segments, int window_radius = 40) {
    AttnStatsAccumulator acc(window_radius);
    acc.add(records, segments);
    return acc.finalize();
}

// ---------------------------------------------------------------------------
// Backward perplexity
// ---------------------------------------------------------------------------

// Perplexity of each source under the reverse (T -> S) model, where T is the
// forward model's generation (or the gold target when use_gold is set, which
// gives the reverse model's own test perplexity as a sanity floor).
inline double backward_ppl(const Model& forward, const Model& reverse,
                           const std::vector<ExampleTriple>& test, const DecodeConfig& dcfg,
                           bool use_gold = false) {
    if (forward.config().vocab_size != reverse.config().vocab_size)
        throw ConfigError("backward_ppl: vocabulary size mismatch between models");
    if (test.empty()) throw DataError("backward_ppl: empty test set");
    std::vector<ExampleTriple> reverse_examples;
    reverse_examples.reserve(test.size());
    for (const ExampleTriple& ex : test) {
        std::vector<int> generated;
        if (use_gold) {
            generated = ex.target;
        } else {
            generated = beam_search(forward, ex.source, ex.context, dcfg).front().tokens;
            if (!generated.empty() && generated.back() == kEosId) generated.pop_back();
        }
        if (generated.empty()) generated.push_back(kUnkId);  // reverse input must be non-empty
        reverse_examples.push_back(ExampleTriple{generated, {}, ex.source});
    }
    return eval_ppl(reverse, reverse_examples);
}

// Fraction of examples whose greedy decode reproduces the gold target
// exactly. When force_null_context is set the context is withheld, which
// measures how much of the prediction is recoverable from S alone.
inline double exact_match_accuracy(const Model& model, const std::vector<ExampleTriple>& test,
                                   int max_len, bool force_null_context = false) {
    if (test.empty()) throw DataError("exact_match_accuracy: empty test set");
    int hits = 0;
    for (const ExampleTriple& ex : test) {
        std::vector<int> gen = greedy_decode(model, ex.source,
                                             force_null_context ? std::vector<int>{} : ex.context,
                                             max_len);
        if (gen == ex.target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(test.size());
}

struct MetricsReport {
    double rouge1 = 0.0, rouge2 = 0.0, rougeL = 0.0;
    double f1 = 0.0;
    double bleu = 0.0;
    double ppl = 0.0;
    std::optional<double> bw_ppl;
    std::optional<double> u_ctx;
    int skipped_uctx = 0;
    int n_examples = 0;
};

// Corpus overlap metrics between generations and gold targets.
inline MetricsReport overlap_metrics(const std::vector<ExampleTriple>& examples,
                                     const std::vector<std::vector<int>>& gens,
                                     const Vocabulary& vocab) {
    if (examples.size() != gens.size())
        throw DataError("metrics: generation count " + std::to_string(gens.size()) +
                        " does not match example count " + std::to_string(examples.size()));
    if (examples.empty()) throw DataError("metrics: empty corpus");
    MetricsReport r;
    r.n_examples = static_cast<int>(examples.size());
    std::vector<std::vector<int>> refs;
    refs.reserve(examples.size());
    for (const auto& ex : examples) refs.push_back(ex.target);
    for (size_t i = 0; i < gens.size(); ++i) {
        r.rouge1 += rouge_n(gens[i], refs[i], 1);
        r.rouge2 += rouge_n(gens[i], refs[i], 2);
        r.rougeL += rouge_l(gens[i], refs[i]);
        r.f1 += unigram_f1(gens[i], refs[i]);
    }
    r.rouge1 /= r.n_examples;
    r.rouge2 /= r.n_examples;
    r.rougeL /= r.n_examples;
    r.f1 /= r.n_examples;
    r.bleu = corpus_bleu(gens, refs);
    ContextUseSummary u = corpus_context_use(examples, gens, vocab);
    if (u.used > 0) r.u_ctx = u.mean;
    r.skipped_uctx = u.skipped;
    return r;
}

}  // namespace ctxseq
