#pragma once

// Attention primitives: the basic attention module, its causal variant for
// decoding, multi-head splitting, and the focused-context modifications
// (score temperature and a soft localized window) used when encoding the
// context sequence.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ctxseq/tensor.hpp"

namespace ctxseq {

struct AttentionParams {
    Tensor p_q;                  // D x D query projection
    Tensor p_k;                  // D x D key projection
    std::optional<Tensor> p_v;   // optional D x D value projection
    std::optional<Tensor> p_o;   // optional D x D output projection
    int n_heads = 1;

    void validate(int d_model) const {
        auto check = [&](const Tensor& t, const char* which) {
            if (t.rank() != 2 || t.rows() != d_model || t.cols() != d_model)
                throw ConfigError(std::string("attention: ") + which + " must be " +
                                  std::to_string(d_model) + "x" + std::to_string(d_model) +
                                  ", got " + shape_to_string(t.shape()));
        };
        check(p_q, "P_Q");
        check(p_k, "P_K");
        if (p_v) check(*p_v, "P_V");
        if (p_o) check(*p_o, "P_O");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw ConfigError("attention: n_heads=" + std::to_string(n_heads) +
                              " must divide d_model=" + std::to_string(d_model));
    }
};

struct FocusConfig {
    double tau = 1.0;    // temperature, >= 1
    double sigma = 40.0; // soft window size in token units, > 0
    bool enable_temperature = false;
    bool enable_window = false;

    bool active() const { return enable_temperature || enable_window; }

    void validate() const {
        if (enable_temperature && tau <= 0.0)
            throw ConfigError("focus: tau must be positive, got " + std::to_string(tau));
        if (enable_window && sigma <= 0.0)
            throw ConfigError("focus: sigma must be positive, got " + std::to_string(sigma));
    }
};

enum class AttendedSeq { SelfSource, SelfContext, CrossSource, CrossContext };

inline const char* attended_seq_name(AttendedSeq s) {
    switch (s) {
        case AttendedSeq::SelfSource: return "self-S";
        case AttendedSeq::SelfContext: return "self-C";
        case AttendedSeq::CrossSource: return "cross-S";
        case AttendedSeq::CrossContext: return "cross-C";
    }
    return "?";
}

// Captured post-normalization attention distribution for analysis. With
// multiple heads the head-averaged matrix is stored (still row-stochastic).
struct AttentionRecord {
    int layer = -1;
    AttendedSeq kind = AttendedSeq::SelfSource;
    int n_queries = 0;
    int n_keys = 0;
    std::vector<double> alpha;  // row-major n_queries x n_keys

    double at(int i, int j) const {
        return alpha[static_cast<size_t>(i) * n_keys + j];
    }
};

// Collects attention records across a forward pass.
struct Recorder {
    std::vector<AttentionRecord> records;
    void add(AttentionRecord r) { records.push_back(std::move(r)); }
    void clear() { records.clear(); }
};

// Focused context attention. `scores` is the raw pre-softmax self-attention
// score matrix: scores are sharpened by tau, row-softmaxed, then each entry
// (i, j) is damped by exp(-(i-j)^2 / sigma^2) and rows are renormalized to
// stay distributions. With both switches off this is exactly softmax_rows.
inline Tensor focused_scores(const Tensor& scores, const FocusConfig& cfg) {
    detail::require_rank2(scores, "focused_scores");
    if (scores.rows() != scores.cols())
        throw ShapeError("focused_scores: expected square self-attention scores, got " +
                         shape_to_string(scores.shape()));
    cfg.validate();
    Tensor sharpened = cfg.enable_temperature ? scale(scores, cfg.tau) : scores;
    Tensor alpha = softmax_rows(sharpened);
    if (!cfg.enable_window) return alpha;

    int n = scores.rows();
    std::vector<double> w(static_cast<size_t>(n) * n);
    double inv_s2 = 1.0 / (cfg.sigma * cfg.sigma);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double d = static_cast<double>(i - j);
            w[static_cast<size_t>(i) * n + j] = std::exp(-d * d * inv_s2);
        }
    Tensor window = Tensor::from(Shape{n, n}, std::move(w));
    return div_rowsum(mul(alpha, window));
}

struct AttendOptions {
    bool causal = false;
    bool scaled_dot = false;                     // divide scores by sqrt(head dim)
    const FocusConfig* focus = nullptr;          // context-encoder self-attention only
    const std::vector<uint8_t>* key_mask = nullptr;  // 0 = key excluded from attention
    int layer = -1;
    AttendedSeq kind = AttendedSeq::SelfSource;
};

namespace detail {

inline Tensor attend_impl(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionParams& params, const AttendOptions& opt,
                          AttentionRecord* record) {
    require_rank2(q, "attend");
    require_rank2(k, "attend");
    require_rank2(v, "attend");
    int d = q.cols();
    params.validate(d);
    if (k.cols() != d || v.cols() != d)
        throw ShapeError("attend: query width " + std::to_string(d) + " vs key " +
                         shape_to_string(k.shape()) + " / value " + shape_to_string(v.shape()));
    if (k.rows() != v.rows())
        throw ShapeError("attend: key rows " + std::to_string(k.rows()) +
                         " != value rows " + std::to_string(v.rows()));
    int n = q.rows(), m = k.rows();
    bool use_focus = opt.focus != nullptr && opt.focus->active();
    if (use_focus && (opt.causal || opt.key_mask))
        throw ConfigError("attend: focused scores cannot be combined with masking");
    if (opt.key_mask && static_cast<int>(opt.key_mask->size()) != m)
        throw ShapeError("attend: key mask length " + std::to_string(opt.key_mask->size()) +
                         " != key count " + std::to_string(m));
    if (opt.causal && (n != m))
        throw ShapeError("attend: causal attention requires square scores");

    Tensor qp = matmul(q, params.p_q);
    Tensor kp = matmul(k, params.p_k);
    Tensor vp = params.p_v ? matmul(v, *params.p_v) : v;

    std::vector<uint8_t> visible;
    if (opt.causal || opt.key_mask) {
        visible.assign(static_cast<size_t>(n) * m, 1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                bool vis = true;
                if (opt.causal && j > i) vis = false;
                if (opt.key_mask && !(*opt.key_mask)[static_cast<size_t>(j)]) vis = false;
                visible[static_cast<size_t>(i) * m + j] = vis ? 1 : 0;
            }
    }

    int heads = params.n_heads;
    int dh = d / heads;
    std::vector<Tensor> outs;
    std::vector<double> alpha_mean;
    if (record) alpha_mean.assign(static_cast<size_t>(n) * m, 0.0);

    for (int h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? qp : slice_cols(qp, h * dh, (h + 1) * dh);
        Tensor kh = heads == 1 ? kp : slice_cols(kp, h * dh, (h + 1) * dh);
        Tensor vh = heads == 1 ? vp : slice_cols(vp, h * dh, (h + 1) * dh);
        Tensor scores = matmul_nt(qh, kh);
        if (opt.scaled_dot) scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor alpha;
        if (use_focus)
            alpha = focused_scores(scores, *opt.focus);
        else if (!visible.empty())
            alpha = softmax_rows_masked(scores, visible);
        else
            alpha = softmax_rows(scores);
        if (record) {
            const auto& av = alpha.values();
            for (size_t i = 0; i < av.size(); ++i)
                alpha_mean[i] += av[i] / heads;
        }
        outs.push_back(matmul(alpha, vh));
    }

    Tensor out = heads == 1 ? outs[0] : concat_cols(outs);
    if (params.p_o) out = matmul(out, *params.p_o);

    if (record) {
        record->layer = opt.layer;
        record->kind = opt.kind;
        record->n_queries = n;
        record->n_keys = m;
        record->alpha = std::move(alpha_mean);
    }
    return out;
}

}  // namespace detail

// attn(Q, K, V): attention distribution over keys per query, returning the
// convex combination of value rows plus the captured distribution.
inline std::pair<Tensor, AttentionRecord> attend(const Tensor& q, const Tensor& k,
                                                 const Tensor& v, const AttentionParams& params,
                                                 const AttendOptions& opt = {}) {
    AttentionRecord rec;
    Tensor out = detail::attend_impl(q, k, v, params, opt, &rec);
    return {std::move(out), std::move(rec)};
}

// Causal self-attention: position t sees keys 1..t only. Masking happens
// pre-softmax via -inf substitution.
inline std::pair<Tensor, AttentionRecord> attend_causal(const Tensor& x,
                                                        const AttentionParams& params,
                                                        AttendOptions opt = {}) {
    opt.causal = true;
    AttentionRecord rec;
    Tensor out = detail::attend_impl(x, x, x, params, opt, &rec);
    return {std::move(out), std::move(rec)};
}

}  // namespace ctxseq
