#pragma once

// Full seq2seq network: shared embeddings, sinusoidal positions, encoder
// stack (optionally with focused context attention), and a decoder that
// conditions on the source/context encodings via one of four strategies:
//
//   Sequential   - one joint encoding of "S <sep> C"; every layer attends it.
//   Concatenate  - separate encoders; layers attend [E(S); E(C)].
//   Alternate    - every layer attends E(C) then E(S) in series.
//   Interleave   - each layer attends exactly one of E(S) / E(C).
//
// Residual connections and post-norm layer normalization wrap every sublayer
// uniformly so the strategies stay comparable.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxseq/attention.hpp"
#include "ctxseq/data.hpp"
#include "ctxseq/tensor.hpp"

namespace ctxseq {

enum class DecoderStrategy { Sequential, Concatenate, Alternate, Interleave };

inline const char* strategy_name(DecoderStrategy s) {
    switch (s) {
        case DecoderStrategy::Sequential: return "sequential";
        case DecoderStrategy::Concatenate: return "concatenate";
        case DecoderStrategy::Alternate: return "alternate";
        case DecoderStrategy::Interleave: return "interleave";
    }
    return "?";
}

inline DecoderStrategy strategy_from_name(const std::string& s) {
    if (s == "sequential") return DecoderStrategy::Sequential;
    if (s == "concatenate") return DecoderStrategy::Concatenate;
    if (s == "alternate") return DecoderStrategy::Alternate;
    if (s == "interleave") return DecoderStrategy::Interleave;
    throw ConfigError("unknown strategy '" + s + "'");
}

// Interleave layer split for a decoder of depth L: the outer layers attend
// the source, the middle ones the context. L=6 gives S={1,2,5,6}, C={3,4}.
inline std::pair<std::vector<int>, std::vector<int>> default_interleave_partition(int layers_dec) {
    if (layers_dec < 2)
        throw ConfigError("interleave: needs at least 2 decoder layers to partition");
    if (layers_dec == 2) return {{1}, {2}};
    int k = std::max(1, std::min((layers_dec - 1) / 2, (layers_dec + 2) / 3));
    std::vector<int> src, ctx;
    for (int l = 1; l <= layers_dec; ++l) {
        if (l <= k || l > layers_dec - k)
            src.push_back(l);
        else
            ctx.push_back(l);
    }
    return {src, ctx};
}

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int ffn_dim = 128;
    int layers_enc = 2;
    int layers_dec = 2;
    int n_heads = 1;
    DecoderStrategy strategy = DecoderStrategy::Interleave;
    std::vector<int> source_layers;   // 1-based decoder layers attending S (interleave)
    std::vector<int> context_layers;  // 1-based decoder layers attending C (interleave)
    FocusConfig focus;
    bool scaled_dot = false;
    bool share_embeddings = true;
    bool use_value_proj = false;  // adds P_V and P_O to every attention module
    bool pre_norm = false;        // x + f(LN(x)) with a final stack norm, instead of LN(x + f(x))

    void validate() const {
        if (vocab_size < 4)
            throw ConfigError("model: vocab_size must be >= 4 (reserved ids)");
        if (d_model < 1 || ffn_dim < 1 || layers_enc < 1 || layers_dec < 1)
            throw ConfigError("model: dimensions and layer counts must be positive");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw ConfigError("model: n_heads must divide d_model");
        if (focus.active()) {
            focus.validate();
            if (focus.enable_temperature && focus.tau < 1.0)
                throw ConfigError("model: focus temperature must be >= 1");
        }
        if (strategy == DecoderStrategy::Interleave) {
            if (source_layers.empty() || context_layers.empty())
                throw ConfigError("interleave: both layer sets must be non-empty");
            std::vector<bool> seen(static_cast<size_t>(layers_dec) + 1, false);
            for (const auto* set : {&source_layers, &context_layers})
                for (int l : *set) {
                    if (l < 1 || l > layers_dec)
                        throw ConfigError("interleave: layer " + std::to_string(l) +
                                          " outside 1.." + std::to_string(layers_dec));
                    if (seen[static_cast<size_t>(l)])
                        throw ConfigError("interleave: layer " + std::to_string(l) +
                                          " assigned twice");
                    seen[static_cast<size_t>(l)] = true;
                }
            for (int l = 1; l <= layers_dec; ++l)
                if (!seen[static_cast<size_t>(l)])
                    throw ConfigError("interleave: layer " + std::to_string(l) + " unassigned");
        }
    }

    // Fills the interleave partition with the default split when unset.
    void finalize() {
        if (strategy == DecoderStrategy::Interleave && source_layers.empty() &&
            context_layers.empty()) {
            auto [s, c] = default_interleave_partition(layers_dec);
            source_layers = std::move(s);
            context_layers = std::move(c);
        }
        validate();
    }
};

// Sinusoidal position encoding rows, added to (scaled) token embeddings.
inline Tensor position_encoding(int len, int d_model) {
    std::vector<double> pe(static_cast<size_t>(len) * d_model);
    for (int pos = 0; pos < len; ++pos)
        for (int j = 0; j < d_model; ++j) {
            double rate = std::pow(10000.0, -2.0 * (j / 2) / d_model);
            double angle = pos * rate;
            pe[static_cast<size_t>(pos) * d_model + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return Tensor::from(Shape{len, d_model}, std::move(pe));
}

class Model {
public:
    struct EncodedExample {
        Tensor source;   // for Sequential this is the joint "S <sep> C" encoding
        Tensor context;  // undefined sentinel for Sequential; 1 x D null row when C is empty
    };

    Model(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.finalize();
        Rng rng(mix64(init_seed, 0xC0DEC0DEULL));
        build_parameters(rng);
    }

    const ModelConfig& config() const { return cfg_; }

    const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
    std::vector<std::pair<std::string, Tensor>>& parameters_mut() { return params_; }

    Tensor* find_parameter(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second].second;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.size();
        return n;
    }

    void zero_grads() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    // Copies a named parameter set into this model bit-exactly. The name and
    // shape sets must match the model's registry exactly.
    void load_state(const std::vector<std::pair<std::string, Tensor>>& named) {
        if (named.size() != params_.size())
            throw DataError("load_state: parameter mismatch, checkpoint has " +
                            std::to_string(named.size()) + " tensors, model expects " +
                            std::to_string(params_.size()));
        for (const auto& [name, t] : named) {
            Tensor* dst = find_parameter(name);
            if (!dst)
                throw DataError("load_state: parameter mismatch, unexpected tensor '" + name + "'");
            if (dst->shape() != t.shape())
                throw DataError("load_state: shape mismatch for '" + name + "': " +
                                shape_to_string(t.shape()) + " vs " + shape_to_string(dst->shape()));
            dst->values_mut() = t.values();
        }
    }

    // Encoder: layers_enc rounds of self-attention + feed-forward over the
    // embedded tokens. Context encoding applies the focused-attention
    // modifications when enabled.
    Tensor encode(const std::vector<int>& tokens, bool is_context, Recorder* rec = nullptr) const {
        if (tokens.empty()) throw DataError("encode: empty token sequence");
        Tensor x = embed(tokens, enc_embedding());
        bool focus_here = is_context && cfg_.focus.active();
        for (int l = 0; l < cfg_.layers_enc; ++l) {
            const EncLayer& layer = enc_[static_cast<size_t>(l)];
            AttendOptions opt;
            opt.scaled_dot = cfg_.scaled_dot;
            opt.layer = l + 1;
            opt.kind = is_context ? AttendedSeq::SelfContext : AttendedSeq::SelfSource;
            if (focus_here) opt.focus = &cfg_.focus;
            AttentionRecord record;
            if (cfg_.pre_norm) {
                Tensor h = layer_norm_rows(x, layer.ln_self_g, layer.ln_self_b);
                Tensor att = detail::attend_impl(h, h, h, layer.self, opt, rec ? &record : nullptr);
                x = add(x, att);
                Tensor ff = ffn(layer_norm_rows(x, layer.ln_ffn_g, layer.ln_ffn_b), layer.ffn_w1,
                                layer.ffn_b1, layer.ffn_w2, layer.ffn_b2);
                x = add(x, ff);
            } else {
                Tensor att = detail::attend_impl(x, x, x, layer.self, opt, rec ? &record : nullptr);
                x = layer_norm_rows(add(x, att), layer.ln_self_g, layer.ln_self_b);
                Tensor ff = ffn(x, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2);
                x = layer_norm_rows(add(x, ff), layer.ln_ffn_g, layer.ln_ffn_b);
            }
            if (rec) rec->add(std::move(record));
        }
        if (cfg_.pre_norm) x = layer_norm_rows(x, enc_final_g_, enc_final_b_);
        return x;
    }

    // Encodes one (S, C) pair according to the strategy. An empty C is
    // replaced by the learned null-context row so every strategy accepts
    // context-free examples.
    EncodedExample encode_example(const std::vector<int>& source, const std::vector<int>& context,
                                  Recorder* rec = nullptr) const {
        EncodedExample out;
        if (cfg_.strategy == DecoderStrategy::Sequential) {
            std::vector<int> joint = source;
            joint.push_back(kSepId);
            joint.insert(joint.end(), context.begin(), context.end());
            out.source = encode(joint, /*is_context=*/false, rec);
            return out;  // context stays the undefined sentinel
        }
        out.source = encode(source, /*is_context=*/false, rec);
        out.context = context.empty() ? null_context_ : encode(context, /*is_context=*/true, rec);
        return out;
    }

    // Decoder over a target prefix (BOS-framed). Returns prefix_len x vocab
    // logits; row t predicts the token after prefix position t. The optional
    // cross-key mask drops encoder rows from every cross-attention, which the
    // degenerate-context equivalence check relies on.
    Tensor decode_step_stack(const std::vector<int>& target_prefix, const Tensor& enc_source,
                             const Tensor& enc_context, Recorder* rec = nullptr,
                             const std::vector<uint8_t>* cross_key_mask = nullptr) const {
        if (target_prefix.empty()) throw DataError("decode: empty target prefix");
        if (!enc_source.defined())
            throw ConfigError("decode: source encoding required");
        if (cfg_.strategy == DecoderStrategy::Sequential) {
            if (enc_context.defined())
                throw ConfigError("decode: sequential strategy expects the context sentinel");
        } else if (cfg_.strategy != DecoderStrategy::Concatenate && !enc_context.defined()) {
            throw ConfigError("decode: strategy requires a context encoding");
        }

        Tensor x = embed(target_prefix, dec_embedding());
        for (int l = 0; l < cfg_.layers_dec; ++l) {
            const DecLayer& layer = dec_[static_cast<size_t>(l)];
            AttendOptions self_opt;
            self_opt.causal = true;
            self_opt.scaled_dot = cfg_.scaled_dot;
            if (cfg_.pre_norm) {
                Tensor h = layer_norm_rows(x, layer.ln_self_g, layer.ln_self_b);
                x = add(x, detail::attend_impl(h, h, h, layer.self, self_opt, nullptr));
            } else {
                Tensor att = detail::attend_impl(x, x, x, layer.self, self_opt, nullptr);
                x = layer_norm_rows(add(x, att), layer.ln_self_g, layer.ln_self_b);
            }

            switch (cfg_.strategy) {
                case DecoderStrategy::Sequential:
                    x = cross_sublayer(x, enc_source, *layer.cross, layer.ln_cross_g,
                                       layer.ln_cross_b, l + 1, AttendedSeq::CrossSource,
                                       nullptr, cross_key_mask);
                    break;
                case DecoderStrategy::Concatenate: {
                    Tensor keys = enc_context.defined() ? concat_rows(enc_source, enc_context)
                                                        : enc_source;
                    x = cross_sublayer(x, keys, *layer.cross, layer.ln_cross_g, layer.ln_cross_b,
                                       l + 1, AttendedSeq::CrossSource, nullptr, cross_key_mask);
                    break;
                }
                case DecoderStrategy::Alternate:
                    x = cross_sublayer(x, enc_context, *layer.cross_ctx, layer.ln_cross_ctx_g,
                                       layer.ln_cross_ctx_b, l + 1, AttendedSeq::CrossContext,
                                       rec, cross_key_mask);
                    x = cross_sublayer(x, enc_source, *layer.cross_src, layer.ln_cross_src_g,
                                       layer.ln_cross_src_b, l + 1, AttendedSeq::CrossSource,
                                       rec, nullptr);
                    break;
                case DecoderStrategy::Interleave: {
                    bool to_source = source_layer_set_[static_cast<size_t>(l)];
                    x = cross_sublayer(x, to_source ? enc_source : enc_context, *layer.cross,
                                       layer.ln_cross_g, layer.ln_cross_b, l + 1,
                                       to_source ? AttendedSeq::CrossSource
                                                 : AttendedSeq::CrossContext,
                                       rec, to_source ? nullptr : cross_key_mask);
                    break;
                }
            }

            if (cfg_.pre_norm) {
                Tensor ff = ffn(layer_norm_rows(x, layer.ln_ffn_g, layer.ln_ffn_b), layer.ffn_w1,
                                layer.ffn_b1, layer.ffn_w2, layer.ffn_b2);
                x = add(x, ff);
            } else {
                Tensor ff = ffn(x, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2);
                x = layer_norm_rows(add(x, ff), layer.ln_ffn_g, layer.ln_ffn_b);
            }
        }
        if (cfg_.pre_norm) x = layer_norm_rows(x, dec_final_g_, dec_final_b_);
        return matmul_nt(x, output_embedding());
    }

    // Teacher-forced mean token cross-entropy over the batch. exp(loss) is
    // the reported perplexity. PAD positions never enter the average.
    std::pair<Tensor, int> forward_loss(std::span<const ExampleTriple> batch,
                                        Recorder* rec = nullptr) const {
        if (batch.empty()) throw DataError("forward_loss: empty batch");
        Tensor total = Tensor::scalar(0.0);
        int tokens = 0;
        for (const ExampleTriple& ex : batch) {
            if (ex.target.empty()) throw DataError("forward_loss: training example with empty target");
            EncodedExample enc = encode_example(ex.source, ex.context, rec);
            std::vector<int> prefix;
            prefix.reserve(ex.target.size() + 1);
            prefix.push_back(kBosId);
            prefix.insert(prefix.end(), ex.target.begin(), ex.target.end());
            std::vector<int> gold(ex.target.begin(), ex.target.end());
            gold.push_back(kEosId);
            Tensor logits = decode_step_stack(prefix, enc.source, enc.context, rec);
            int counted = 0;
            total = add(total, cross_entropy_sum(logits, gold, kPadId, &counted));
            tokens += counted;
        }
        if (tokens == 0) throw DataError("forward_loss: no non-pad target tokens in batch");
        return {scale(total, 1.0 / tokens), tokens};
    }

    const Tensor& null_context() const { return null_context_; }

private:
    struct EncLayer {
        AttentionParams self;
        Tensor ln_self_g, ln_self_b;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        Tensor ln_ffn_g, ln_ffn_b;
    };
    struct DecLayer {
        AttentionParams self;
        Tensor ln_self_g, ln_self_b;
        std::optional<AttentionParams> cross;      // sequential / concatenate / interleave
        Tensor ln_cross_g, ln_cross_b;
        std::optional<AttentionParams> cross_ctx;  // alternate only
        Tensor ln_cross_ctx_g, ln_cross_ctx_b;
        std::optional<AttentionParams> cross_src;  // alternate only
        Tensor ln_cross_src_g, ln_cross_src_b;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
        Tensor ln_ffn_g, ln_ffn_b;
    };

    const Tensor& enc_embedding() const { return cfg_.share_embeddings ? embed_ : embed_enc_; }
    const Tensor& dec_embedding() const { return cfg_.share_embeddings ? embed_ : embed_dec_; }
    const Tensor& output_embedding() const { return cfg_.share_embeddings ? embed_ : out_proj_; }

    Tensor embed(const std::vector<int>& tokens, const Tensor& table) const {
        Tensor e = embedding_rows(table, tokens);
        e = scale(e, std::sqrt(static_cast<double>(cfg_.d_model)));
        return add(e, position_encoding(static_cast<int>(tokens.size()), cfg_.d_model));
    }

    Tensor ffn(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
               const Tensor& b2) const {
        return add_rows(matmul(relu(add_rows(matmul(x, w1), b1)), w2), b2);
    }

    Tensor cross_sublayer(const Tensor& x, const Tensor& keys, const AttentionParams& p,
                          const Tensor& ln_g, const Tensor& ln_b, int layer, AttendedSeq kind,
                          Recorder* rec, const std::vector<uint8_t>* key_mask) const {
        AttendOptions opt;
        opt.scaled_dot = cfg_.scaled_dot;
        opt.layer = layer;
        opt.kind = kind;
        if (key_mask && static_cast<int>(key_mask->size()) == keys.rows()) opt.key_mask = key_mask;
        bool record_pure = rec && (kind == AttendedSeq::CrossSource || kind == AttendedSeq::CrossContext) &&
                           (cfg_.strategy == DecoderStrategy::Alternate ||
                            cfg_.strategy == DecoderStrategy::Interleave);
        AttentionRecord record;
        if (cfg_.pre_norm) {
            Tensor h = layer_norm_rows(x, ln_g, ln_b);
            Tensor att = detail::attend_impl(h, keys, keys, p, opt, record_pure ? &record : nullptr);
            if (record_pure) rec->add(std::move(record));
            return add(x, att);
        }
        Tensor att = detail::attend_impl(x, keys, keys, p, opt, record_pure ? &record : nullptr);
        if (record_pure) rec->add(std::move(record));
        return layer_norm_rows(add(x, att), ln_g, ln_b);
    }

    Tensor make_param(std::string name, Shape shape, std::vector<double> values) {
        Tensor t = Tensor::param(std::move(shape), std::move(values), name);
        index_.emplace(name, params_.size());
        params_.emplace_back(std::move(name), t);
        return t;
    }

    Tensor xavier(std::string name, int rows, int cols, Rng& rng) {
        double limit = std::sqrt(6.0 / (rows + cols));
        std::vector<double> v(static_cast<size_t>(rows) * cols);
        for (double& x : v) x = (2.0 * rng.next_double() - 1.0) * limit;
        return make_param(std::move(name), Shape{rows, cols}, std::move(v));
    }

    Tensor gaussian_rows(std::string name, int rows, int cols, double std_dev, Rng& rng) {
        std::vector<double> v(static_cast<size_t>(rows) * cols);
        for (double& x : v) x = rng.next_gaussian() * std_dev;
        return make_param(std::move(name), Shape{rows, cols}, std::move(v));
    }

    Tensor constant_vec(std::string name, int n, double value) {
        return make_param(std::move(name), Shape{n}, std::vector<double>(static_cast<size_t>(n), value));
    }

    AttentionParams make_attention(const std::string& prefix, Rng& rng) {
        AttentionParams p;
        p.n_heads = cfg_.n_heads;
        p.p_q = xavier(prefix + ".p_q", cfg_.d_model, cfg_.d_model, rng);
        p.p_k = xavier(prefix + ".p_k", cfg_.d_model, cfg_.d_model, rng);
        if (cfg_.use_value_proj) {
            p.p_v = xavier(prefix + ".p_v", cfg_.d_model, cfg_.d_model, rng);
            p.p_o = xavier(prefix + ".p_o", cfg_.d_model, cfg_.d_model, rng);
        }
        return p;
    }

    void make_ffn(const std::string& prefix, Rng& rng, Tensor& w1, Tensor& b1, Tensor& w2,
                  Tensor& b2) {
        w1 = xavier(prefix + ".w1", cfg_.d_model, cfg_.ffn_dim, rng);
        b1 = constant_vec(prefix + ".b1", cfg_.ffn_dim, 0.0);
        w2 = xavier(prefix + ".w2", cfg_.ffn_dim, cfg_.d_model, rng);
        b2 = constant_vec(prefix + ".b2", cfg_.d_model, 0.0);
    }

    void make_norm(const std::string& prefix, Tensor& gain, Tensor& bias) {
        gain = constant_vec(prefix + ".gain", cfg_.d_model, 1.0);
        bias = constant_vec(prefix + ".bias", cfg_.d_model, 0.0);
    }

    void build_parameters(Rng& rng) {
        double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model));
        if (cfg_.share_embeddings) {
            embed_ = gaussian_rows("embed.weight", cfg_.vocab_size, cfg_.d_model, emb_std, rng);
        } else {
            embed_enc_ = gaussian_rows("embed.enc.weight", cfg_.vocab_size, cfg_.d_model, emb_std, rng);
            embed_dec_ = gaussian_rows("embed.dec.weight", cfg_.vocab_size, cfg_.d_model, emb_std, rng);
            out_proj_ = gaussian_rows("out_proj.weight", cfg_.vocab_size, cfg_.d_model, emb_std, rng);
        }
        null_context_ = gaussian_rows("null_ctx", 1, cfg_.d_model, emb_std, rng);

        enc_.resize(static_cast<size_t>(cfg_.layers_enc));
        for (int l = 0; l < cfg_.layers_enc; ++l) {
            EncLayer& layer = enc_[static_cast<size_t>(l)];
            std::string p = "enc." + std::to_string(l);
            layer.self = make_attention(p + ".self", rng);
            make_norm(p + ".ln_self", layer.ln_self_g, layer.ln_self_b);
            make_ffn(p + ".ffn", rng, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2);
            make_norm(p + ".ln_ffn", layer.ln_ffn_g, layer.ln_ffn_b);
        }

        source_layer_set_.assign(static_cast<size_t>(cfg_.layers_dec), false);
        if (cfg_.strategy == DecoderStrategy::Interleave)
            for (int l : cfg_.source_layers) source_layer_set_[static_cast<size_t>(l - 1)] = true;

        dec_.resize(static_cast<size_t>(cfg_.layers_dec));
        for (int l = 0; l < cfg_.layers_dec; ++l) {
            DecLayer& layer = dec_[static_cast<size_t>(l)];
            std::string p = "dec." + std::to_string(l);
            layer.self = make_attention(p + ".self", rng);
            make_norm(p + ".ln_self", layer.ln_self_g, layer.ln_self_b);
            if (cfg_.strategy == DecoderStrategy::Alternate) {
                layer.cross_ctx = make_attention(p + ".cross_ctx", rng);
                make_norm(p + ".ln_cross_ctx", layer.ln_cross_ctx_g, layer.ln_cross_ctx_b);
                layer.cross_src = make_attention(p + ".cross_src", rng);
                make_norm(p + ".ln_cross_src", layer.ln_cross_src_g, layer.ln_cross_src_b);
            } else {
                layer.cross = make_attention(p + ".cross", rng);
                make_norm(p + ".ln_cross", layer.ln_cross_g, layer.ln_cross_b);
            }
            make_ffn(p + ".ffn", rng, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2);
            make_norm(p + ".ln_ffn", layer.ln_ffn_g, layer.ln_ffn_b);
        }

        if (cfg_.pre_norm) {
            make_norm("enc.final_ln", enc_final_g_, enc_final_b_);
            make_norm("dec.final_ln", dec_final_g_, dec_final_b_);
        }
    }

    ModelConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::unordered_map<std::string, size_t> index_;
    Tensor embed_, embed_enc_, embed_dec_, out_proj_;
    Tensor null_context_;
    Tensor enc_final_g_, enc_final_b_, dec_final_g_, dec_final_b_;
    std::vector<EncLayer> enc_;
    std::vector<DecLayer> dec_;
    std::vector<bool> source_layer_set_;
};

// Perplexity of a model over untouched triples (teacher-forced, no grad).
inline double eval_ppl(const Model& model, std::span<const ExampleTriple> examples) {
    NoGradGuard ng;
    auto [loss, tokens] = model.forward_loss(examples);
    (void)tokens;
    return std::exp(loss.item());
}

}  // namespace ctxseq
