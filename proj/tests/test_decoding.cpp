#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctxseq/decoding.hpp"

#include "oracles.hpp"

using namespace ctxseq;

namespace {

Model toy_model(int vocab, uint64_t seed, int d = 4) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = d;
    cfg.ffn_dim = 6;
    cfg.layers_enc = 1;
    cfg.layers_dec = 1;
    cfg.strategy = DecoderStrategy::Concatenate;
    return Model(cfg, seed);
}

}  // namespace

TEST_CASE("beam size 1 with alpha 0 equals greedy argmax decoding") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Model model = toy_model(8, seed);
        std::vector<int> src{5, 6};
        std::vector<int> ctx{7};
        DecodeConfig cfg;
        cfg.beam_size = 1;
        cfg.length_penalty = 0.0;
        cfg.max_len = 6;
        cfg.no_repeat_ngram = 0;

        NoGradGuard ng;
        auto enc = model.encode_example(src, ctx);
        std::vector<int> greedy;
        double greedy_sum = 0.0;
        for (int step = 0; step < cfg.max_len; ++step) {
            std::vector<double> logp = oracles::next_logp(model, enc, greedy);
            int arg = 0;
            for (int j = 1; j < 8; ++j)
                if (logp[static_cast<size_t>(j)] > logp[static_cast<size_t>(arg)]) arg = j;
            greedy.push_back(arg);
            greedy_sum += logp[static_cast<size_t>(arg)];
            if (arg == kEosId) break;
        }

        auto hyps = beam_search(model, src, ctx, cfg);
        CHECK(hyps.front().tokens == greedy);
        CHECK(hyps.front().sum_logp == doctest::Approx(greedy_sum).epsilon(1e-12));
    }
}

TEST_CASE("alpha 0 ranks by raw sum of log probabilities") {
    Model model = toy_model(7, 3);
    DecodeConfig cfg;
    cfg.beam_size = 4;
    cfg.length_penalty = 0.0;
    cfg.max_len = 4;
    auto hyps = beam_search(model, {5, 6}, {}, cfg);
    for (const auto& h : hyps) CHECK(h.score == h.sum_logp);
    for (size_t i = 1; i < hyps.size(); ++i) CHECK(hyps[i - 1].score >= hyps[i].score);
}

TEST_CASE("saturating beam equals exhaustive enumeration (vocab 4, max_len 3, beam 64)") {
    for (uint64_t seed = 1; seed <= 6; ++seed) {
        Model model = toy_model(4, seed);
        std::vector<int> src{3};  // sep token is the only non-frame id in a 4-vocab
        DecodeConfig cfg;
        cfg.beam_size = 64;
        cfg.max_len = 3;
        cfg.length_penalty = 1.5;
        cfg.no_repeat_ngram = 3;

        NoGradGuard ng;
        auto enc = model.encode_example(src, {});
        oracles::BeamEnumerator oracle{model, enc, cfg};
        std::vector<int> scratch;
        oracle.walk(scratch, 0.0);

        auto hyps = beam_search(model, src, {}, cfg);
        CHECK(hyps.front().score == doctest::Approx(oracle.best_score).epsilon(1e-12));
        CHECK(hyps.front().tokens == oracle.best_tokens);
    }
}

TEST_CASE("saturating beam equals exhaustive enumeration across decode settings") {
    uint64_t seed = 40;
    for (double alpha : {0.0, 1.5}) {
        for (int block : {0, 3}) {
            Model model = toy_model(5, ++seed);
            DecodeConfig cfg;
            cfg.beam_size = 625;  // 5^4
            cfg.max_len = 4;
            cfg.length_penalty = alpha;
            cfg.no_repeat_ngram = block;

            NoGradGuard ng;
            auto enc = model.encode_example({3, 4}, {});
            oracles::BeamEnumerator oracle{model, enc, cfg};
            std::vector<int> scratch;
            oracle.walk(scratch, 0.0);

            auto hyps = beam_search(model, {3, 4}, {}, cfg);
            INFO("alpha = " << alpha << " block = " << block);
            CHECK(hyps.front().score == doctest::Approx(oracle.best_score).epsilon(1e-12));
            CHECK(hyps.front().tokens == oracle.best_tokens);
        }
    }
}

TEST_CASE("outputs never contain a repeated trigram when blocking is on") {
    for (uint64_t seed = 100; seed < 110; ++seed) {
        Model model = toy_model(6, seed);
        DecodeConfig cfg;
        cfg.beam_size = 3;
        cfg.max_len = 12;
        cfg.no_repeat_ngram = 3;
        auto hyps = beam_search(model, {5}, {4}, cfg);
        for (const auto& h : hyps) {
            CHECK_FALSE(oracles::contains_repeated_ngram(h.tokens, 3));
            bool ok = h.ended_eos || static_cast<int>(h.tokens.size()) == cfg.max_len;
            CHECK(ok);
        }
    }
}

TEST_CASE("scores are non-increasing down the ranking") {
    for (uint64_t seed = 200; seed < 205; ++seed) {
        Model model = toy_model(7, seed);
        DecodeConfig cfg;
        cfg.beam_size = 5;
        cfg.max_len = 6;
        auto hyps = beam_search(model, {5, 6}, {4}, cfg);
        for (size_t i = 1; i < hyps.size(); ++i) CHECK(hyps[i - 1].score >= hyps[i].score);
    }
}

TEST_CASE("min_len suppresses EOS until enough tokens are generated") {
    Model model = toy_model(7, 9);
    DecodeConfig cfg;
    cfg.beam_size = 4;
    cfg.max_len = 8;
    cfg.min_len = 3;
    auto hyps = beam_search(model, {5}, {}, cfg);
    for (const auto& h : hyps) {
        int generated = static_cast<int>(h.tokens.size()) - (h.ended_eos ? 1 : 0);
        CHECK(generated >= cfg.min_len);
    }
}

TEST_CASE("wider beams never find a worse best hypothesis") {
    for (uint64_t seed = 300; seed < 310; ++seed) {
        Model model = toy_model(7, seed);
        DecodeConfig narrow;
        narrow.beam_size = 1;
        narrow.max_len = 5;
        DecodeConfig wide = narrow;
        wide.beam_size = 5;
        auto h1 = beam_search(model, {5, 6}, {4}, narrow);
        auto h5 = beam_search(model, {5, 6}, {4}, wide);
        CHECK(h5.front().score >= h1.front().score - 1e-12);
    }
}

TEST_CASE("decode configuration is validated") {
    Model model = toy_model(6, 1);
    DecodeConfig cfg;
    cfg.beam_size = 0;
    CHECK_THROWS_AS(beam_search(model, {5}, {}, cfg), ConfigError);
    DecodeConfig cfg2;
    cfg2.max_len = 0;
    CHECK_THROWS_AS(beam_search(model, {5}, {}, cfg2), ConfigError);
    DecodeConfig ok;
    CHECK_THROWS_AS(beam_search(model, {}, {}, ok), DataError);
}

TEST_CASE("greedy_decode strips the trailing EOS") {
    Model model = toy_model(7, 77);
    std::vector<int> out = greedy_decode(model, {5, 6}, {4}, 6);
    for (int t : out) CHECK(t != kEosId);
}
