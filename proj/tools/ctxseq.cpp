// ctxseq: context-aware seq2seq transformers at desk scale.
//
// Subcommands: synth, train, eval, generate, stats. One run directory per
// invocation (--out-dir) holding every artifact plus a manifest with the
// serialized run configuration and its hash. Exit codes: 0 success, 1 usage
// or configuration error, 2 data error, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxseq/checkpoint.hpp"
#include "ctxseq/metrics.hpp"
#include "ctxseq/runconfig.hpp"

namespace fs = std::filesystem;
using namespace ctxseq;

namespace {

void add_model_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--strategy", rc.strategy, "sequential|concatenate|alternate|interleave");
    cmd->add_option("--d-model", rc.d_model);
    cmd->add_option("--ffn-dim", rc.ffn_dim);
    cmd->add_option("--layers-enc", rc.layers_enc);
    cmd->add_option("--layers-dec", rc.layers_dec);
    cmd->add_option("--n-heads", rc.n_heads);
    cmd->add_option("--layers-source", rc.layers_source, "csv of decoder layers attending S");
    cmd->add_option("--layers-context", rc.layers_context, "csv of decoder layers attending C");
    cmd->add_option("--tau", rc.tau, "context attention temperature");
    cmd->add_option("--sigma", rc.sigma, "context attention window size");
    cmd->add_option("--enable-temperature", rc.enable_temperature);
    cmd->add_option("--enable-window", rc.enable_window);
    cmd->add_option("--scaled-dot", rc.scaled_dot);
    cmd->add_option("--share-embeddings", rc.share_embeddings);
    cmd->add_option("--use-value-proj", rc.use_value_proj);
    cmd->add_option("--pre-norm", rc.pre_norm);
}

void add_decode_flags(CLI::App* cmd, RunConfig& rc) {
    cmd->add_option("--beam-size", rc.beam_size);
    cmd->add_option("--length-penalty", rc.length_penalty);
    cmd->add_option("--max-len", rc.max_len);
    cmd->add_option("--no-repeat-ngram", rc.no_repeat_ngram);
    cmd->add_option("--min-len", rc.min_len);
}

fs::path require_out_dir(const RunConfig& rc) {
    if (rc.out_dir.empty()) throw ConfigError("--out-dir is required");
    fs::create_directories(rc.out_dir);
    return fs::path(rc.out_dir);
}

Vocabulary load_vocab_checked(const RunConfig& rc, const CheckpointData& ckpt) {
    if (rc.vocab.empty()) throw ConfigError("--vocab is required");
    Vocabulary vocab = Vocabulary::load(rc.vocab);
    if (ckpt.vocab_hash != 0 && ckpt.vocab_hash != vocab.content_hash())
        throw DataError("vocabulary '" + rc.vocab +
                        "' does not match the one the checkpoint was trained with");
    return vocab;
}

// Parallel map over example indices; results land in-order, so output is
// independent of the thread count.
template <typename Fn>
void parallel_for(int n, int threads, Fn fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&]() {
            NoGradGuard ng;
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}

// Accepts 1-, 2-, or 3-field TSV lines (S, S\tC, S\tC\tT).
std::vector<ExampleTriple> load_inputs(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("input: cannot open '" + path + "'");
    std::vector<ExampleTriple> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
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
        if (fields.size() > 3)
            throw DataError("input: more than 3 fields at " + path + ":" + std::to_string(line_no));
        ExampleTriple ex;
        ex.source = vocab.encode_line(fields[0]);
        if (fields.size() > 1) ex.context = vocab.encode_line(fields[1]);
        if (fields.size() > 2) ex.target = vocab.encode_line(fields[2]);
        if (ex.source.empty())
            throw DataError("input: empty source at " + path + ":" + std::to_string(line_no));
        out.push_back(std::move(ex));
    }
    return out;
}

std::vector<std::vector<int>> decode_all(const Model& model, const std::vector<ExampleTriple>& data,
                                         const DecodeConfig& dcfg, int threads) {
    std::vector<std::vector<int>> gens(data.size());
    parallel_for(static_cast<int>(data.size()), threads, [&](int i) {
        auto hyps = beam_search(model, data[static_cast<size_t>(i)].source,
                                data[static_cast<size_t>(i)].context, dcfg);
        std::vector<int> toks = hyps.front().tokens;
        if (!toks.empty() && toks.back() == kEosId) toks.pop_back();
        gens[static_cast<size_t>(i)] = std::move(toks);
    });
    return gens;
}

int cmd_synth(const RunConfig& rc) {
    fs::path dir = require_out_dir(rc);
    // Generate everything before touching the filesystem so a capacity error
    // leaves no partial files behind.
    SynthSplits task = synth_lookup_task(rc.n_keys, rc.n_ops, rc.n_examples, rc.seed);
    save_dataset((dir / "train.tsv").string(), task.train, task.vocab);
    save_dataset((dir / "valid.tsv").string(), task.valid, task.vocab);
    save_dataset((dir / "test.tsv").string(), task.test, task.vocab);
    task.vocab.save((dir / "vocab.txt").string());
    write_manifest(rc.out_dir, "synth", rc,
                   {"train.tsv", "valid.tsv", "test.tsv", "vocab.txt"});
    std::cout << "synth: " << task.train.size() << " train / " << task.valid.size()
              << " valid / " << task.test.size() << " test examples, vocab "
              << task.vocab.size() << "\n";
    return 0;
}

int cmd_train(const RunConfig& rc) {
    fs::path dir = require_out_dir(rc);
    if (rc.train_data.empty() || rc.valid_data.empty())
        throw ConfigError("--train and --valid are required");
    if (rc.vocab.empty()) throw ConfigError("--vocab is required");
    Vocabulary vocab = Vocabulary::load(rc.vocab);
    std::vector<ExampleTriple> train_set = load_dataset(rc.train_data, vocab);
    std::vector<ExampleTriple> valid_set = load_dataset(rc.valid_data, vocab);

    Model model(rc.to_model_config(vocab.size()), rc.seed);
    TrainConfig tcfg = rc.to_train_config();
    TrainSink sink;
    sink.checkpoint_path = (dir / "checkpoint.bin").string();
    sink.log_path = (dir / "train_log.jsonl").string();
    sink.run_config_json = rc.to_json_string();
    sink.run_config_hash = rc.hash();
    sink.vocab_hash = vocab.content_hash();

    TrainResult result = train(model, train_set, valid_set, tcfg, sink);
    write_manifest(rc.out_dir, "train", rc, {"checkpoint.bin", "train_log.jsonl"});
    std::cout << "train: " << result.steps_run << " steps, best validation ppl "
              << result.best_valid_ppl << " at step " << result.best_step << "\n";
    return 0;
}

int cmd_generate(const RunConfig& rc) {
    fs::path dir = require_out_dir(rc);
    if (rc.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    if (rc.input.empty()) throw ConfigError("--input is required");
    CheckpointData ckpt = load_checkpoint(rc.checkpoint);
    Vocabulary vocab = load_vocab_checked(rc, ckpt);
    Model model = model_from_checkpoint(ckpt);
    std::vector<ExampleTriple> inputs = load_inputs(rc.input, vocab);
    DecodeConfig dcfg = rc.to_decode_config();

    std::string name = rc.nbest > 1 ? "nbest.txt" : "generations.txt";
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw DataError("generate: cannot write into '" + rc.out_dir + "'");
    out << "# ctxseq runconfig=" << hash_hex(rc.hash()) << "\n";

    if (rc.nbest > 1) {
        std::vector<std::vector<Hypothesis>> all(inputs.size());
        parallel_for(static_cast<int>(inputs.size()), rc.threads, [&](int i) {
            all[static_cast<size_t>(i)] = beam_search(model, inputs[static_cast<size_t>(i)].source,
                                                      inputs[static_cast<size_t>(i)].context, dcfg);
        });
        for (size_t i = 0; i < all.size(); ++i) {
            int rank = 0;
            for (const auto& h : all[i]) {
                if (rank >= rc.nbest) break;
                std::vector<int> toks = h.tokens;
                if (!toks.empty() && toks.back() == kEosId) toks.pop_back();
                out << i << "\t" << rank << "\t" << h.score << "\t" << vocab.decode(toks) << "\n";
                ++rank;
            }
        }
    } else {
        std::vector<std::vector<int>> gens = decode_all(model, inputs, dcfg, rc.threads);
        for (const auto& g : gens) out << vocab.decode(g) << "\n";
    }
    write_manifest(rc.out_dir, "generate", rc, {name});
    std::cout << "generate: " << inputs.size() << " inputs -> " << (dir / name).string() << "\n";
    return 0;
}

std::vector<std::vector<int>> read_generations(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("generations: cannot open '" + path + "'");
    std::vector<std::vector<int>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty() && line[0] == '#') continue;
        out.push_back(vocab.encode_line(line));
    }
    return out;
}

int cmd_eval(const RunConfig& rc) {
    fs::path dir = require_out_dir(rc);
    if (rc.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    if (rc.data.empty()) throw ConfigError("--data is required");
    CheckpointData ckpt = load_checkpoint(rc.checkpoint);
    Vocabulary vocab = load_vocab_checked(rc, ckpt);
    Model model = model_from_checkpoint(ckpt);
    std::vector<ExampleTriple> data = load_dataset(rc.data, vocab);
    if (data.empty()) throw DataError("eval: empty dataset");
    DecodeConfig dcfg = rc.to_decode_config();

    std::vector<std::vector<int>> gens;
    if (!rc.generations.empty()) {
        gens = read_generations(rc.generations, vocab);
        if (gens.size() != data.size())
            throw DataError("eval: " + std::to_string(gens.size()) + " generations for " +
                            std::to_string(data.size()) + " examples");
    } else {
        gens = decode_all(model, data, dcfg, rc.threads);
    }

    MetricsReport report = overlap_metrics(data, gens, vocab);
    report.ppl = eval_ppl(model, data);

    if (!rc.reverse_checkpoint.empty()) {
        CheckpointData rev_ckpt = load_checkpoint(rc.reverse_checkpoint);
        if (rev_ckpt.vocab_hash != 0 && rev_ckpt.vocab_hash != vocab.content_hash())
            throw DataError("reverse checkpoint was trained with a different vocabulary");
        Model reverse = model_from_checkpoint(rev_ckpt);
        report.bw_ppl = backward_ppl(model, reverse, data, dcfg);
    }

    nlohmann::json j;
    j["rouge1"] = report.rouge1;
    j["rouge2"] = report.rouge2;
    j["rougeL"] = report.rougeL;
    j["f1"] = report.f1;
    j["bleu"] = report.bleu;
    j["ppl"] = report.ppl;
    j["bw_ppl"] = report.bw_ppl ? nlohmann::json(*report.bw_ppl) : nlohmann::json(nullptr);
    j["u_ctx"] = report.u_ctx ? nlohmann::json(*report.u_ctx) : nlohmann::json(nullptr);
    j["skipped_uctx"] = report.skipped_uctx;
    j["n_examples"] = report.n_examples;
    j["runconfig"] = rc.to_json();
    j["runconfig_hash"] = hash_hex(rc.hash());
    std::ofstream out(dir / "report.json");
    if (!out) throw DataError("eval: cannot write into '" + rc.out_dir + "'");
    out << j.dump(2) << "\n";
    write_manifest(rc.out_dir, "eval", rc, {"report.json"});
    std::cout << "eval: rouge1 " << report.rouge1 << " rouge2 " << report.rouge2 << " rougeL "
              << report.rougeL << " f1 " << report.f1 << " bleu " << report.bleu << " ppl "
              << report.ppl << "\n";
    return 0;
}

int cmd_stats(const RunConfig& rc) {
    fs::path dir = require_out_dir(rc);
    if (rc.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    if (rc.data.empty()) throw ConfigError("--data is required");
    CheckpointData ckpt = load_checkpoint(rc.checkpoint);
    Vocabulary vocab = load_vocab_checked(rc, ckpt);
    Model model = model_from_checkpoint(ckpt);
    std::vector<ExampleTriple> data = load_dataset(rc.data, vocab);
    if (data.empty()) throw DataError("stats: empty dataset");

    bool joint = model.config().strategy == DecoderStrategy::Sequential;
    AttnStatsAccumulator acc(rc.window_radius);
    NoGradGuard ng;
    int used = 0;
    for (const ExampleTriple& ex : data) {
        Recorder rec;
        std::vector<Segment> segments;
        if (joint) {
            // Joint "S <sep> C" encoding: cross-segment masses are meaningful.
            model.encode_example(ex.source, ex.context, &rec);
            segments.assign(ex.source.size() + 1, Segment::Source);  // S + <sep>
            segments.insert(segments.end(), ex.context.size(), Segment::Context);
        } else {
            // Separate encoders never attend across S and C; report the
            // context encoder's self-attention window statistics.
            if (ex.context.empty()) continue;
            model.encode(ex.context, /*is_context=*/true, &rec);
            segments.assign(ex.context.size(), Segment::Context);
        }
        acc.add(rec.records, segments);
        ++used;
    }
    if (used == 0) throw DataError("stats: no usable examples (empty contexts?)");
    AttnStats stats = acc.finalize();

    nlohmann::json j;
    j["s_attn_c"] = stats.s_attn_c;
    j["c_attn_s"] = stats.c_attn_s;
    j["win_attn"] = stats.win_attn;
    j["window_radius"] = stats.window_radius;
    j["joint_cross_stats"] = joint;
    j["n_examples"] = used;
    j["runconfig"] = rc.to_json();
    j["runconfig_hash"] = hash_hex(rc.hash());
    std::ofstream out(dir / "attn_stats.json");
    if (!out) throw DataError("stats: cannot write into '" + rc.out_dir + "'");
    out << j.dump(2) << "\n";
    write_manifest(rc.out_dir, "stats", rc, {"attn_stats.json"});
    std::cout << "stats: S_attn-C " << stats.s_attn_c << " C_attn-S " << stats.c_attn_s
              << " Win_attn " << stats.win_attn << " (radius " << stats.window_radius << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig rc;
    CLI::App app{"ctxseq: context-aware seq2seq transformers"};
    app.require_subcommand(1);

    // The config file loads before flag parsing so flags override it; the
    // CTXSEQ_SEED environment variable sits between the two.
    std::string config_path;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
    try {
        if (!config_path.empty()) rc.load_file(config_path);
        rc.apply_env();
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    std::string config_flag;  // consumed above; registered so CLI11 accepts it
    app.add_option("--config", config_flag, "flat key=value configuration file");
    app.add_option("--seed", rc.seed, "run seed (overrides config and CTXSEQ_SEED)");
    app.add_option("--out-dir", rc.out_dir, "run directory for all artifacts");
    app.add_option("--threads", rc.threads, "threads for per-example decode/eval");

    CLI::App* synth = app.add_subcommand("synth", "generate the synthetic lookup task");
    synth->add_option("--n-keys", rc.n_keys);
    synth->add_option("--n-ops", rc.n_ops);
    synth->add_option("--n-examples", rc.n_examples);

    CLI::App* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--train", rc.train_data, "training TSV");
    train_cmd->add_option("--valid", rc.valid_data, "validation TSV");
    train_cmd->add_option("--vocab", rc.vocab, "vocabulary file");
    train_cmd->add_option("--init-checkpoint", rc.init_checkpoint, "warm-start checkpoint");
    train_cmd->add_option("--lr-peak", rc.lr_peak);
    train_cmd->add_option("--warmup-steps", rc.warmup_steps);
    train_cmd->add_option("--warmup-init-lr", rc.warmup_init_lr);
    train_cmd->add_option("--batch-size", rc.batch_size);
    train_cmd->add_option("--max-steps", rc.max_steps);
    train_cmd->add_option("--validate-every", rc.validate_every);
    train_cmd->add_option("--clip-norm", rc.clip_norm);
    train_cmd->add_option("--p-st", rc.p_st, "probability of the S->T task (drop C)");
    train_cmd->add_option("--p-sc", rc.p_sc, "probability of the S->C task");
    add_model_flags(train_cmd, rc);

    CLI::App* gen = app.add_subcommand("generate", "beam-search decode an input file");
    gen->add_option("--checkpoint", rc.checkpoint);
    gen->add_option("--vocab", rc.vocab);
    gen->add_option("--input", rc.input, "TSV with S, optional C (and ignored T)");
    gen->add_option("--nbest", rc.nbest, "emit the top-N hypotheses with scores");
    add_decode_flags(gen, rc);

    CLI::App* eval_cmd = app.add_subcommand("eval", "score a model on a dataset");
    eval_cmd->add_option("--checkpoint", rc.checkpoint);
    eval_cmd->add_option("--vocab", rc.vocab);
    eval_cmd->add_option("--data", rc.data, "gold TSV (S, C, T)");
    eval_cmd->add_option("--generations", rc.generations, "pre-computed generations file");
    eval_cmd->add_option("--reverse-checkpoint", rc.reverse_checkpoint,
                         "T->S model for backward perplexity");
    add_decode_flags(eval_cmd, rc);

    CLI::App* stats = app.add_subcommand("stats", "encoder attention statistics");
    stats->add_option("--checkpoint", rc.checkpoint);
    stats->add_option("--vocab", rc.vocab);
    stats->add_option("--data", rc.data);
    stats->add_option("--window-radius", rc.window_radius);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(rc);
        if (train_cmd->parsed()) return cmd_train(rc);
        if (gen->parsed()) return cmd_generate(rc);
        if (eval_cmd->parsed()) return cmd_eval(rc);
        if (stats->parsed()) return cmd_stats(rc);
        throw ConfigError("no subcommand given");
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
