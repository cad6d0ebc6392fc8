// muddformer: train, evaluate, generate from, and analyze byte-level language
// models with multiway dynamic dense connections.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mudd/analysis.hpp"
#include "mudd/complexity.hpp"
#include "mudd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mudd;

namespace {

void print_eval_rows(const MetricsRow& row) {
    if (std::isnan(row.val_loss)) return;
    std::printf("step %6lld  train_loss %.6f  val_loss %.6f  lr %.3g  (%lld ms)\n",
                static_cast<long long>(row.step), row.train_loss, row.val_loss, row.lr,
                static_cast<long long>(row.wall_ms));
    std::fflush(stdout);
}

std::string slug(const std::string& name) {
    std::string out;
    for (char ch : name) {
        if (std::isalnum(static_cast<unsigned char>(ch)))
            out += ch;
        else if (!out.empty() && out.back() != '_')
            out += '_';
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out.empty() ? "run" : out;
}

// ---- analyze-model ---------------------------------------------------------

struct ModelAnalysis {
    AnalysisReport report;
    int64_t L = 0;
    int64_t batches = 0;
    int64_t batch_size = 0;
    int64_t seq_len = 0;
};

template <typename S>
ModelAnalysis run_traced_analysis(const std::string& prefix, const std::vector<uint8_t>& bytes,
                                  int64_t want_batches, int64_t batch_size, int64_t seq_len) {
    auto m = load_checkpoint<S>(prefix);
    if (seq_len <= 0) seq_len = std::min<int64_t>(m.cfg.T_max, 256);
    if (seq_len > m.cfg.T_max)
        throw std::invalid_argument("analyze-model: seq-len exceeds the checkpoint's T_max");
    for (uint8_t b : bytes)
        if (static_cast<int64_t>(b) >= m.cfg.V)
            throw std::invalid_argument("analyze-model: corpus byte " + std::to_string(b) +
                                        " outside the model vocabulary");
    const int64_t chunks =
        bytes.empty() ? 0 : (static_cast<int64_t>(bytes.size()) - 1) / seq_len;
    if (chunks < 1) throw std::invalid_argument("analyze-model: corpus smaller than one sequence");

    std::vector<TracedBatch<S>> batches;
    int64_t c0 = 0;
    for (int64_t k = 0; k < want_batches && c0 < chunks; ++k) {
        const int64_t B = std::min(batch_size, chunks - c0);
        TracedBatch<S> tb;
        tb.B = B;
        tb.T = seq_len;
        tb.tokens.resize(static_cast<size_t>(B * seq_len));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < seq_len; ++t)
                tb.tokens[static_cast<size_t>(b * seq_len + t)] =
                    bytes[static_cast<size_t>((c0 + b) * seq_len + t)];
        model_forward<S>(m, tb.tokens, B, seq_len, {}, &tb.trace);
        batches.push_back(std::move(tb));
        c0 += B;
    }
    ModelAnalysis out;
    out.report = analyze_traces<S>(batches, default_sink_tokens());
    out.L = m.cfg.L;
    out.batches = static_cast<int64_t>(batches.size());
    out.batch_size = batch_size;
    out.seq_len = seq_len;
    return out;
}

std::string way_label(int64_t ways, int64_t c) {
    return ways == 4 ? stream_name(static_cast<Stream>(c)) : std::to_string(c);
}

std::string analysis_csv(const ModelAnalysis& a, const std::string& metric) {
    std::ostringstream o;
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.10g", v);
        return std::string(buf);
    };
    if (metric == "cosine") {
        o << "stream,lower_layer,upper_layer,mean_cosine,excluded_positions\n";
        for (int s = 0; s < 4; ++s) {
            const auto& pts = a.report.cosine[static_cast<size_t>(s)];
            for (size_t p = 0; p < pts.size(); ++p)
                o << stream_name(static_cast<Stream>(s)) << "," << p + 1 << "," << p + 2 << ","
                  << num(pts[p].mean) << "," << pts[p].excluded << "\n";
        }
    } else if (metric == "head_act") {
        o << "layer,active_fraction\n";
        for (size_t i = 0; i < a.report.head_activation.size(); ++i)
            o << i + 1 << "," << num(a.report.head_activation[i]) << "\n";
    } else if (metric == "mudd_weights") {
        o << "layer,way,source,rectified_mean,rectified_std,source_mean_norm\n";
        for (const auto& ls : a.report.rectified.layers)
            for (int64_t c = 0; c < ls.ways; ++c)
                for (size_t j = 0; j < ls.sources.size(); ++j) {
                    const int64_t src = ls.sources[j];
                    o << ls.layer << "," << way_label(ls.ways, c) << "," << src << ","
                      << num(ls.mean[static_cast<size_t>(c)][j]) << ","
                      << num(ls.stddev[static_cast<size_t>(c)][j]) << ","
                      << num(a.report.rectified.mean_norms[static_cast<size_t>(src)]) << "\n";
                }
    } else {
        throw std::invalid_argument("csv output needs one metric (cosine, head_act or "
                                    "mudd_weights); use --format json for all of them");
    }
    return o.str();
}

json analysis_json(const ModelAnalysis& a, const std::string& metric) {
    json out;
    out["batches"] = a.batches;
    out["batch_size"] = a.batch_size;
    out["seq_len"] = a.seq_len;
    out["layers"] = a.L;
    if (metric == "cosine" || metric == "all") {
        json cos;
        for (int s = 0; s < 4; ++s) {
            json arr = json::array();
            const auto& pts = a.report.cosine[static_cast<size_t>(s)];
            for (size_t p = 0; p < pts.size(); ++p)
                arr.push_back({{"lower_layer", p + 1},
                               {"upper_layer", p + 2},
                               {"mean_cosine", pts[p].mean},
                               {"excluded_positions", pts[p].excluded}});
            cos[stream_name(static_cast<Stream>(s))] = arr;
        }
        out["cosine"] = cos;
    }
    if (metric == "head_act" || metric == "all")
        out["head_activation"] = a.report.head_activation;
    if (metric == "mudd_weights" || metric == "all") {
        json layers = json::array();
        for (const auto& ls : a.report.rectified.layers) {
            json ways = json::array();
            for (int64_t c = 0; c < ls.ways; ++c)
                ways.push_back({{"way", way_label(ls.ways, c)},
                                {"mean", ls.mean[static_cast<size_t>(c)]},
                                {"stddev", ls.stddev[static_cast<size_t>(c)]}});
            layers.push_back(
                {{"layer", ls.layer}, {"sources", ls.sources}, {"ways", ways}});
        }
        out["mudd_weights"] = {{"mean_norms", a.report.rectified.mean_norms},
                               {"layers", layers}};
    }
    return out;
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        if (!text.empty() && text.back() != '\n') std::cout << "\n";
        return;
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << text;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Byte-level language models with multiway dynamic dense connections"};
    app.require_subcommand(1);

    // --- train ---
    auto* cmd_train = app.add_subcommand("train", "Train a model from a flat key=value config");
    std::string train_config_path, train_out;
    int64_t train_seed = -1;
    cmd_train->add_option("--config", train_config_path, "config file")->required();
    cmd_train->add_option("--seed", train_seed, "override the config's seed");
    cmd_train->add_option("--out", train_out, "override the config's output directory");

    // --- eval ---
    auto* cmd_eval = app.add_subcommand("eval", "Cross-entropy of a checkpoint on a byte corpus");
    std::string eval_ckpt, eval_corpus;
    int64_t eval_batch = 8;
    cmd_eval->add_option("--checkpoint", eval_ckpt, "checkpoint prefix")->required();
    cmd_eval->add_option("--corpus", eval_corpus, "corpus file")->required();
    cmd_eval->add_option("--batch-size", eval_batch, "sequences per forward pass");

    // --- generate ---
    auto* cmd_gen = app.add_subcommand("generate", "Continue a prompt with incremental decoding");
    std::string gen_ckpt, gen_prompt, gen_mode = "greedy";
    int64_t gen_n = 64, gen_topk = 40, gen_seed = 0;
    double gen_temp = 1.0;
    bool gen_raw = false;
    cmd_gen->add_option("--checkpoint", gen_ckpt, "checkpoint prefix")->required();
    cmd_gen->add_option("--prompt", gen_prompt, "prompt text (bytes)")->required();
    cmd_gen->add_option("--n", gen_n, "bytes to generate");
    cmd_gen->add_option("--mode", gen_mode, "greedy | temperature | top_k");
    cmd_gen->add_option("--temperature", gen_temp, "softmax temperature (0 = greedy)");
    cmd_gen->add_option("--top-k", gen_topk, "candidate pool for top_k mode");
    cmd_gen->add_option("--seed", gen_seed, "sampling seed");
    cmd_gen->add_flag("--raw", gen_raw, "no trailing newline");

    // --- analyze (closed-form overheads) ---
    auto* cmd_an = app.add_subcommand(
        "analyze", "Parameter/FLOP/memory overhead of dense connections for an architecture");
    ArchSpec spec;
    std::string an_format = "table";
    cmd_an->add_option("--L", spec.L, "layers");
    cmd_an->add_option("--D", spec.D, "model width");
    cmd_an->add_option("--T", spec.T, "sequence length");
    cmd_an->add_option("--heads,--N", spec.N_heads, "attention heads (memory only)");
    cmd_an->add_option("--batch,--B", spec.B, "batch size (memory only)");
    cmd_an->add_option("--ways,--C", spec.C, "aggregated ways (4 = multiway, 1 = single)");
    cmd_an->add_option("--format", an_format, "table | json | csv");

    // --- analyze-model (measured diagnostics) ---
    auto* cmd_am = app.add_subcommand(
        "analyze-model", "Trace a checkpoint over a corpus: cosine, head activity, DA weights");
    std::string am_ckpt, am_corpus, am_metric = "all", am_format = "json", am_out;
    int64_t am_batches = 4, am_batch = 4, am_seq = 0;
    cmd_am->add_option("--checkpoint", am_ckpt, "checkpoint prefix")->required();
    cmd_am->add_option("--corpus", am_corpus, "corpus file")->required();
    cmd_am->add_option("--metric", am_metric, "cosine | head_act | mudd_weights | all");
    cmd_am->add_option("--batches", am_batches, "batches to trace");
    cmd_am->add_option("--batch-size", am_batch, "sequences per batch");
    cmd_am->add_option("--seq-len", am_seq, "sequence length (default min(T_max, 256))");
    cmd_am->add_option("--format", am_format, "json | csv");
    cmd_am->add_option("--out", am_out, "write to file instead of stdout");

    // --- ablate ---
    auto* cmd_ab = app.add_subcommand("ablate", "Train the ablation grid and emit a comparison CSV");
    std::string ab_suite = "table6", ab_out = "ablations", ab_corpus, ab_config;
    int64_t ab_steps = -1, ab_seed = 0, ab_seeds = 1;
    cmd_ab->add_option("--suite", ab_suite, "grid to run (table6)");
    cmd_ab->add_option("--out", ab_out, "output directory");
    cmd_ab->add_option("--corpus", ab_corpus, "training corpus (default: synthesized)");
    cmd_ab->add_option("--config", ab_config, "base trainer config to start from");
    cmd_ab->add_option("--steps", ab_steps, "override training steps");
    cmd_ab->add_option("--seed", ab_seed, "first seed");
    cmd_ab->add_option("--seeds", ab_seeds, "seeds per variant");

    // --- make-corpus ---
    auto* cmd_mc = app.add_subcommand("make-corpus", "Write a deterministic synthetic text corpus");
    std::string mc_out;
    int64_t mc_bytes = 1 << 20, mc_seed = 0;
    cmd_mc->add_option("--out", mc_out, "output file")->required();
    cmd_mc->add_option("--bytes", mc_bytes, "size in bytes");
    cmd_mc->add_option("--seed", mc_seed, "generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*cmd_train) {
            TrainConfig cfg = parse_train_config(train_config_path);
            if (train_seed >= 0) cfg.seed = static_cast<uint64_t>(train_seed);
            if (!train_out.empty()) cfg.out_dir = train_out;
            const TrainResult res = train(cfg, print_eval_rows);
            std::printf("final_val_loss %.6f\nbest_val_loss %.6f\nmetrics %s\nlast %s\nbest %s\n",
                        res.final_val_loss, res.best_val_loss, res.metrics_path.c_str(),
                        res.last_prefix.c_str(), res.best_prefix.c_str());
        } else if (*cmd_eval) {
            const EvalResult r = evaluate_checkpoint(eval_ckpt, eval_corpus, eval_batch);
            std::printf("loss %.6f\nperplexity %.6f\ntokens %lld\n", r.loss, r.perplexity,
                        static_cast<long long>(r.tokens));
        } else if (*cmd_gen) {
            GenerateOptions opt;
            opt.mode = gen_mode;
            opt.temperature = gen_temp;
            opt.top_k = gen_topk;
            opt.seed = static_cast<uint64_t>(gen_seed);
            const std::vector<uint8_t> prompt(gen_prompt.begin(), gen_prompt.end());
            const auto out = generate_from_checkpoint(gen_ckpt, prompt, gen_n, opt);
            std::fwrite(out.data(), 1, out.size(), stdout);
            if (!gen_raw) std::fputc('\n', stdout);
        } else if (*cmd_an) {
            std::cout << format_report(analyze_arch(spec), an_format);
        } else if (*cmd_am) {
            const auto corpus = load_corpus(am_corpus);
            const ModelAnalysis a =
                checkpoint_dtype(am_ckpt) == "f64"
                    ? run_traced_analysis<double>(am_ckpt, corpus, am_batches, am_batch, am_seq)
                    : run_traced_analysis<float>(am_ckpt, corpus, am_batches, am_batch, am_seq);
            if (am_format == "csv")
                emit(analysis_csv(a, am_metric), am_out);
            else if (am_format == "json")
                emit(analysis_json(a, am_metric).dump(2) + "\n", am_out);
            else
                throw std::invalid_argument("unknown format '" + am_format + "'");
        } else if (*cmd_ab) {
            if (ab_suite != "table6")
                throw std::invalid_argument("unknown suite '" + ab_suite + "' (have: table6)");
            TrainConfig base;
            if (!ab_config.empty()) base = parse_train_config(ab_config);
            if (ab_steps > 0) base.steps = ab_steps;
            fs::create_directories(ab_out);
            if (ab_corpus.empty()) {
                ab_corpus = ab_out + "/corpus.bin";
                const auto corpus = make_synthetic_corpus(1, 1 << 20);
                std::ofstream out(ab_corpus, std::ios::binary);
                out.write(reinterpret_cast<const char*>(corpus.data()),
                          static_cast<std::streamsize>(corpus.size()));
            }
            base.train_corpus = ab_corpus;

            const std::string table_path = ab_out + "/comparison.csv";
            std::ofstream table(table_path, std::ios::binary);
            if (!table) throw std::runtime_error("cannot write " + table_path);
            table << "name,variant,realloc,seed,params,da_params,final_val_loss,best_val_loss,"
                     "wall_s\n";
            for (const std::string& name : ablation_suite()) {
                for (int64_t s = 0; s < ab_seeds; ++s) {
                    TrainConfig cfg = base;
                    cfg.model = ablation_variant(base.model, name);
                    cfg.seed = static_cast<uint64_t>(ab_seed + s);
                    cfg.out_dir = ab_out + "/" + slug(name) + "_s" + std::to_string(cfg.seed);
                    std::printf("== %s (seed %llu) ==\n", name.c_str(),
                                static_cast<unsigned long long>(cfg.seed));
                    std::fflush(stdout);
                    const TrainResult res = train(cfg, print_eval_rows);
                    const ParamCounts pc = model_param_counts(cfg.model);
                    char line[256];
                    std::snprintf(line, sizeof(line), "%s,%s,%d,%llu,%lld,%lld,%.6f,%.6f,%.1f",
                                  name.c_str(), variant_name(cfg.model.variant).c_str(),
                                  cfg.model.realloc ? 1 : 0,
                                  static_cast<unsigned long long>(cfg.seed),
                                  static_cast<long long>(pc.total()),
                                  static_cast<long long>(pc.da), res.final_val_loss,
                                  res.best_val_loss,
                                  double(res.rows.back().wall_ms) / 1000.0);
                    table << line << "\n";
                    table.flush();
                }
            }
            std::printf("wrote %s\n", table_path.c_str());
        } else if (*cmd_mc) {
            const auto corpus = make_synthetic_corpus(static_cast<uint64_t>(mc_seed), mc_bytes);
            std::ofstream out(mc_out, std::ios::binary);
            if (!out) throw std::runtime_error("cannot write " + mc_out);
            out.write(reinterpret_cast<const char*>(corpus.data()),
                      static_cast<std::streamsize>(corpus.size()));
            std::printf("wrote %s (%lld bytes)\n", mc_out.c_str(),
                        static_cast<long long>(corpus.size()));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
