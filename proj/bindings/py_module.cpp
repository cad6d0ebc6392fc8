// Python bindings: a thin, file-oriented wrapper over the C++ core. The
// Python surface deals in paths, bytes and plain dicts; model state stays on
// the C++ side behind checkpoint prefixes.

#include <pybind11/pybind11.h>

#include <cstdint>
#include <string>
#include <vector>

#include "mudd/complexity.hpp"
#include "mudd/train.hpp"

namespace py = pybind11;
using namespace mudd;

namespace {

py::bytes to_py_bytes(const std::vector<uint8_t>& v) {
    return py::bytes(reinterpret_cast<const char*>(v.data()), v.size());
}

std::vector<uint8_t> from_py_bytes(const py::bytes& b) {
    const std::string s = b;
    return std::vector<uint8_t>(s.begin(), s.end());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Core operations: architecture analysis, training, evaluation, generation.";
    m.attr("__version__") = "0.1.0";

    m.def(
        "analyze_json",
        [](int64_t L, int64_t D, int64_t T, int64_t heads, int64_t batch, int64_t ways) {
            ArchSpec spec;
            spec.L = L;
            spec.D = D;
            spec.T = T;
            spec.N_heads = heads;
            spec.B = batch;
            spec.C = ways;
            return format_report(analyze_arch(spec), "json");
        },
        py::arg("L") = 24, py::arg("D") = 2048, py::arg("T") = 4096, py::arg("heads") = 16,
        py::arg("batch") = 1, py::arg("ways") = 4,
        "Overhead report (extra parameters, FLOPs, activation memory) as a JSON string.");

    m.def(
        "make_corpus",
        [](uint64_t seed, int64_t nbytes) {
            std::vector<uint8_t> bytes;
            {
                py::gil_scoped_release release;
                bytes = make_synthetic_corpus(seed, nbytes);
            }
            return to_py_bytes(bytes);
        },
        py::arg("seed") = 0, py::arg("nbytes") = int64_t(1) << 20,
        "Deterministic pseudo-English byte corpus for desk-scale experiments.");

    m.def(
        "param_counts",
        [](const std::string& config_text) {
            const TrainConfig cfg = parse_train_config_text(config_text);
            const ParamCounts pc = model_param_counts(cfg.model);
            py::dict d;
            d["embed"] = pc.embed;
            d["unembed"] = pc.unembed;
            d["final_norm"] = pc.final_norm;
            d["blocks"] = pc.blocks;
            d["da"] = pc.da;
            d["total"] = pc.total();
            d["nonembedding"] = pc.nonembedding();
            return d;
        },
        py::arg("config_text"),
        "Exact parameter accounting for the model described by a flat config text.");

    m.def(
        "train_file",
        [](const std::string& config_path, int64_t seed, const std::string& out_dir) {
            TrainConfig cfg = parse_train_config(config_path);
            if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
            if (!out_dir.empty()) cfg.out_dir = out_dir;
            cfg.validate();
            TrainResult res;
            {
                py::gil_scoped_release release;
                res = train(cfg);
            }
            py::dict d;
            d["final_val_loss"] = res.final_val_loss;
            d["best_val_loss"] = res.best_val_loss;
            d["metrics_path"] = res.metrics_path;
            d["last_checkpoint"] = res.last_prefix;
            d["best_checkpoint"] = res.best_prefix;
            d["steps"] = static_cast<int64_t>(res.rows.size());
            return d;
        },
        py::arg("config_path"), py::arg("seed") = -1, py::arg("out_dir") = std::string(),
        "Run the training loop described by a flat config file; a non-negative seed or a "
        "non-empty out_dir overrides the config.");

    m.def(
        "evaluate",
        [](const std::string& checkpoint, const std::string& corpus, int64_t batch_size) {
            EvalResult r;
            {
                py::gil_scoped_release release;
                r = evaluate_checkpoint(checkpoint, corpus, batch_size);
            }
            py::dict d;
            d["loss"] = r.loss;
            d["perplexity"] = r.perplexity;
            d["tokens"] = r.tokens;
            return d;
        },
        py::arg("checkpoint"), py::arg("corpus"), py::arg("batch_size") = 8,
        "Mean token-level cross-entropy of a checkpoint over a byte corpus.");

    m.def(
        "generate",
        [](const std::string& checkpoint, const py::bytes& prompt, int64_t n,
           const std::string& mode, double temperature, int64_t top_k, uint64_t seed) {
            const std::vector<uint8_t> p = from_py_bytes(prompt);
            GenerateOptions opt;
            opt.mode = mode;
            opt.temperature = temperature;
            opt.top_k = top_k;
            opt.seed = seed;
            std::vector<uint8_t> out;
            {
                py::gil_scoped_release release;
                out = generate_from_checkpoint(checkpoint, p, n, opt);
            }
            return to_py_bytes(out);
        },
        py::arg("checkpoint"), py::arg("prompt"), py::arg("n") = 64,
        py::arg("mode") = std::string("greedy"), py::arg("temperature") = 1.0,
        py::arg("top_k") = 40, py::arg("seed") = 0,
        "Continue a byte prompt with n bytes via incremental decoding.");
}
